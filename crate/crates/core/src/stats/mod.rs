//! Numerical substrate: special-function CDFs and inverses, empirical
//! distributions, correlation matrices and Mahalanobis distances.

mod correlation;
mod empirical;
pub mod special;

pub use correlation::{mahalanobis_sq, pearson_correlation, CorrelationMatrix};
pub use empirical::{empirical_quantile, EmpiricalDistribution};
pub use special::{
    chi2_cdf, chi2_inv, f_cdf, std_normal_cdf, std_normal_inv, student_t_cdf, student_t_inv,
};
