use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Smallest eigenvalue tolerated before the diagonal is lifted.
pub const EIGEN_FLOOR: f64 = 1e-6;

/// Symmetric, unit-diagonal, positive-definite correlation matrix together
/// with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    entries: DMatrix<f64>,
    lower: DMatrix<f64>,
    ln_det: f64,
}

impl PartialEq for CorrelationMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl CorrelationMatrix {
    pub fn identity(dim: usize) -> Self {
        Self::factorize(DMatrix::identity(dim, dim)).expect("identity is positive definite")
    }

    /// Validates a correlation matrix, applies the eigenvalue floor and
    /// factorizes it.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        validate(&entries)?;
        Self::factorize(regularize(entries))
    }

    fn factorize(entries: DMatrix<f64>) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(entries.clone()).ok_or_else(|| {
            Error::Numeric("correlation matrix is not positive definite after regularization".into())
        })?;
        let lower = chol.l();
        let ln_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            entries,
            lower,
            ln_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Lower-triangular `L` with `L Lᵀ = Σ`.
    pub fn cholesky_lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn ln_det(&self) -> f64 {
        self.ln_det
    }

    /// `zᵀ Σ⁻¹ z` via forward substitution on the Cholesky factor.
    pub fn mahalanobis_sq(&self, z: &[f64]) -> Result<f64> {
        let k = self.dim();
        if z.len() != k {
            return Err(Error::Contract(format!(
                "mahalanobis: vector has {} entries, matrix is {k}x{k}",
                z.len()
            )));
        }
        let mut y = vec![0.0; k];
        let mut acc = 0.0;
        for i in 0..k {
            let mut s = z[i];
            for j in 0..i {
                s -= self.lower[(i, j)] * y[j];
            }
            y[i] = s / self.lower[(i, i)];
            acc += y[i] * y[i];
        }
        Ok(acc)
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let k = self.dim();
        let mut out = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                out.push(self.entries[(i, j)]);
            }
        }
        out
    }
}

fn validate(m: &DMatrix<f64>) -> Result<()> {
    let k = m.nrows();
    if k == 0 || m.ncols() != k {
        return Err(Error::Contract(format!(
            "correlation matrix must be square and nonempty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    for i in 0..k {
        if (m[(i, i)] - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("diagonal entry {i} is {} (expected 1)", m[(i, i)])));
        }
        for j in 0..i {
            let v = m[(i, j)];
            if !v.is_finite() || v.abs() > 1.0 + 1e-12 || (v - m[(j, i)]).abs() > 1e-12 {
                return Err(Error::Contract(format!("invalid correlation entry ({i},{j}) = {v}")));
            }
        }
    }
    Ok(())
}

/// Lifts the spectrum so that `λ_min >= EIGEN_FLOOR`, then rescales back to
/// a unit diagonal.
fn regularize(m: DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    if k == 1 {
        return m;
    }
    let eig = SymmetricEigen::new(m.clone());
    let lambda_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lambda_min >= EIGEN_FLOOR {
        return m;
    }
    let shift = EIGEN_FLOOR - lambda_min;
    let mut lifted = m;
    for i in 0..k {
        lifted[(i, i)] += shift;
    }
    let scale: Vec<f64> = (0..k).map(|i| lifted[(i, i)].sqrt()).collect();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            lifted[(i, j)] / (scale[i] * scale[j])
        }
    })
}

/// Product-moment correlation of the columns of `rows` (m × K).
///
/// Constant columns get zero off-diagonal entries and a logged warning.
pub fn pearson_correlation(rows: &DMatrix<f64>) -> Result<CorrelationMatrix> {
    let m = rows.nrows();
    let k = rows.ncols();
    if m < 2 {
        return Err(Error::Contract(format!("pearson correlation needs m >= 2 rows, got {m}")));
    }
    if k == 0 {
        return Err(Error::Contract("pearson correlation needs at least one column".into()));
    }
    let means: Vec<f64> = (0..k).map(|j| rows.column(j).sum() / m as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for i in 0..m {
        for a in 0..k {
            let da = rows[(i, a)] - means[a];
            for b in 0..=a {
                cov[(a, b)] += da * (rows[(i, b)] - means[b]);
            }
        }
    }
    let sd: Vec<f64> = (0..k).map(|j| cov[(j, j)].sqrt()).collect();
    for (j, s) in sd.iter().enumerate() {
        if *s <= 0.0 || !s.is_finite() {
            log::warn!("pearson correlation: column {j} is constant; off-diagonal entries set to 0");
        }
    }
    let corr = DMatrix::from_fn(k, k, |a, b| {
        if a == b {
            return 1.0;
        }
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        let denom = sd[hi] * sd[lo];
        if denom > 0.0 && denom.is_finite() {
            (cov[(hi, lo)] / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    });
    CorrelationMatrix::new(corr)
}

pub fn mahalanobis_sq(z: &[f64], sigma: &CorrelationMatrix) -> Result<f64> {
    sigma.mahalanobis_sq(z)
}

#[derive(Serialize, Deserialize)]
struct CorrelationRepr {
    dim: usize,
    entries: Vec<f64>,
}

impl Serialize for CorrelationMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CorrelationRepr {
            dim: self.dim(),
            entries: self.to_row_major(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CorrelationMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = CorrelationRepr::deserialize(d)?;
        if repr.entries.len() != repr.dim * repr.dim {
            return Err(D::Error::custom("correlation entries do not match dim"));
        }
        let m = DMatrix::from_row_slice(repr.dim, repr.dim, &repr.entries);
        validate(&m).map_err(D::Error::custom)?;
        // Stored matrices are already regularized; only refactor.
        CorrelationMatrix::factorize(m).map_err(D::Error::custom)
    }
}
