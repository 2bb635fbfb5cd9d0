//! Independence, Gaussian and Student-t copulas over pseudo-observations.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::special::{ln_gamma, student_t_ln_pdf};
use crate::stats::{
    chi2_cdf, chi2_inv, f_cdf, pearson_correlation, std_normal_cdf, std_normal_inv, student_t_inv,
    CorrelationMatrix,
};

pub const NU_MIN: f64 = 2.1;
pub const NU_MAX: f64 = 200.0;
const NU_GRID: usize = 24;
const NU_REL_TOL: f64 = 1e-2;
const QMC_POINTS: usize = 1 << 14;
const QMC_SHIFTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopulaKind {
    Independence,
    Gaussian,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CopulaRepr", into = "CopulaRepr")]
pub struct CopulaModel {
    kind: CopulaKind,
    dim: usize,
    sigma: Option<CorrelationMatrix>,
    nu: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CopulaRepr {
    kind: CopulaKind,
    #[serde(rename = "K")]
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<CorrelationMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nu: Option<f64>,
}

impl TryFrom<CopulaRepr> for CopulaModel {
    type Error = Error;

    fn try_from(r: CopulaRepr) -> Result<Self> {
        let bad = |m: &str| Err(Error::Schema(format!("{:?} copula: {m}", r.kind)));
        match (r.kind, &r.sigma, r.nu) {
            (CopulaKind::Independence, None, None) => {}
            (CopulaKind::Gaussian, Some(_), None) => {}
            (CopulaKind::StudentT, Some(_), Some(nu)) if (NU_MIN..=NU_MAX).contains(&nu) => {}
            (CopulaKind::StudentT, Some(_), Some(nu)) => return bad(&format!("nu {nu} outside [{NU_MIN}, {NU_MAX}]")),
            _ => return bad("fields do not match the kind"),
        }
        if let Some(s) = &r.sigma {
            if s.dim() != r.dim {
                return bad("sigma dimension differs from K");
            }
        }
        Ok(Self {
            kind: r.kind,
            dim: r.dim,
            sigma: r.sigma,
            nu: r.nu,
        })
    }
}

impl From<CopulaModel> for CopulaRepr {
    fn from(m: CopulaModel) -> Self {
        Self {
            kind: m.kind,
            dim: m.dim,
            sigma: m.sigma,
            nu: m.nu,
        }
    }
}

impl CopulaModel {
    pub fn independence(dim: usize) -> Self {
        Self {
            kind: CopulaKind::Independence,
            dim,
            sigma: None,
            nu: None,
        }
    }

    pub fn gaussian(sigma: CorrelationMatrix) -> Self {
        Self {
            kind: CopulaKind::Gaussian,
            dim: sigma.dim(),
            sigma: Some(sigma),
            nu: None,
        }
    }

    pub fn student_t(sigma: CorrelationMatrix, nu: f64) -> Result<Self> {
        if !(NU_MIN..=NU_MAX).contains(&nu) {
            return Err(Error::Contract(format!("nu {nu} outside [{NU_MIN}, {NU_MAX}]")));
        }
        Ok(Self {
            kind: CopulaKind::StudentT,
            dim: sigma.dim(),
            sigma: Some(sigma),
            nu: Some(nu),
        })
    }

    pub fn kind(&self) -> CopulaKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> Option<&CorrelationMatrix> {
        self.sigma.as_ref()
    }

    pub fn nu(&self) -> Option<f64> {
        self.nu
    }

    fn check_u(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim {
            return Err(Error::Contract(format!("{} coordinates for a K={} copula", u.len(), self.dim)));
        }
        check_open_unit(u.iter().copied())
    }

    /// Marginal quantile transform: `Φ⁻¹(u)` or `t⁻¹_ν(u)`.
    pub fn transform(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_u(u)?;
        match self.nu {
            Some(nu) => u.iter().map(|&p| student_t_inv(p, nu)).collect(),
            None => u.iter().map(|&p| std_normal_inv(p)).collect(),
        }
    }

    /// Squared Mahalanobis distance of transformed coordinates.
    pub fn mahalanobis_sq(&self, z: &[f64]) -> Result<f64> {
        match &self.sigma {
            Some(s) => s.mahalanobis_sq(z),
            None => {
                if z.len() != self.dim {
                    return Err(Error::Contract("dimension mismatch".into()));
                }
                Ok(z.iter().map(|v| v * v).sum())
            }
        }
    }

    /// CDF of the reference law of `M²`: `χ²_K` or `F(K, ν)` of `M²/K`.
    pub fn m2_cdf(&self, m2: f64) -> Result<f64> {
        let k = self.dim as f64;
        match self.nu {
            Some(nu) => f_cdf(m2 / k, k, nu),
            None => chi2_cdf(m2, k),
        }
    }
}

fn check_open_unit(mut it: impl Iterator<Item = f64>) -> Result<()> {
    match it.find(|&v| !(v > 0.0 && v < 1.0)) {
        Some(v) => Err(Error::Contract(format!("pseudo-observation {v} is outside (0,1)"))),
        None => Ok(()),
    }
}

fn check_rows(u: &DMatrix<f64>) -> Result<()> {
    let (m, k) = u.shape();
    if k == 0 {
        return Err(Error::Contract("copula fit needs at least one column".into()));
    }
    if m < k + 2 {
        return Err(Error::Contract(format!("copula fit needs m >= K + 2 rows, got m={m}, K={k}")));
    }
    check_open_unit(u.iter().copied())
}

pub fn fit_gaussian(u: &DMatrix<f64>) -> Result<CopulaModel> {
    check_rows(u)?;
    let z = u.map(|p| std_normal_inv(p).expect("checked in (0,1)"));
    Ok(CopulaModel::gaussian(pearson_correlation(&z)?))
}

/// Profile log-likelihood of a t copula at `nu`, plus its `Σ̂(ν)`.
fn profile(u: &DMatrix<f64>, unique: &[u64], nu: f64) -> Result<(f64, CorrelationMatrix)> {
    let inv: HashMap<u64, f64> = unique
        .iter()
        .map(|&b| Ok((b, student_t_inv(f64::from_bits(b), nu)?)))
        .collect::<Result<_>>()?;
    let z = u.map(|p| inv[&p.to_bits()]);
    let sigma = pearson_correlation(&z)?;
    let k = u.ncols() as f64;
    let c = ln_gamma(0.5 * (nu + k)) - ln_gamma(0.5 * nu) - 0.5 * k * (nu * std::f64::consts::PI).ln() - 0.5 * sigma.ln_det();
    let mut ll = 0.0;
    let mut row = vec![0.0; u.ncols()];
    for i in 0..z.nrows() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = z[(i, j)];
        }
        let m2 = sigma.mahalanobis_sq(&row)?;
        ll += c - 0.5 * (nu + k) * (m2 / nu).ln_1p();
        ll -= row.iter().map(|&x| student_t_ln_pdf(x, nu)).sum::<f64>();
    }
    if !ll.is_finite() {
        return Err(Error::Numeric(format!("t copula log-likelihood is not finite at nu={nu}")));
    }
    Ok((ll, sigma))
}

/// Maximum-likelihood t copula: log-spaced grid over `ν` then
/// golden-section refinement around the best grid point.
pub fn fit_student_t(u: &DMatrix<f64>) -> Result<CopulaModel> {
    check_rows(u)?;
    let first = u.row(0).clone_owned();
    if (1..u.nrows()).all(|i| u.row(i) == first) {
        return Err(Error::Fit("t copula likelihood is degenerate: all rows are identical".into()));
    }
    let mut unique: Vec<u64> = u.iter().map(|p| p.to_bits()).collect();
    unique.sort_unstable();
    unique.dedup();

    let (lmin, lmax) = (NU_MIN.ln(), NU_MAX.ln());
    let grid: Vec<f64> = (0..NU_GRID)
        .map(|i| (lmin + (lmax - lmin) * i as f64 / (NU_GRID - 1) as f64).exp())
        .collect();
    let lls: Vec<f64> = grid
        .par_iter()
        .map(|&nu| profile(u, &unique, nu).map(|p| p.0))
        .collect::<Result<_>>()?;
    let best = (0..NU_GRID).max_by(|&a, &b| lls[a].total_cmp(&lls[b])).expect("grid");

    let mut evaluated: Vec<(f64, f64)> = grid.iter().copied().zip(lls.iter().copied()).collect();
    let mut a = grid[best.saturating_sub(1)].ln();
    let mut b = grid[(best + 1).min(NU_GRID - 1)].ln();
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = profile(u, &unique, x1.exp())?.0;
    let mut f2 = profile(u, &unique, x2.exp())?.0;
    evaluated.push((x1.exp(), f1));
    evaluated.push((x2.exp(), f2));
    while b.exp() - a.exp() >= NU_REL_TOL * (0.5 * (a + b)).exp() {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = profile(u, &unique, x1.exp())?.0;
            evaluated.push((x1.exp(), f1));
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = profile(u, &unique, x2.exp())?.0;
            evaluated.push((x2.exp(), f2));
        }
    }
    let (nu, _) = evaluated
        .into_iter()
        .max_by(|p, q| p.1.total_cmp(&q.1))
        .expect("nonempty");
    let nu = nu.clamp(NU_MIN, NU_MAX);
    let (_, sigma) = profile(u, &unique, nu)?;
    CopulaModel::student_t(sigma, nu)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfEstimate {
    pub value: f64,
    pub std_error: f64,
}

const PRIMES: [u32; 64] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103,
    107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223,
    227, 229, 233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307, 311,
];

/// Conditional-sampling integrand for `P(X ≤ b)` with `X ~ N(0, L Lᵀ)`,
/// driven by `w ∈ [0,1)^{K-1}`.
fn genz_integrand(lower: &DMatrix<f64>, b: &[f64], w: &[f64], y: &mut [f64]) -> f64 {
    let k = b.len();
    let mut prob = 1.0;
    for i in 0..k {
        let mut shift = 0.0;
        for (j, yj) in y.iter().enumerate().take(i) {
            shift += lower[(i, j)] * yj;
        }
        let e = std_normal_cdf((b[i] - shift) / lower[(i, i)]);
        prob *= e;
        if prob == 0.0 {
            return 0.0;
        }
        if i + 1 < k {
            let p = (w[i] * e).clamp(1e-300, 1.0 - 1e-16);
            y[i] = std_normal_inv(p).expect("clamped into (0,1)");
        }
    }
    prob
}

/// Copula CDF at `u`. Exact for the independence copula; otherwise a
/// randomized lattice rule with `2^14` points.
pub fn copula_cdf(model: &CopulaModel, u: &[f64]) -> Result<CdfEstimate> {
    model.check_u(u)?;
    if model.kind == CopulaKind::Independence || model.dim == 1 {
        return Ok(CdfEstimate {
            value: u.iter().product(),
            std_error: 0.0,
        });
    }
    let sigma = model.sigma.as_ref().expect("kind-consistent");
    let lower = sigma.cholesky_lower();
    let b = model.transform(u)?;
    let k = model.dim;
    let extra = usize::from(model.nu.is_some());
    let dims = k - 1 + extra;
    if dims > PRIMES.len() {
        return Err(Error::Contract(format!("copula_cdf supports K <= {}", PRIMES.len())));
    }
    let alphas: Vec<f64> = PRIMES[..dims].iter().map(|&p| f64::from(p).sqrt().fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let per_shift = QMC_POINTS / QMC_SHIFTS;
    let mut means = Vec::with_capacity(QMC_SHIFTS);
    let mut w = vec![0.0; dims];
    let mut y = vec![0.0; k];
    let mut scaled = vec![0.0; k];
    for _ in 0..QMC_SHIFTS {
        let shift: Vec<f64> = (0..dims).map(|_| rng.random::<f64>()).collect();
        let mut acc = 0.0;
        for n in 1..=per_shift {
            for d in 0..dims {
                // baker's transform of the shifted lattice point
                let x = (n as f64 * alphas[d] + shift[d]).fract();
                w[d] = 1.0 - (2.0 * x - 1.0).abs();
            }
            acc += match model.nu {
                None => genz_integrand(lower, &b, &w, &mut y),
                Some(nu) => {
                    let p = w[dims - 1].clamp(1e-12, 1.0 - 1e-12);
                    let s = (chi2_inv(p, nu)? / nu).sqrt();
                    for (o, bi) in scaled.iter_mut().zip(&b) {
                        *o = bi * s;
                    }
                    genz_integrand(lower, &scaled, &w[..k - 1], &mut y)
                }
            };
        }
        means.push(acc / per_shift as f64);
    }
    let r = QMC_SHIFTS as f64;
    let value = means.iter().sum::<f64>() / r;
    let var = means.iter().map(|m| (m - value).powi(2)).sum::<f64>() / (r - 1.0);
    Ok(CdfEstimate {
        value,
        std_error: (var / r).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{ChiSquared, Distribution, StandardNormal};

    fn corr2(rho: f64) -> CorrelationMatrix {
        CorrelationMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])).unwrap()
    }

    /// Rank-based pseudo-observations of each column.
    fn pseudo_obs(x: &DMatrix<f64>) -> DMatrix<f64> {
        let (m, k) = x.shape();
        let mut u = DMatrix::zeros(m, k);
        for j in 0..k {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]));
            for (r, &i) in idx.iter().enumerate() {
                u[(i, j)] = (r + 1) as f64 / (m + 1) as f64;
            }
        }
        u
    }

    #[test]
    fn gaussian_fit_independent_and_comonotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = DMatrix::from_fn(10_000, 3, |_, _| rng.random_range(1e-9..1.0 - 1e-9));
        let m = fit_gaussian(&u).unwrap();
        let s = m.sigma().unwrap();
        assert!(s.get(0, 1).abs() < 0.05 && s.get(0, 2).abs() < 0.05 && s.get(1, 2).abs() < 0.05);

        let col: Vec<f64> = (0..50).map(|_| rng.random_range(0.01..0.99)).collect();
        let u = DMatrix::from_fn(50, 2, |i, _| col[i]);
        assert!((fit_gaussian(&u).unwrap().sigma().unwrap().get(0, 1) - 1.0).abs() < 1e-5);

        let u = DMatrix::from_fn(10, 1, |i, _| (i + 1) as f64 / 11.0);
        let m = fit_gaussian(&u).unwrap();
        assert_eq!(m.sigma().unwrap().get(0, 0), 1.0);
        assert!((copula_cdf(&m, &[0.3]).unwrap().value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let u = DMatrix::from_element(10, 2, 0.5);
        assert!(matches!(fit_student_t(&u), Err(Error::Fit(_))));
        let mut bad = DMatrix::from_fn(10, 2, |i, _| (i + 1) as f64 / 11.0);
        bad[(0, 0)] = 1.0;
        assert!(matches!(fit_gaussian(&bad), Err(Error::Contract(_))));
        assert!(fit_gaussian(&DMatrix::from_element(3, 2, 0.5)).is_err());
    }

    #[test]
    fn rank_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(300, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut y = x.clone();
        for i in 0..300 {
            y[(i, 0)] = x[(i, 0)].exp();
            y[(i, 2)] = 3.0 * x[(i, 2)] + x[(i, 2)].powi(3);
        }
        let a = fit_gaussian(&pseudo_obs(&x)).unwrap();
        let b = fit_gaussian(&pseudo_obs(&y)).unwrap();
        assert_eq!(a.sigma(), b.sigma());
    }

    #[test]
    fn student_t_recovers_moderate_nu() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sigma = corr2(0.5);
        let l = sigma.cholesky_lower().clone();
        let chi = ChiSquared::new(8.0).unwrap();
        let x = DMatrix::from_fn(3000, 2, |_, _| 0.0);
        let mut x = x;
        for i in 0..3000 {
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let w = (chi.sample(&mut rng) / 8.0f64).sqrt();
            for a in 0..2 {
                x[(i, a)] = (0..=a).map(|b| l[(a, b)] * z[b]).sum::<f64>() / w;
            }
        }
        let m = fit_student_t(&pseudo_obs(&x)).unwrap();
        let nu = m.nu().unwrap();
        assert!((4.0..20.0).contains(&nu), "nu={nu}");
        assert!((m.sigma().unwrap().get(0, 1) - 0.5).abs() < 0.06);
    }

    #[test]
    fn cdf_reductions() {
        let ind = CopulaModel::independence(2);
        assert_eq!(copula_cdf(&ind, &[0.5, 0.5]).unwrap().value, 0.25);
        let g = CopulaModel::gaussian(CorrelationMatrix::identity(3));
        let e = copula_cdf(&g, &[0.3, 0.6, 0.8]).unwrap();
        assert!((e.value - 0.144).abs() < 1e-3, "{e:?}");
        let g = CopulaModel::gaussian(corr2(0.5));
        let e = copula_cdf(&g, &[0.5, 0.5]).unwrap();
        let exact = 0.25 + 0.5f64.asin() / (2.0 * std::f64::consts::PI);
        assert!((e.value - exact).abs() < 1e-3, "{e:?}");
        assert!(e.std_error < 1e-3);
        assert!(copula_cdf(&g, &[0.0, 0.5]).is_err());
    }

    #[test]
    fn t_cdf_matches_monte_carlo() {
        let m = CopulaModel::student_t(corr2(0.3), 4.0).unwrap();
        let u = [0.2, 0.7];
        let e = copula_cdf(&m, &u).unwrap();
        let b = m.transform(&u).unwrap();
        let l = m.sigma().unwrap().cholesky_lower().clone();
        let chi = ChiSquared::new(4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400_000;
        let mut hit = 0usize;
        for _ in 0..n {
            let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let w = (chi.sample(&mut rng) / 4.0f64).sqrt();
            let x0 = l[(0, 0)] * z[0] / w;
            let x1 = (l[(1, 0)] * z[0] + l[(1, 1)] * z[1]) / w;
            hit += usize::from(x0 <= b[0] && x1 <= b[1]);
        }
        let mc = hit as f64 / n as f64;
        assert!((e.value - mc).abs() < 3e-3, "qmc {} vs mc {mc}", e.value);
    }

    #[test]
    fn copula_axioms() {
        let m = CopulaModel::student_t(
            CorrelationMatrix::new(DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.2, 0.4, 1.0, 0.3, 0.2, 0.3, 1.0]))
                .unwrap(),
            6.0,
        )
        .unwrap();
        let g = CopulaModel::gaussian(m.sigma().unwrap().clone());
        for model in [&m, &g] {
            let near_one = 1.0 - 1e-4;
            let e = copula_cdf(model, &[near_one, 0.37, near_one]).unwrap();
            assert!((e.value - 0.37).abs() < 5e-3, "{e:?}");
            assert!(copula_cdf(model, &[1e-9, 0.5, 0.5]).unwrap().value < 1e-6);
            let mut prev = 0.0;
            for v in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let c = copula_cdf(model, &[0.6, v, 0.4]).unwrap().value;
                assert!(c >= prev);
                prev = c;
            }
        }
    }

    #[test]
    fn serde_kind_consistency() {
        let m = CopulaModel::student_t(corr2(0.2), 12.0).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"K\":2"));
        assert_eq!(serde_json::from_str::<CopulaModel>(&json).unwrap(), m);
        let gauss_with_nu = json.replace("student_t", "gaussian");
        assert!(serde_json::from_str::<CopulaModel>(&gauss_with_nu).is_err());
        let bad_nu = json.replace("12.0", "500.0");
        assert!(serde_json::from_str::<CopulaModel>(&bad_nu).is_err());
    }
}
