//! Clamped uniform cubic B-spline bases on an integer grid, least-squares
//! coefficient fits and elbow selection of the basis count.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;
/// Default relative-improvement threshold of the elbow rule.
pub const DEFAULT_RHO: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct BSplineBasis {
    k: usize,
    t: usize,
    knots: Vec<f64>,
    design: DMatrix<f64>,
    q_t: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl PartialEq for BSplineBasis {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k && self.t == other.t && self.knots == other.knots
    }
}

fn clamped_knots(k: usize, t: usize) -> Vec<f64> {
    let end = (t - 1) as f64;
    let intervals = k - DEGREE;
    let mut knots = vec![0.0; DEGREE + 1];
    for i in 1..intervals {
        knots.push(end * i as f64 / intervals as f64);
    }
    knots.extend(std::iter::repeat_n(end, DEGREE + 1));
    knots
}

/// Nonzero basis values at `x`: returns the first index and the
/// `DEGREE + 1` values of basis functions `first..=first+DEGREE`.
fn basis_at(knots: &[f64], k: usize, x: f64) -> (usize, [f64; DEGREE + 1]) {
    let p = DEGREE;
    // knot span: knots[span] <= x < knots[span+1], clamped at the right end
    let span = if x >= knots[k] {
        k - 1
    } else {
        let mut s = p;
        while s < k - 1 && x >= knots[s + 1] {
            s += 1;
        }
        s
    };
    let mut n = [0.0; DEGREE + 1];
    let mut left = [0.0; DEGREE + 1];
    let mut right = [0.0; DEGREE + 1];
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (span - p, n)
}

impl BSplineBasis {
    pub fn new(k: usize, t: usize) -> Result<Self> {
        if k < DEGREE + 1 || k > t {
            return Err(Error::Contract(format!("basis count K={k} must satisfy 4 <= K <= t={t}")));
        }
        let knots = clamped_knots(k, t);
        let mut design = DMatrix::zeros(t, k);
        for tau in 0..t {
            let (first, vals) = basis_at(&knots, k, tau as f64);
            for (i, v) in vals.iter().enumerate() {
                design[(tau, first + i)] = *v;
            }
        }
        let qr = design.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * scale) {
            return Err(Error::Numeric(format!("B-spline design K={k}, t={t} is rank deficient")));
        }
        let q_t = qr.q().transpose();
        Ok(Self {
            k,
            t,
            knots,
            design,
            q_t,
            r,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `t × K` evaluation matrix.
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Indices of basis functions that are nonzero at grid step `tau`.
    pub fn support_at(&self, tau: usize) -> Vec<usize> {
        (0..self.k).filter(|&j| self.design[(tau, j)] != 0.0).collect()
    }

    pub fn fit(&self, delta: &[f64]) -> Result<CoefficientVector> {
        if delta.len() != self.t {
            return Err(Error::Contract(format!(
                "series length {} does not match basis length {}",
                delta.len(),
                self.t
            )));
        }
        let y = DVector::from_column_slice(delta);
        let qty = &self.q_t * &y;
        let beta = self
            .r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
        let resid = &self.design * &beta - &y;
        let beta: Vec<f64> = beta.iter().copied().collect();
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("non-finite spline coefficients".into()));
        }
        Ok(CoefficientVector {
            beta,
            rss: resid.norm_squared(),
        })
    }

    /// `Φ β` on the grid.
    pub fn reconstruct(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.k {
            return Err(Error::Contract(format!("{} coefficients for K={}", beta.len(), self.k)));
        }
        Ok((&self.design * DVector::from_column_slice(beta)).iter().copied().collect())
    }
}

pub fn build_basis(k: usize, t: usize) -> Result<BSplineBasis> {
    BSplineBasis::new(k, t)
}

pub fn fit_coefficients(basis: &BSplineBasis, delta: &[f64]) -> Result<CoefficientVector> {
    basis.fit(delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub beta: Vec<f64>,
    pub rss: f64,
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    k: usize,
    t: usize,
    degree: usize,
    knots: Vec<f64>,
}

impl Serialize for BSplineBasis {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BasisRepr {
            k: self.k,
            t: self.t,
            degree: DEGREE,
            knots: self.knots.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BSplineBasis {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = BasisRepr::deserialize(d)?;
        if repr.degree != DEGREE {
            return Err(D::Error::custom(format!("unsupported spline degree {}", repr.degree)));
        }
        let basis = BSplineBasis::new(repr.k, repr.t).map_err(D::Error::custom)?;
        if basis.knots != repr.knots {
            return Err(D::Error::custom("knot vector does not match a clamped uniform basis"));
        }
        Ok(basis)
    }
}

/// Total RSS per candidate and the selected basis count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub k_star: usize,
    pub curve: Vec<(usize, f64)>,
}

impl ElbowCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "K,total_rss")?;
        for (k, rss) in &self.curve {
            writeln!(w, "{k},{rss}")?;
        }
        Ok(())
    }
}

/// Candidate counts whose knot sets are nested (interval counts 1, 2, 4, …),
/// capped at `max(4, t / 3)`.
pub fn nested_candidates(t: usize) -> Vec<usize> {
    let cap = (t / 3).max(DEGREE + 1).min(t);
    let mut out = Vec::new();
    let mut intervals = 1;
    while intervals + DEGREE <= cap {
        out.push(intervals + DEGREE);
        intervals *= 2;
    }
    out
}

/// Total RSS over `deltas` for each candidate, then the elbow: the first
/// candidate after which the relative improvement drops below `rho`.
/// If the curve never flattens the largest candidate is taken.
pub fn select_k(deltas: &[Vec<f64>], candidates: &[usize], rho: f64) -> Result<ElbowCurve> {
    if deltas.is_empty() || candidates.is_empty() {
        return Err(Error::Contract("select_k needs at least one series and one candidate".into()));
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(format!("candidates must be strictly ascending: {candidates:?}")));
    }
    let t = deltas[0].len();
    let energy: f64 = deltas.iter().flatten().map(|d| d * d).sum();
    let mut curve = Vec::with_capacity(candidates.len());
    for &k in candidates {
        let basis = BSplineBasis::new(k, t)?;
        let rss: Vec<f64> = deltas
            .par_iter()
            .map(|d| basis.fit(d).map(|c| c.rss))
            .collect::<Result<_>>()?;
        curve.push((k, rss.iter().sum::<f64>()));
    }
    let floor = 1e-12 * energy.max(f64::MIN_POSITIVE);
    let mut k_star = curve.last().expect("nonempty").0;
    for w in curve.windows(2) {
        let (prev, next) = (w[0].1, w[1].1);
        let improvement = if prev <= floor { 0.0 } else { (prev - next) / prev };
        if improvement < rho {
            k_star = w[0].0;
            break;
        }
    }
    Ok(ElbowCurve { k_star, curve })
}
