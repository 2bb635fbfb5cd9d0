//! Split conformal prediction and jointly valid multi-step adjustments.
//!
//! Calibration scores are split in half. The first half gives per-step
//! score distributions, the second half checks joint coverage. Per-step
//! levels are handled as ranks into the sorted first-half scores, so the
//! adjustment at rank `k` is the `k`-th smallest score and rank `n1 + 1`
//! is the `+inf` sentinel.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::forecaster::QuantileRange;
use crate::series::TargetSpec;

pub const CONFORMAL_FORMAT: &str = "cocai-conformal/1";

const BISECTION_TOL: f64 = 1e-4;
const MAX_SWEEPS: usize = 50;
const SWEEP_REL_TOL: f64 = 1e-3;

/// CQR score per step: negative inside the band, zero on a bound.
pub fn ncf_cqr(lower: &[f64], upper: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if lower.len() != upper.len() || lower.len() != y.len() {
        return Err(Error::Contract(format!(
            "ncf shapes differ: lower {}, upper {}, y {}",
            lower.len(),
            upper.len(),
            y.len()
        )));
    }
    Ok(lower
        .iter()
        .zip(upper)
        .zip(y)
        .map(|((l, u), v)| (l - v).max(v - u))
        .collect())
}

/// Rank `ceil((n+1)(1-alpha))`, at least 1. A tiny guard keeps exact
/// products such as `10 * 0.9` from rounding up.
fn conformal_rank(n: usize, alpha: f64) -> usize {
    (((n as f64 + 1.0) * (1.0 - alpha) - 1e-10).ceil() as usize).max(1)
}

/// The `ceil((n+1)(1-alpha))`-th smallest score, or `+inf` when that rank
/// exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("conformal quantile of an empty score set".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha must be in (0,1), got {alpha}")));
    }
    let rank = conformal_rank(scores.len(), alpha);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

/// Calibration scores for one channel, `n_cal × t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonconformityScores {
    scores: DMatrix<f64>,
}

impl NonconformityScores {
    pub fn new(scores: DMatrix<f64>) -> Result<Self> {
        if scores.nrows() == 0 || scores.ncols() == 0 {
            return Err(Error::Contract("score matrix must be nonempty".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("nonconformity scores must be finite".into()));
        }
        Ok(Self { scores })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Contract("score rows have different lengths".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), t, |i, j| rows[i][j]))
    }

    pub fn n_cal(&self) -> usize {
        self.scores.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.scores.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.scores
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    UniformLevel,
    BoundedCopula,
}

impl FromStr for CalibrationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_level" => Ok(Self::UniformLevel),
            "bounded_copula" => Ok(Self::BoundedCopula),
            other => Err(Error::config(
                "method",
                format!("unknown method `{other}` (expected uniform_level or bounded_copula)"),
            )),
        }
    }
}

/// Per-step symmetric adjustments for one (channel, group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalModel {
    pub format: String,
    pub alpha: f64,
    pub channel: usize,
    pub group: Option<String>,
    pub method: CalibrationMethod,
    #[serde(with = "extended_reals")]
    pub epsilon: Vec<f64>,
    /// Per-step levels `u_τ` of the first-half score distributions.
    pub levels: Vec<f64>,
    /// Joint coverage on the validation half.
    pub achieved_coverage: f64,
    pub calib_size: usize,
    pub seed: u64,
    /// Set when no finite adjustment reaches the target coverage.
    pub infeasible: bool,
}

impl ConformalModel {
    pub fn horizon(&self) -> usize {
        self.epsilon.len()
    }

    pub fn total_adjustment(&self) -> f64 {
        self.epsilon.iter().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format != CONFORMAL_FORMAT {
            return Err(Error::Schema(format!(
                "conformal model format `{}` is not supported (expected `{CONFORMAL_FORMAT}`)",
                m.format
            )));
        }
        Ok(m)
    }
}

/// JSON has no infinities; the sentinel is written as the string `"inf"`.
mod extended_reals {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let reprs: Vec<Repr> = v
            .iter()
            .map(|x| {
                if x.is_finite() {
                    Repr::Finite(*x)
                } else if *x > 0.0 {
                    Repr::Tag("inf".into())
                } else {
                    Repr::Tag("-inf".into())
                }
            })
            .collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        use serde::de::Error as _;
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Repr::Finite(x) => Ok(x),
                Repr::Tag(t) if t == "inf" => Ok(f64::INFINITY),
                Repr::Tag(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
                Repr::Tag(t) => Err(D::Error::custom(format!("invalid adjustment `{t}`"))),
            })
            .collect()
    }
}

/// Sorted first-half scores per step plus the validation half.
struct Halves {
    sorted: Vec<Vec<f64>>,
    /// rank of each first-half score within its step, for in-sample counts
    ranks: Vec<Vec<usize>>,
    val: Vec<Vec<f64>>,
    n1: usize,
}

impl Halves {
    fn new(scores: &DMatrix<f64>, seed: u64) -> Self {
        let n = scores.nrows();
        let t = scores.ncols();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n1 = n / 2;
        let (first, second) = order.split_at(n1);
        let mut sorted: Vec<Vec<f64>> = (0..t)
            .map(|j| first.iter().map(|&i| scores[(i, j)]).collect())
            .collect();
        for col in &mut sorted {
            col.sort_by(f64::total_cmp);
        }
        // covered at rank k  <=>  s <= sorted[k-1]  <=>  #{x < s} + 1 <= k
        let ranks = first
            .iter()
            .map(|&i| {
                (0..t)
                    .map(|j| sorted[j].partition_point(|x| *x < scores[(i, j)]) + 1)
                    .collect()
            })
            .collect();
        let val = second
            .iter()
            .map(|&i| (0..t).map(|j| scores[(i, j)]).collect())
            .collect();
        Self { sorted, ranks, val, n1 }
    }

    fn eps(&self, ranks: &[usize]) -> Vec<f64> {
        ranks
            .iter()
            .zip(&self.sorted)
            .map(|(&k, col)| if k > self.n1 { f64::INFINITY } else { col[k - 1] })
            .collect()
    }

    fn val_count(&self, eps: &[f64]) -> usize {
        self.val
            .iter()
            .filter(|row| row.iter().zip(eps).all(|(s, e)| s <= e))
            .count()
    }

    fn uniform_ranks(&self, u: f64) -> Vec<usize> {
        let k = (((self.n1 as f64 + 1.0) * u).ceil() as usize).clamp(1, self.n1 + 1);
        vec![k; self.sorted.len()]
    }
}

fn sum_eps(eps: &[f64]) -> f64 {
    eps.iter().sum()
}

/// Bisection on a shared level `u`.
fn uniform_solution(h: &Halves, need: usize) -> Vec<usize> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if h.val_count(&h.eps(&h.uniform_ranks(mid))) >= need {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let ranks = h.uniform_ranks(hi);
    // the step map can land one rank short of the feasible boundary
    if h.val_count(&h.eps(&ranks)) >= need {
        ranks
    } else {
        vec![h.n1 + 1; ranks.len()]
    }
}

/// Coordinate descent on the first half, in-sample, followed by a single
/// rank shift validated on the second half.
fn bounded_solution(h: &Halves, alpha: f64, need: usize) -> Vec<usize> {
    let t = h.sorted.len();
    let n1 = h.n1;
    let lower = (((n1 as f64 + 1.0) * alpha / (2.0 * t as f64)).ceil() as usize).max(1);
    let need1 = conformal_rank(n1, alpha).min(n1);

    let count_uniform = |k: usize| h.ranks.iter().filter(|r| r.iter().all(|&x| x <= k)).count();
    let k0 = (lower..=n1).find(|&k| count_uniform(k) >= need1).unwrap_or(n1);
    let mut ranks = vec![k0; t];
    let mut violations: Vec<usize> = h
        .ranks
        .iter()
        .map(|r| r.iter().zip(&ranks).filter(|(x, k)| x > k).count())
        .collect();
    let mut covered = violations.iter().filter(|&&v| v == 0).count();

    for _ in 0..MAX_SWEEPS {
        let before = sum_eps(&h.eps(&ranks));
        for j in 0..t {
            if ranks[j] <= lower {
                continue;
            }
            let k = ranks[j];
            let hit: Vec<usize> = (0..h.ranks.len()).filter(|&i| h.ranks[i][j] == k).collect();
            let lost = hit.iter().filter(|&&i| violations[i] == 0).count();
            if covered - lost >= need1 {
                for &i in &hit {
                    violations[i] += 1;
                }
                covered -= lost;
                ranks[j] -= 1;
            }
        }
        let after = sum_eps(&h.eps(&ranks));
        if before.abs() == 0.0 || (before - after) / before.abs() < SWEEP_REL_TOL {
            break;
        }
    }

    // Smallest shift s with the shifted ranks valid on the second half;
    // shift n1 + 1 clips every rank to the sentinel and always passes.
    let shifted = |s: i64| -> Vec<usize> {
        ranks
            .iter()
            .map(|&k| (k as i64 + s).clamp(lower as i64, n1 as i64 + 1) as usize)
            .collect()
    };
    let (mut lo, mut hi) = (-(n1 as i64) - 1, n1 as i64 + 1);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if h.val_count(&h.eps(&shifted(mid))) >= need {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    shifted(hi)
}

/// Jointly valid per-step adjustments from `n_cal × t` calibration scores.
pub fn calibrate_copula_cpts(
    scores: &NonconformityScores,
    alpha: f64,
    split_seed: u64,
    method: CalibrationMethod,
) -> Result<ConformalModel> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha must be in (0,1), got {alpha}")));
    }
    let n = scores.n_cal();
    let t = scores.horizon();
    if (n as f64) < 2.0 / alpha {
        return Err(Error::Calibration(format!(
            "{n} calibration series are too few for alpha={alpha} (need at least {})",
            (2.0 / alpha).ceil()
        )));
    }
    let model = |epsilon: Vec<f64>, levels: Vec<f64>, achieved: f64, infeasible: bool| ConformalModel {
        format: CONFORMAL_FORMAT.to_string(),
        alpha,
        channel: 0,
        group: None,
        method,
        epsilon,
        levels,
        achieved_coverage: achieved,
        calib_size: n,
        seed: split_seed,
        infeasible,
    };

    if t == 1 {
        let col: Vec<f64> = scores.matrix().column(0).iter().copied().collect();
        let eps = conformal_quantile(&col, alpha)?;
        let covered = col.iter().filter(|s| **s <= eps).count();
        let level = (conformal_rank(n, alpha) as f64 / (n as f64 + 1.0)).min(1.0);
        return Ok(model(vec![eps], vec![level], covered as f64 / n as f64, eps.is_infinite()));
    }

    let h = Halves::new(scores.matrix(), split_seed);
    let n2 = h.val.len();
    let need = conformal_rank(n2, alpha);
    let max_finite = vec![h.n1; t];
    if need > n2 || h.val_count(&h.eps(&max_finite)) < need {
        log::warn!(
            "no finite adjustment reaches coverage {:.3} with {n} calibration series; using the +inf sentinel",
            1.0 - alpha
        );
        let ranks = vec![h.n1 + 1; t];
        return Ok(model(h.eps(&ranks), vec![1.0; t], 1.0, true));
    }

    let uniform = uniform_solution(&h, need);
    let ranks = match method {
        CalibrationMethod::UniformLevel => uniform,
        CalibrationMethod::BoundedCopula => {
            let bounded = bounded_solution(&h, alpha, need);
            if sum_eps(&h.eps(&bounded)) <= sum_eps(&h.eps(&uniform)) {
                bounded
            } else {
                uniform
            }
        }
    };
    let eps = h.eps(&ranks);
    let achieved = h.val_count(&eps) as f64 / n2 as f64;
    let levels = ranks.iter().map(|&k| k as f64 / (h.n1 as f64 + 1.0)).collect();
    let infeasible = eps.iter().any(|e| e.is_infinite());
    Ok(model(eps, levels, achieved, infeasible))
}

/// Conformalized bounds for one target channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalizedRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConformalizedRegion {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn covers(&self, y: &[f64]) -> bool {
        y.len() == self.len() && y.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }
}

/// `[q_l - ε, q_u + ε]` for the model's channel.
pub fn conformalize(range: &QuantileRange, spec: &TargetSpec, model: &ConformalModel) -> Result<ConformalizedRegion> {
    let pos = spec.position(model.channel).ok_or_else(|| {
        Error::Contract(format!(
            "conformal model channel {} is not in the target channels {:?}",
            model.channel, spec.channels
        ))
    })?;
    if range.len() != model.horizon() {
        return Err(Error::Contract(format!(
            "quantile range horizon {} does not match model horizon {}",
            range.len(),
            model.horizon()
        )));
    }
    let (lo, hi) = range.channel(pos);
    Ok(ConformalizedRegion {
        lower: lo.iter().zip(&model.epsilon).map(|(l, e)| l - e).collect(),
        upper: hi.iter().zip(&model.epsilon).map(|(u, e)| u + e).collect(),
    })
}

/// Fraction of series whose target lies inside its region at every step.
pub fn joint_coverage(regions: &[ConformalizedRegion], targets: &[Vec<f64>]) -> Result<f64> {
    if regions.is_empty() || regions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "joint coverage needs equal nonempty lists, got {} regions and {} targets",
            regions.len(),
            targets.len()
        )));
    }
    let mut inside = 0usize;
    for (r, y) in regions.iter().zip(targets) {
        if r.len() != y.len() {
            return Err(Error::Contract("region and target lengths differ".into()));
        }
        inside += usize::from(r.covers(y));
    }
    Ok(inside as f64 / regions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_scores(n: usize, t: usize, rho: f64, seed: u64) -> NonconformityScores {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 - rho * rho).sqrt();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut prev: f64 = rng.sample(StandardNormal);
                (0..t)
                    .map(|j| {
                        if j > 0 {
                            prev = rho * prev + s * rng.sample::<f64, _>(StandardNormal);
                        }
                        prev
                    })
                    .collect()
            })
            .collect();
        NonconformityScores::from_rows(&rows).unwrap()
    }

    #[test]
    fn cqr_scores() {
        assert_eq!(ncf_cqr(&[0.0], &[1.0], &[0.0]).unwrap(), vec![0.0]);
        assert!((ncf_cqr(&[0.0], &[1.0], &[1.3]).unwrap()[0] - 0.3).abs() < 1e-15);
        assert_eq!(ncf_cqr(&[0.0], &[1.0], &[0.5]).unwrap(), vec![-0.5]);
        assert!(ncf_cqr(&[0.0], &[1.0, 2.0], &[0.5]).is_err());
    }

    #[test]
    fn conformal_quantile_order_statistics() {
        let s: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(conformal_quantile(&s, 0.1).unwrap(), 9.0);
        assert_eq!(conformal_quantile(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert_eq!(conformal_quantile(&[1.0], 0.1).unwrap(), f64::INFINITY);
        assert!(conformal_quantile(&[], 0.1).is_err());
    }

    #[test]
    fn single_step_reduces_to_split_cp() {
        let scores = gaussian_scores(137, 1, 0.0, 3);
        let col: Vec<f64> = scores.matrix().column(0).iter().copied().collect();
        let expect = conformal_quantile(&col, 0.1).unwrap();
        for m in [CalibrationMethod::UniformLevel, CalibrationMethod::BoundedCopula] {
            let model = calibrate_copula_cpts(&scores, 0.1, 9, m).unwrap();
            assert_eq!(model.epsilon[0].to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn independent_steps_follow_product_rule() {
        let scores = gaussian_scores(40_000, 2, 0.0, 21);
        let m = calibrate_copula_cpts(&scores, 0.1, 1, CalibrationMethod::UniformLevel).unwrap();
        // binomial sd of the validation count is ~0.0015 in u
        assert!((m.levels[0] - 0.9f64.sqrt()).abs() < 0.006, "{:?}", m.levels);
    }

    #[test]
    fn bounded_dominates_uniform_and_is_valid() {
        for seed in 0..5 {
            let scores = gaussian_scores(600, 12, 0.9, seed);
            let u = calibrate_copula_cpts(&scores, 0.1, seed, CalibrationMethod::UniformLevel).unwrap();
            let b = calibrate_copula_cpts(&scores, 0.1, seed, CalibrationMethod::BoundedCopula).unwrap();
            assert!(b.total_adjustment() <= u.total_adjustment());
            for m in [&u, &b] {
                assert!(m.achieved_coverage >= 0.9);
                assert!(m.achieved_coverage <= 0.9 + 0.05);
            }
        }
    }

    #[test]
    fn uniform_monotone_in_alpha() {
        let scores = gaussian_scores(400, 6, 0.8, 4);
        let mut prev: Option<Vec<f64>> = None;
        for alpha in [0.05, 0.1, 0.2, 0.3] {
            let m = calibrate_copula_cpts(&scores, alpha, 2, CalibrationMethod::UniformLevel).unwrap();
            if let Some(p) = prev {
                assert!(m.epsilon.iter().zip(&p).all(|(a, b)| a <= b));
            }
            prev = Some(m.epsilon);
        }
    }

    #[test]
    fn infeasible_returns_sentinel() {
        // scores independent across many steps with few series: no finite
        // level reaches 90% joint coverage
        let scores = gaussian_scores(40, 30, 0.0, 6);
        let m = calibrate_copula_cpts(&scores, 0.1, 0, CalibrationMethod::BoundedCopula).unwrap();
        assert!(m.infeasible);
        assert!(m.epsilon.iter().all(|e| e.is_infinite()));
        let json = m.to_json().unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(ConformalModel::from_json(&json).unwrap(), m);
    }

    #[test]
    fn too_few_series() {
        let scores = gaussian_scores(10, 3, 0.5, 0);
        assert!(matches!(
            calibrate_copula_cpts(&scores, 0.1, 0, CalibrationMethod::UniformLevel),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn conformalize_arithmetic() {
        let spec = TargetSpec::new(vec![3], 2).unwrap();
        let range = QuantileRange::new(DMatrix::zeros(2, 1), DMatrix::from_element(2, 1, 1.0), 0.1).unwrap();
        let mut m = calibrate_copula_cpts(&gaussian_scores(50, 2, 0.9, 1), 0.1, 0, CalibrationMethod::UniformLevel)
            .unwrap();
        m.channel = 3;
        m.epsilon = vec![0.0, 0.0];
        let r = conformalize(&range, &spec, &m).unwrap();
        assert_eq!((r.lower.clone(), r.upper.clone()), (vec![0.0; 2], vec![1.0; 2]));
        m.epsilon = vec![0.25, 0.25];
        let r = conformalize(&range, &spec, &m).unwrap();
        assert_eq!((r.lower.clone(), r.upper.clone()), (vec![-0.25; 2], vec![1.25; 2]));
        for (w, e) in r.widths().iter().zip(&m.epsilon) {
            assert_eq!(*w, 1.0 + 2.0 * e);
        }
        m.epsilon = vec![f64::INFINITY; 2];
        let r = conformalize(&range, &spec, &m).unwrap();
        assert!(r.covers(&[1e300, -1e300]));
        m.epsilon = vec![0.0; 3];
        assert!(conformalize(&range, &spec, &m).is_err());
        m.channel = 0;
        m.epsilon = vec![0.0; 2];
        assert!(conformalize(&range, &spec, &m).is_err());
    }

    #[test]
    fn joint_coverage_counts() {
        let r = ConformalizedRegion {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
        };
        let regions = vec![r.clone(), r];
        assert_eq!(joint_coverage(&regions, &[vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap(), 1.0);
        assert_eq!(joint_coverage(&regions, &[vec![0.5, 0.5], vec![0.1, 1.9]]).unwrap(), 0.5);
        assert!(joint_coverage(&[], &[]).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let m = calibrate_copula_cpts(&gaussian_scores(200, 5, 0.9, 2), 0.1, 3, CalibrationMethod::BoundedCopula)
            .unwrap();
        let json = m.to_json().unwrap();
        assert_eq!(ConformalModel::from_json(&json).unwrap(), m);
        assert!(ConformalModel::from_json(&json.replace(CONFORMAL_FORMAT, "x")).is_err());
    }
}
