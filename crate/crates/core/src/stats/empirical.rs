use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Empirical distribution of a sample, kept sorted ascending.
///
/// Evaluation uses the pseudo-observation convention `rank / (m + 1)`, so
/// the result always lies strictly inside `(0, 1)` and can be pushed through
/// a normal or t quantile function without producing infinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmpiricalDistribution {
    sorted: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empirical distribution needs at least one sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("empirical distribution samples must be finite".into()));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { sorted: samples })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// Number of samples `<= x`.
    pub fn rank(&self, x: f64) -> usize {
        self.sorted.partition_point(|&s| s <= x)
    }

    /// `rank(x) / (m + 1)`, clamped to `[1/(m+1), m/(m+1)]`.
    pub fn evaluate(&self, x: f64) -> f64 {
        let m = self.sorted.len();
        let r = self.rank(x).clamp(1, m);
        r as f64 / (m + 1) as f64
    }

    pub fn quantile(&self, p: f64) -> f64 {
        empirical_quantile(&self.sorted, p)
    }
}

impl TryFrom<Vec<f64>> for EmpiricalDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        if v.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Contract("serialized EDF samples are not sorted".into()));
        }
        Self::new(v)
    }
}

impl From<EmpiricalDistribution> for Vec<f64> {
    fn from(d: EmpiricalDistribution) -> Self {
        d.sorted
    }
}

/// Linearly interpolated quantile of a sorted sample (the `(m - 1) p`
/// positioning rule). `p` is clamped to `[0, 1]`.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let p = p.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}
