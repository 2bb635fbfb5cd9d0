//! Distance series, anomaly-model calibration and deployment scoring.
//!
//! A target is mapped to its relative position inside the conformalized
//! interval, compressed to B-spline coefficients, pushed through
//! per-coefficient EDFs and scored by the squared Mahalanobis distance
//! under a Gaussian and a Student-t copula.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformalize, ConformalModel, ConformalizedRegion};
use crate::copula::{fit_gaussian, fit_student_t, CopulaModel};
use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::series::{extract_target, MultivariateSeries, TargetSpec};
use crate::splines::{nested_candidates, select_k, BSplineBasis, ElbowCurve, DEFAULT_RHO};
use crate::stats::EmpiricalDistribution;

pub const ANOMALY_FORMAT_VERSION: u32 = 1;
/// Widths at or below this are rejected as degenerate.
pub const DEGENERATE_WIDTH: f64 = 1e-9;
pub const DEFAULT_MIN_WIDTH: f64 = 1e-6;
pub const DEFAULT_THRESHOLD: f64 = 0.9;

/// `δ_τ = d_τ / w_τ + 0.5` with `d_τ = max(l_τ − y_τ, y_τ − u_τ)`:
/// zero at the midpoint, one half on a bound, above one half outside.
pub fn distance_series(region: &ConformalizedRegion, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != region.len() {
        return Err(Error::Contract(format!(
            "target length {} does not match region length {}",
            y.len(),
            region.len()
        )));
    }
    let widths = region.widths();
    if widths.iter().any(|w| w.is_infinite()) {
        return Err(Error::Calibration(
            "unbounded conformal interval: the conformal model is infeasible".into(),
        ));
    }
    let bad: Vec<usize> = (0..widths.len()).filter(|&i| !(widths[i] > DEGENERATE_WIDTH)).collect();
    if !bad.is_empty() {
        return Err(Error::DegenerateInterval {
            steps: bad,
            floor: DEGENERATE_WIDTH,
        });
    }
    Ok((0..y.len())
        .map(|i| {
            let d = (region.lower[i] - y[i]).max(y[i] - region.upper[i]);
            d / widths[i] + 0.5
        })
        .collect())
}

/// Widens every interval narrower than `min_width` symmetrically about
/// its midpoint.
pub fn apply_min_width(region: &ConformalizedRegion, min_width: f64) -> ConformalizedRegion {
    let mut out = region.clone();
    for i in 0..out.len() {
        let w = out.upper[i] - out.lower[i];
        if w < min_width {
            let mid = 0.5 * (out.lower[i] + out.upper[i]);
            out.lower[i] = mid - 0.5 * min_width;
            out.upper[i] = mid + 0.5 * min_width;
        }
    }
    out
}

/// Settings for [`calibrate_anomaly`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyConfig {
    /// Candidate basis counts; `None` uses the nested default chain.
    pub k_candidates: Option<Vec<usize>>,
    /// Forces `K`, bypassing the elbow rule (the curve is still computed).
    pub k_override: Option<usize>,
    pub rho: f64,
    pub min_width: f64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            k_candidates: None,
            k_override: None,
            rho: DEFAULT_RHO,
            min_width: DEFAULT_MIN_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyModel {
    pub format_version: u32,
    pub channel: usize,
    pub group: Option<String>,
    pub basis: BSplineBasis,
    pub edfs: Vec<EmpiricalDistribution>,
    pub gaussian: CopulaModel,
    pub student_t: CopulaModel,
    pub m: usize,
    pub min_width: f64,
    pub elbow: ElbowCurve,
}

/// Intermediate vectors of one scoring pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub z_gaussian: Vec<f64>,
    pub z_student: Vec<f64>,
    pub m2_gaussian: f64,
    pub m2_student: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub series_id: String,
    pub channel: usize,
    pub group: Option<String>,
    pub a_gaussian: f64,
    pub a_student: f64,
    pub threshold: f64,
    pub flagged: bool,
    pub covered: bool,
    pub mean_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eqr_covered: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eqr_mean_width: Option<f64>,
    pub audit: Audit,
}

impl AnomalyReport {
    pub fn flagged_gaussian(&self) -> bool {
        self.a_gaussian > self.threshold
    }

    pub fn flagged_student(&self) -> bool {
        self.a_student > self.threshold
    }

    /// Same report under a different threshold; scores are not recomputed.
    pub fn rethreshold(&self, threshold: f64) -> Self {
        let mut r = self.clone();
        r.threshold = threshold;
        r.flagged = r.flagged_gaussian() || r.flagged_student();
        r
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::config("threshold", format!("must be in (0,1), got {threshold}")))
    }
}

impl AnomalyModel {
    /// Fits the model from calibration distance series.
    pub fn fit_from_deltas(
        deltas: &[Vec<f64>],
        config: &AnomalyConfig,
        channel: usize,
        group: Option<String>,
    ) -> Result<Self> {
        let m = deltas.len();
        let t = deltas
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Calibration("calibration set empty".into()))?;
        if deltas.iter().any(|d| d.len() != t) {
            return Err(Error::Contract("distance series have different lengths".into()));
        }
        let candidates = config.k_candidates.clone().unwrap_or_else(|| nested_candidates(t));
        let k_max = candidates
            .iter()
            .copied()
            .chain(config.k_override)
            .max()
            .ok_or_else(|| Error::config("k_candidates", "no candidate basis counts"))?;
        if m < k_max + 2 {
            return Err(Error::Calibration(format!(
                "{m} anomaly-calibration series are too few for K up to {k_max} (need {})",
                k_max + 2
            )));
        }
        if candidates.iter().chain(config.k_override.iter()).any(|&k| k < 4 || k > t) {
            return Err(Error::config("k_candidates", format!("values must lie in [4, {t}], got {candidates:?}")));
        }
        let elbow = select_k(deltas, &candidates, config.rho)?;
        let k = config.k_override.unwrap_or(elbow.k_star);
        let basis = BSplineBasis::new(k, t)?;
        let betas: Vec<Vec<f64>> = deltas
            .par_iter()
            .map(|d| basis.fit(d).map(|c| c.beta))
            .collect::<Result<_>>()?;
        let mut edfs = Vec::with_capacity(k);
        for j in 0..k {
            let col: Vec<f64> = betas.iter().map(|b| b[j]).collect();
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max - min <= 1e-12 * max.abs().max(1.0) {
                return Err(Error::Fit(format!(
                    "spline coefficient {j} has zero variance across {m} calibration series"
                )));
            }
            edfs.push(EmpiricalDistribution::new(col)?);
        }
        let u = DMatrix::from_fn(m, k, |i, j| edfs[j].evaluate(betas[i][j]));
        let gaussian = fit_gaussian(&u)?;
        let student_t = fit_student_t(&u)?;
        Ok(Self {
            format_version: ANOMALY_FORMAT_VERSION,
            channel,
            group,
            basis,
            edfs,
            gaussian,
            student_t,
            m,
            min_width: config.min_width,
            elbow,
        })
    }

    pub fn k(&self) -> usize {
        self.basis.k()
    }

    pub fn horizon(&self) -> usize {
        self.basis.t()
    }

    /// Scores a distance series: returns `(a_G, a_S, audit)`.
    pub fn score_delta(&self, delta: &[f64]) -> Result<(f64, f64, Audit)> {
        let beta = self.basis.fit(delta)?.beta;
        let u: Vec<f64> = beta.iter().zip(&self.edfs).map(|(b, e)| e.evaluate(*b)).collect();
        let z_gaussian = self.gaussian.transform(&u)?;
        let z_student = self.student_t.transform(&u)?;
        let m2_gaussian = self.gaussian.mahalanobis_sq(&z_gaussian)?;
        let m2_student = self.student_t.mahalanobis_sq(&z_student)?;
        let a_g = self.gaussian.m2_cdf(m2_gaussian)?.clamp(0.0, 1.0);
        let a_s = self.student_t.m2_cdf(m2_student)?.clamp(0.0, 1.0);
        Ok((
            a_g,
            a_s,
            Audit {
                delta: delta.to_vec(),
                beta,
                u,
                z_gaussian,
                z_student,
                m2_gaussian,
                m2_student,
            },
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format_version != ANOMALY_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "anomaly model format_version {} is not supported (expected {ANOMALY_FORMAT_VERSION})",
                m.format_version
            )));
        }
        if m.edfs.len() != m.basis.k() || m.gaussian.dim() != m.basis.k() || m.student_t.dim() != m.basis.k() {
            return Err(Error::Schema("anomaly model dimensions are inconsistent".into()));
        }
        Ok(m)
    }
}

/// Region and observed target of one series for one channel.
pub(crate) fn region_for(
    series: &MultivariateSeries,
    spec: &TargetSpec,
    forecaster: &dyn Forecaster,
    cp: &ConformalModel,
) -> Result<(Vec<f64>, ConformalizedRegion, (Vec<f64>, Vec<f64>))> {
    let (context, target) = extract_target(series, spec)?;
    target.require_observed()?;
    let range = forecaster.predict_quantiles(&context, cp.alpha)?;
    let region = conformalize(&range, spec, cp)?;
    let pos = spec.position(cp.channel).expect("checked by conformalize");
    Ok((target.column(pos), region, range.channel(pos)))
}

/// Calibrates an anomaly model on anomaly-free series.
pub fn calibrate_anomaly(
    ad_series: &[&MultivariateSeries],
    forecaster: &dyn Forecaster,
    cp: &ConformalModel,
    config: &AnomalyConfig,
) -> Result<AnomalyModel> {
    if ad_series.is_empty() {
        return Err(Error::Calibration("calibration set empty".into()));
    }
    let spec = forecaster.spec();
    let results: Vec<Result<Vec<f64>>> = ad_series
        .par_iter()
        .map(|s| {
            let (y, region, _) = region_for(s, spec, forecaster, cp)?;
            distance_series(&apply_min_width(&region, config.min_width), &y)
        })
        .collect();
    let mut deltas = Vec::with_capacity(results.len());
    let mut offenders = Vec::new();
    for (s, r) in ad_series.iter().zip(results) {
        match r {
            Ok(d) => deltas.push(d),
            Err(Error::DegenerateInterval { steps, .. }) => offenders.push(format!("{} {steps:?}", s.series_id())),
            Err(e) => return Err(e),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Calibration(format!(
            "degenerate intervals (width <= {DEGENERATE_WIDTH:e}) in: {}; raise --min-width",
            offenders.join(", ")
        )));
    }
    AnomalyModel::fit_from_deltas(&deltas, config, cp.channel, cp.group.clone())
}

/// Scores one target against its conformalized region.
pub fn score(
    model: &AnomalyModel,
    series_id: &str,
    region: &ConformalizedRegion,
    y: &[f64],
    threshold: f64,
) -> Result<AnomalyReport> {
    check_threshold(threshold)?;
    if y.len() != model.horizon() || region.len() != model.horizon() {
        return Err(Error::Contract(format!(
            "target length {} / region length {} do not match model horizon {}",
            y.len(),
            region.len(),
            model.horizon()
        )));
    }
    let delta = distance_series(&apply_min_width(region, model.min_width), y)?;
    let (a_g, a_s, audit) = model.score_delta(&delta)?;
    let widths = region.widths();
    Ok(AnomalyReport {
        series_id: series_id.to_string(),
        channel: model.channel,
        group: model.group.clone(),
        a_gaussian: a_g,
        a_student: a_s,
        threshold,
        flagged: a_g > threshold || a_s > threshold,
        covered: region.covers(y),
        mean_width: widths.iter().sum::<f64>() / widths.len() as f64,
        eqr_covered: None,
        eqr_mean_width: None,
        audit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub series_id: String,
    pub reason: String,
}

/// Flag counts split by whether the region covered the target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagBreakdown {
    pub flagged_inside: usize,
    pub flagged_outside: usize,
    pub unflagged_inside: usize,
    pub unflagged_outside: usize,
}

impl FlagBreakdown {
    fn add(&mut self, flagged: bool, covered: bool) {
        match (flagged, covered) {
            (true, true) => self.flagged_inside += 1,
            (true, false) => self.flagged_outside += 1,
            (false, true) => self.unflagged_inside += 1,
            (false, false) => self.unflagged_outside += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.flagged_inside + self.flagged_outside + self.unflagged_inside + self.unflagged_outside
    }

    pub fn flagged(&self) -> usize {
        self.flagged_inside + self.flagged_outside
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n_scored: usize,
    pub n_skipped: usize,
    pub threshold: f64,
    pub coverage: Option<f64>,
    pub eqr_coverage: Option<f64>,
    pub mean_width: Option<f64>,
    pub eqr_mean_width: Option<f64>,
    pub flag_rate: Option<f64>,
    /// Keyed by `gaussian`, `student_t` and `either`.
    pub breakdown: BTreeMap<String, FlagBreakdown>,
}

impl BatchSummary {
    pub fn from_reports(reports: &[AnomalyReport], n_skipped: usize, threshold: f64) -> Self {
        let n = reports.len();
        let mean = |f: &dyn Fn(&AnomalyReport) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mut breakdown = BTreeMap::new();
        let mut g = FlagBreakdown::default();
        let mut s = FlagBreakdown::default();
        let mut e = FlagBreakdown::default();
        for r in reports {
            g.add(r.a_gaussian > threshold, r.covered);
            s.add(r.a_student > threshold, r.covered);
            e.add(r.flagged, r.covered);
        }
        breakdown.insert("gaussian".to_string(), g);
        breakdown.insert("student_t".to_string(), s);
        breakdown.insert("either".to_string(), e);
        Self {
            n_scored: n,
            n_skipped,
            threshold,
            coverage: mean(&|r| Some(f64::from(u8::from(r.covered)))),
            eqr_coverage: mean(&|r| r.eqr_covered.map(|c| f64::from(u8::from(c)))),
            mean_width: mean(&|r| Some(r.mean_width)),
            eqr_mean_width: mean(&|r| r.eqr_mean_width),
            flag_rate: (n > 0).then(|| e.flagged() as f64 / n as f64),
            breakdown,
        }
    }

    /// Key/value rows followed by the flag breakdown table.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(w, "metric,value")?;
        writeln!(w, "n_scored,{}", self.n_scored)?;
        writeln!(w, "n_skipped,{}", self.n_skipped)?;
        writeln!(w, "threshold,{}", self.threshold)?;
        writeln!(w, "coverage,{}", opt(self.coverage))?;
        writeln!(w, "eqr_coverage,{}", opt(self.eqr_coverage))?;
        writeln!(w, "mean_width,{}", opt(self.mean_width))?;
        writeln!(w, "eqr_mean_width,{}", opt(self.eqr_mean_width))?;
        writeln!(w, "flag_rate,{}", opt(self.flag_rate))?;
        writeln!(w)?;
        writeln!(w, "score,flagged_inside,flagged_outside,unflagged_inside,unflagged_outside,total")?;
        for (k, b) in &self.breakdown {
            writeln!(
                w,
                "{k},{},{},{},{},{}",
                b.flagged_inside,
                b.flagged_outside,
                b.unflagged_inside,
                b.unflagged_outside,
                b.total()
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub reports: Vec<AnomalyReport>,
    pub skipped: Vec<SkipRecord>,
    pub summary: BatchSummary,
}

/// Scores many series in parallel. Per-series failures are collected as
/// skip records; reports come back sorted by series id.
pub fn batch_score(
    model: &AnomalyModel,
    series: &[&MultivariateSeries],
    forecaster: &dyn Forecaster,
    cp: &ConformalModel,
    threshold: f64,
) -> Result<BatchResult> {
    check_threshold(threshold)?;
    let spec = forecaster.spec();
    let outcomes: Vec<(String, Result<AnomalyReport>)> = series
        .par_iter()
        .map(|s| {
            let r = region_for(s, spec, forecaster, cp).and_then(|(y, region, (eqr_lo, eqr_hi))| {
                let mut rep = score(model, s.series_id(), &region, &y, threshold)?;
                let eqr = ConformalizedRegion {
                    lower: eqr_lo,
                    upper: eqr_hi,
                };
                let w = eqr.widths();
                rep.eqr_covered = Some(eqr.covers(&y));
                rep.eqr_mean_width = Some(w.iter().sum::<f64>() / w.len() as f64);
                Ok(rep)
            });
            (s.series_id().to_string(), r)
        })
        .collect();
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in outcomes {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => skipped.push(SkipRecord {
                series_id: id,
                reason: e.to_string(),
            }),
        }
    }
    reports.sort_by(|a, b| a.series_id.cmp(&b.series_id));
    skipped.sort_by(|a, b| a.series_id.cmp(&b.series_id));
    let summary = BatchSummary::from_reports(&reports, skipped.len(), threshold);
    Ok(BatchResult {
        reports,
        skipped,
        summary,
    })
}
