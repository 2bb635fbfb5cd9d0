//! Quantile forecaster interface and two empirical baselines.
//!
//! A forecaster maps a context to a per-cell quantile range over the target
//! window. [`Climatology`] uses the distribution of the cell across training
//! series; [`Persistence`] holds the last pre-target value flat and adds
//! per-horizon residual quantiles.

use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{extract_target, Context, MultivariateSeries, TargetSpec};
use crate::stats::EmpiricalDistribution;

pub const FORECASTER_FORMAT: &str = "cocai-forecaster/1";

/// Per-cell lower and upper quantiles, `t × |channels|`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileRange {
    lower: DMatrix<f64>,
    upper: DMatrix<f64>,
    alpha: f64,
}

impl QuantileRange {
    pub fn new(lower: DMatrix<f64>, upper: DMatrix<f64>, alpha: f64) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::Contract("lower and upper shapes differ".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Contract(format!("alpha must be in (0,1), got {alpha}")));
        }
        for (l, u) in lower.iter().zip(upper.iter()) {
            if !(l.is_finite() && u.is_finite()) || l > u {
                return Err(Error::Contract(format!("invalid quantile pair [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper, alpha })
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DMatrix<f64> {
        &self.upper
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.lower.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.nrows() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.lower.ncols()
    }

    /// Lower and upper bounds for one target channel by spec position.
    pub fn channel(&self, position: usize) -> (Vec<f64>, Vec<f64>) {
        (
            self.lower.column(position).iter().copied().collect(),
            self.upper.column(position).iter().copied().collect(),
        )
    }
}

pub trait Forecaster: Send + Sync {
    fn spec(&self) -> &TargetSpec;

    /// Quantiles of order `alpha/2` and `1 - alpha/2` for every target cell.
    /// Must not read target cells of the query series.
    fn predict_quantiles(&self, context: &Context, alpha: f64) -> Result<QuantileRange>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    Climatology,
    Persistence,
}

impl FromStr for ForecasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "climatology" => Ok(Self::Climatology),
            "persistence" => Ok(Self::Persistence),
            other => Err(Error::config(
                "forecaster",
                format!("unknown forecaster `{other}` (expected climatology or persistence)"),
            )),
        }
    }
}

/// Shape shared by all training series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    n_steps: usize,
    channel_names: Vec<String>,
    spec: TargetSpec,
}

impl Layout {
    fn from_train(train: &[&MultivariateSeries], spec: &TargetSpec) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Fit("training set is empty".into()))?;
        spec.validate_for(first.len(), first.n_channels())?;
        for s in train {
            if s.len() != first.len() || s.channel_names() != first.channel_names() {
                return Err(Error::Fit(format!(
                    "training series `{}` does not share the shape of `{}`",
                    s.series_id(),
                    first.series_id()
                )));
            }
        }
        Ok(Self {
            n_steps: first.len(),
            channel_names: first.channel_names().to_vec(),
            spec: spec.clone(),
        })
    }

    fn check(&self, context: &Context) -> Result<()> {
        if context.n_steps() != self.n_steps
            || context.n_channels() != self.channel_names.len()
            || context.spec() != &self.spec
        {
            return Err(Error::Contract(format!(
                "series `{}`: context {}x{} with spec {:?} does not match forecaster {}x{} with spec {:?}",
                context.series_id(),
                context.n_steps(),
                context.n_channels(),
                context.spec(),
                self.n_steps,
                self.channel_names.len(),
                self.spec
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("alpha must be in (0,1), got {alpha}")))
    }
}

/// Per-cell empirical quantiles by clock position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Climatology {
    layout: Layout,
    /// `cells[position][step]`
    cells: Vec<Vec<EmpiricalDistribution>>,
}

pub fn fit_climatology(train: &[&MultivariateSeries], spec: &TargetSpec) -> Result<Climatology> {
    let layout = Layout::from_train(train, spec)?;
    let start = spec.start(layout.n_steps);
    let mut cells = Vec::with_capacity(spec.channels.len());
    for &c in &spec.channels {
        let mut per_step = Vec::with_capacity(spec.length);
        for tau in start..layout.n_steps {
            let vals: Vec<f64> = train.iter().filter_map(|s| s.value(tau, c)).collect();
            if vals.is_empty() {
                return Err(Error::Fit(format!("no observed training values at step {tau}, channel {c}")));
            }
            per_step.push(EmpiricalDistribution::new(vals)?);
        }
        cells.push(per_step);
    }
    Ok(Climatology { layout, cells })
}

impl Forecaster for Climatology {
    fn spec(&self) -> &TargetSpec {
        &self.layout.spec
    }

    fn predict_quantiles(&self, context: &Context, alpha: f64) -> Result<QuantileRange> {
        check_alpha(alpha)?;
        self.layout.check(context)?;
        let t = self.layout.spec.length;
        let p = self.cells.len();
        let lower = DMatrix::from_fn(t, p, |r, c| self.cells[c][r].quantile(alpha / 2.0));
        let upper = DMatrix::from_fn(t, p, |r, c| self.cells[c][r].quantile(1.0 - alpha / 2.0));
        QuantileRange::new(lower, upper, alpha)
    }
}

/// Last observed value held flat, banded by per-horizon residual quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persistence {
    layout: Layout,
    /// `residuals[position][horizon]`
    residuals: Vec<Vec<EmpiricalDistribution>>,
}

fn history_check(context: &Context, channel: usize) -> Result<f64> {
    let start = context.target_start();
    let need = context.spec().length;
    let have = context.observed_count_before(channel, start);
    if have < need {
        return Err(Error::Fit(format!(
            "series `{}`: channel {channel} has {have} observed pre-target steps, need {need}",
            context.series_id()
        )));
    }
    Ok(context.last_observed(channel, start).expect("history checked"))
}

pub fn fit_persistence(train: &[&MultivariateSeries], spec: &TargetSpec) -> Result<Persistence> {
    let layout = Layout::from_train(train, spec)?;
    let mut tables: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); spec.length]; spec.channels.len()];
    for s in train {
        let (context, target) = extract_target(s, spec)?;
        for (pos, &c) in spec.channels.iter().enumerate() {
            let point = history_check(&context, c)?;
            for h in 0..spec.length {
                let y = target.values()[(h, pos)];
                if y.is_finite() {
                    tables[pos][h].push(y - point);
                }
            }
        }
    }
    let residuals = tables
        .into_iter()
        .map(|per_h| {
            per_h
                .into_iter()
                .enumerate()
                .map(|(h, r)| {
                    if r.is_empty() {
                        Err(Error::Fit(format!("no observed residuals at horizon {h}")))
                    } else {
                        EmpiricalDistribution::new(r)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Persistence { layout, residuals })
}

impl Forecaster for Persistence {
    fn spec(&self) -> &TargetSpec {
        &self.layout.spec
    }

    fn predict_quantiles(&self, context: &Context, alpha: f64) -> Result<QuantileRange> {
        check_alpha(alpha)?;
        self.layout.check(context)?;
        let spec = &self.layout.spec;
        let points = spec
            .channels
            .iter()
            .map(|&c| history_check(context, c))
            .collect::<Result<Vec<_>>>()?;
        let t = spec.length;
        let p = spec.channels.len();
        let lower = DMatrix::from_fn(t, p, |h, c| points[c] + self.residuals[c][h].quantile(alpha / 2.0));
        let upper = DMatrix::from_fn(t, p, |h, c| points[c] + self.residuals[c][h].quantile(1.0 - alpha / 2.0));
        QuantileRange::new(lower, upper, alpha)
    }
}

/// Serializable wrapper over the built-in forecasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForecasterModel {
    Climatology(Climatology),
    Persistence(Persistence),
}

#[derive(Serialize, Deserialize)]
struct ForecasterFile {
    format: String,
    model: ForecasterModel,
}

impl ForecasterModel {
    pub fn fit(kind: ForecasterKind, train: &[&MultivariateSeries], spec: &TargetSpec) -> Result<Self> {
        Ok(match kind {
            ForecasterKind::Climatology => Self::Climatology(fit_climatology(train, spec)?),
            ForecasterKind::Persistence => Self::Persistence(fit_persistence(train, spec)?),
        })
    }

    pub fn kind(&self) -> ForecasterKind {
        match self {
            Self::Climatology(_) => ForecasterKind::Climatology,
            Self::Persistence(_) => ForecasterKind::Persistence,
        }
    }

    fn layout(&self) -> &Layout {
        match self {
            Self::Climatology(m) => &m.layout,
            Self::Persistence(m) => &m.layout,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.layout().n_steps
    }

    pub fn channel_names(&self) -> &[String] {
        &self.layout().channel_names
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ForecasterFile {
            format: FORECASTER_FORMAT.to_string(),
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ForecasterFile = serde_json::from_str(s)?;
        if file.format != FORECASTER_FORMAT {
            return Err(Error::Schema(format!(
                "forecaster format `{}` is not supported (expected `{FORECASTER_FORMAT}`)",
                file.format
            )));
        }
        Ok(file.model)
    }
}

impl Forecaster for ForecasterModel {
    fn spec(&self) -> &TargetSpec {
        &self.layout().spec
    }

    fn predict_quantiles(&self, context: &Context, alpha: f64) -> Result<QuantileRange> {
        match self {
            Self::Climatology(m) => m.predict_quantiles(context, alpha),
            Self::Persistence(m) => m.predict_quantiles(context, alpha),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn series(id: usize, values: DMatrix<f64>) -> MultivariateSeries {
        let d = values.ncols();
        MultivariateSeries::from_values(format!("s{id}"), values, (0..d).map(|c| format!("c{c}")).collect())
            .unwrap()
    }

    fn context_of(s: &MultivariateSeries, spec: &TargetSpec) -> Context {
        extract_target(s, spec).unwrap().0
    }

    #[test]
    fn climatology_identical_series() {
        let base = DMatrix::from_fn(10, 2, |r, c| (r + 3 * c) as f64);
        let train: Vec<_> = (0..100).map(|i| series(i, base.clone())).collect();
        let refs: Vec<_> = train.iter().collect();
        let spec = TargetSpec::new(vec![1], 4).unwrap();
        let f = fit_climatology(&refs, &spec).unwrap();
        let q = f.predict_quantiles(&context_of(&train[0], &spec), 0.1).unwrap();
        for h in 0..4 {
            assert_eq!(q.lower()[(h, 0)], base[(6 + h, 1)]);
            assert_eq!(q.upper()[(h, 0)], base[(6 + h, 1)]);
        }
    }

    #[test]
    fn climatology_one_to_ten() {
        let train: Vec<_> = (1..=10)
            .map(|v| series(v, DMatrix::from_element(3, 1, v as f64)))
            .collect();
        let refs: Vec<_> = train.iter().collect();
        let spec = TargetSpec::new(vec![0], 1).unwrap();
        let f = fit_climatology(&refs, &spec).unwrap();
        let q = f.predict_quantiles(&context_of(&train[0], &spec), 0.2).unwrap();
        // sorted {1..10}: position h = 9p, linear interpolation
        assert!((q.lower()[(0, 0)] - 1.9).abs() < 1e-12);
        assert!((q.upper()[(0, 0)] - 9.1).abs() < 1e-12);
    }

    #[test]
    fn climatology_marginal_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gen = |i| series(i, DMatrix::from_fn(8, 1, |_, _| rng.sample(StandardNormal)));
        let train: Vec<_> = (0..2000).map(&mut gen).collect();
        let test: Vec<_> = (0..2000).map(&mut gen).collect();
        let refs: Vec<_> = train.iter().collect();
        let spec = TargetSpec::new(vec![0], 4).unwrap();
        let f = fit_climatology(&refs, &spec).unwrap();
        let mut inside = 0;
        for s in &test {
            let (x, y) = extract_target(s, &spec).unwrap();
            let q = f.predict_quantiles(&x, 0.1).unwrap();
            for h in 0..4 {
                let v = y.values()[(h, 0)];
                inside += usize::from(q.lower()[(h, 0)] <= v && v <= q.upper()[(h, 0)]);
            }
        }
        let rate = inside as f64 / 8000.0;
        assert!((rate - 0.9).abs() < 0.02, "{rate}");
    }

    #[test]
    fn persistence_constant_and_random_walk() {
        let train: Vec<_> = (0..5).map(|i| series(i, DMatrix::from_element(20, 1, 3.0))).collect();
        let refs: Vec<_> = train.iter().collect();
        let spec = TargetSpec::new(vec![0], 5).unwrap();
        let f = fit_persistence(&refs, &spec).unwrap();
        let q = f.predict_quantiles(&context_of(&train[0], &spec), 0.3).unwrap();
        assert!(q.lower().iter().chain(q.upper().iter()).all(|&v| v == 3.0));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let walks: Vec<_> = (0..1000)
            .map(|i| {
                let mut acc = 0.0;
                let col: Vec<f64> = (0..30)
                    .map(|_| {
                        acc += rng.sample::<f64, _>(StandardNormal);
                        acc
                    })
                    .collect();
                series(i, DMatrix::from_column_slice(30, 1, &col))
            })
            .collect();
        let refs: Vec<_> = walks.iter().collect();
        let spec = TargetSpec::new(vec![0], 10).unwrap();
        let f = fit_persistence(&refs, &spec).unwrap();
        let q = f.predict_quantiles(&context_of(&walks[0], &spec), 0.1).unwrap();
        let widths: Vec<f64> = (0..10).map(|h| q.upper()[(h, 0)] - q.lower()[(h, 0)]).collect();
        // spread grows like sqrt(h); allow sampling wobble between neighbours
        assert!(widths[9] > 2.0 * widths[0]);
        for w in widths.windows(3) {
            assert!(w[2] > w[0] * 0.95);
        }
        // marginal train coverage per horizon
        for h in 0..10 {
            let mut inside = 0;
            for s in &walks {
                let (x, y) = extract_target(s, &spec).unwrap();
                let q = f.predict_quantiles(&x, 0.1).unwrap();
                let v = y.values()[(h, 0)];
                inside += usize::from(q.lower()[(h, 0)] <= v && v <= q.upper()[(h, 0)]);
            }
            assert!((inside as f64 / 1000.0 - 0.9).abs() < 0.01);
        }
    }

    #[test]
    fn persistence_needs_history() {
        let train = [series(0, DMatrix::from_element(6, 1, 1.0))];
        let refs: Vec<_> = train.iter().collect();
        assert!(matches!(
            fit_persistence(&refs, &TargetSpec::new(vec![0], 4).unwrap()),
            Err(Error::Fit(_))
        ));
        assert!(matches!(
            fit_climatology(&[], &TargetSpec::new(vec![0], 4).unwrap()),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn json_round_trip_and_format_tag() {
        let train: Vec<_> = (0..4)
            .map(|i| series(i, DMatrix::from_fn(12, 2, |r, c| (r * c + i) as f64)))
            .collect();
        let refs: Vec<_> = train.iter().collect();
        let spec = TargetSpec::new(vec![0, 1], 3).unwrap();
        for kind in [ForecasterKind::Climatology, ForecasterKind::Persistence] {
            let m = ForecasterModel::fit(kind, &refs, &spec).unwrap();
            let json = m.to_json().unwrap();
            let back = ForecasterModel::from_json(&json).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.kind(), kind);
            let bad = json.replace(FORECASTER_FORMAT, "cocai-forecaster/0");
            assert!(matches!(ForecasterModel::from_json(&bad), Err(Error::Schema(_))));
        }
    }

    #[test]
    fn rejects_mismatched_context() {
        let train = [series(0, DMatrix::from_element(6, 1, 1.0))];
        let refs: Vec<_> = train.iter().collect();
        let spec = TargetSpec::new(vec![0], 2).unwrap();
        let f = fit_climatology(&refs, &spec).unwrap();
        let other = series(1, DMatrix::from_element(7, 1, 1.0));
        assert!(f.predict_quantiles(&context_of(&other, &spec), 0.1).is_err());
        assert!(f.predict_quantiles(&context_of(&train[0], &spec), 1.0).is_err());
    }
}
