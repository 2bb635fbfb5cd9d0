//! Synthetic corpora: daily sinusoidal profiles with AR(1) noise and
//! optional cross-channel coupling, plus labelled anomaly injection.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::MultivariateSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelRecipe {
    pub name: String,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Lag-one autocorrelation of the noise.
    #[serde(default = "default_ar")]
    pub ar: f64,
    /// `(source channel, coefficient)`: adds `coefficient` times the source
    /// channel's standardized noise.
    #[serde(default)]
    pub coupling: Vec<(usize, f64)>,
}

fn default_amplitude() -> f64 {
    3.0
}

fn default_noise_std() -> f64 {
    1.0
}

fn default_ar() -> f64 {
    0.97
}

impl ChannelRecipe {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            amplitude: default_amplitude(),
            phase: 0.0,
            offset: 0.0,
            noise_std: default_noise_std(),
            ar: default_ar(),
            coupling: Vec::new(),
        }
    }
}

/// Per-series regime label with its own profile modifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRecipe {
    pub label: String,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default = "one")]
    pub amplitude_scale: f64,
    #[serde(default)]
    pub offset: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_series: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub daily_period: f64,
    pub seed: u64,
    /// Empty means `d` default recipes.
    pub channels: Vec<ChannelRecipe>,
    pub groups: Vec<GroupRecipe>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_series: 100,
            t: 240,
            d: 5,
            daily_period: 240.0,
            seed: 0,
            channels: Vec::new(),
            groups: Vec::new(),
        }
    }
}

impl SynthConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
        }
    }

    /// Recipes after filling in defaults.
    pub fn recipes(&self) -> Vec<ChannelRecipe> {
        if !self.channels.is_empty() {
            return self.channels.clone();
        }
        (0..self.d)
            .map(|j| ChannelRecipe {
                phase: 2.0 * PI * j as f64 / self.d as f64,
                ..ChannelRecipe::named(format!("ch{j}"))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_series == 0 {
            return Err(Error::config("n_series", "must be positive"));
        }
        if self.t == 0 {
            return Err(Error::config("T", "must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("d", "must be positive"));
        }
        if !(self.daily_period > 0.0 && self.daily_period.is_finite()) {
            return Err(Error::config("daily_period", "must be positive and finite"));
        }
        if !self.channels.is_empty() && self.channels.len() != self.d {
            return Err(Error::config(
                "channels",
                format!("{} recipes given for d={}", self.channels.len(), self.d),
            ));
        }
        let recipes = self.recipes();
        for (j, r) in recipes.iter().enumerate() {
            let field = |f: &str| format!("channels[{j}].{f}");
            for (name, v) in [("amplitude", r.amplitude), ("phase", r.phase), ("offset", r.offset)] {
                if !v.is_finite() {
                    return Err(Error::config(field(name), "must be finite"));
                }
            }
            if !(r.noise_std >= 0.0 && r.noise_std.is_finite()) {
                return Err(Error::config(field("noise_std"), "must be nonnegative"));
            }
            if !(r.ar.abs() < 1.0) {
                return Err(Error::config(field("ar"), "must lie in (-1, 1)"));
            }
            for &(src, c) in &r.coupling {
                if src >= self.d || src == j || !c.is_finite() {
                    return Err(Error::config(
                        field("coupling"),
                        format!("invalid coupling ({src}, {c})"),
                    ));
                }
            }
        }
        let mut names: Vec<&str> = recipes.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("channels", "channel names must be distinct"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if !(g.weight > 0.0 && g.weight.is_finite()) {
                return Err(Error::config(format!("groups[{i}].weight"), "must be positive"));
            }
            if !(g.amplitude_scale.is_finite() && g.offset.is_finite()) {
                return Err(Error::config(format!("groups[{i}]"), "modifiers must be finite"));
            }
        }
        Ok(())
    }
}

/// Noiseless daily profile of one channel at step `tau`.
pub fn profile(recipe: &ChannelRecipe, group: Option<&GroupRecipe>, period: f64, tau: usize) -> f64 {
    let (scale, shift) = group.map_or((1.0, 0.0), |g| (g.amplitude_scale, g.offset));
    scale * recipe.amplitude * (2.0 * PI * tau as f64 / period + recipe.phase).sin() + recipe.offset + shift
}

fn pick_group<'a>(groups: &'a [GroupRecipe], rng: &mut ChaCha8Rng) -> Option<&'a GroupRecipe> {
    if groups.is_empty() {
        return None;
    }
    let total: f64 = groups.iter().map(|g| g.weight).sum();
    let mut x = rng.random::<f64>() * total;
    for g in groups {
        if x < g.weight {
            return Some(g);
        }
        x -= g.weight;
    }
    groups.last()
}

pub fn series_id(i: usize) -> String {
    format!("s{i:06}")
}

/// Generates `n_series` i.i.d. series; series `i` uses its own stream.
pub fn generate(config: &SynthConfig) -> Result<Vec<MultivariateSeries>> {
    config.validate()?;
    let recipes = config.recipes();
    let names: Vec<String> = recipes.iter().map(|r| r.name.clone()).collect();
    let (t, d) = (config.t, config.d);
    (0..config.n_series)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let group = pick_group(&config.groups, &mut rng);
            // standardized stationary AR(1) noise per channel
            let mut noise = DMatrix::<f64>::zeros(t, d);
            for (j, r) in recipes.iter().enumerate() {
                let innov = (1.0 - r.ar * r.ar).sqrt();
                let mut e: f64 = rng.sample(StandardNormal);
                for tau in 0..t {
                    if tau > 0 {
                        e = r.ar * e + innov * rng.sample::<f64, _>(StandardNormal);
                    }
                    noise[(tau, j)] = e;
                }
            }
            let values = DMatrix::from_fn(t, d, |tau, j| {
                let r = &recipes[j];
                let coupled: f64 = r.coupling.iter().map(|&(src, c)| c * noise[(tau, src)]).sum();
                profile(r, group, config.daily_period, tau) + r.noise_std * (noise[(tau, j)] + coupled)
            });
            Ok(MultivariateSeries::from_values(series_id(i), values, names.clone())?
                .with_group(group.map(|g| g.label.clone())))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    LevelShift,
    Spike,
    NoiseBurst,
    Drift,
    Flatline,
}

impl AnomalyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::LevelShift => "level_shift",
            Self::Spike => "spike",
            Self::NoiseBurst => "noise_burst",
            Self::Drift => "drift",
            Self::Flatline => "flatline",
        }
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "level_shift" => Ok(Self::LevelShift),
            "spike" => Ok(Self::Spike),
            "noise_burst" => Ok(Self::NoiseBurst),
            "drift" => Ok(Self::Drift),
            "flatline" => Ok(Self::Flatline),
            other => Err(Error::config("kind", format!("unknown anomaly kind `{other}`"))),
        }
    }
}

/// One anomaly; `magnitude` is in units of the channel's scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyInjection {
    pub kind: AnomalyKind,
    pub channel: usize,
    pub start_step: usize,
    pub duration: usize,
    pub magnitude: f64,
}

/// Applies injections. `scales[j]` is the unit of magnitude on channel `j`;
/// with `target_len` set, windows must sit inside the trailing target.
/// Returns the mutated series and a `T × d` label mask.
pub fn inject(
    series: &MultivariateSeries,
    injections: &[AnomalyInjection],
    scales: &[f64],
    target_len: Option<usize>,
) -> Result<(MultivariateSeries, DMatrix<bool>)> {
    let (t, d) = (series.len(), series.n_channels());
    if scales.len() != d {
        return Err(Error::config("scales", format!("{} scales for {d} channels", scales.len())));
    }
    let earliest = target_len.map_or(0, |l| t.saturating_sub(l));
    let mut labels = DMatrix::from_element(t, d, false);
    for (n, inj) in injections.iter().enumerate() {
        let field = |f: &str| format!("injections[{n}].{f}");
        if inj.channel >= d {
            return Err(Error::config(field("channel"), format!("{} out of range for d={d}", inj.channel)));
        }
        if inj.duration == 0 {
            return Err(Error::config(field("duration"), "must be positive"));
        }
        if inj.start_step < earliest || inj.start_step + inj.duration > t {
            return Err(Error::config(
                field("start_step"),
                format!(
                    "window {}..{} is outside the allowed range {earliest}..{t}",
                    inj.start_step,
                    inj.start_step + inj.duration
                ),
            ));
        }
        if !inj.magnitude.is_finite() {
            return Err(Error::config(field("magnitude"), "must be finite"));
        }
        for tau in inj.start_step..inj.start_step + inj.duration {
            if labels[(tau, inj.channel)] {
                return Err(Error::config(
                    field("start_step"),
                    format!("overlaps an earlier injection at step {tau}, channel {}", inj.channel),
                ));
            }
            labels[(tau, inj.channel)] = true;
        }
    }
    let mut out = series.clone();
    for inj in injections {
        let c = inj.channel;
        let unit = inj.magnitude * scales[c];
        let window = inj.start_step..inj.start_step + inj.duration;
        match inj.kind {
            AnomalyKind::LevelShift | AnomalyKind::Spike => {
                for tau in window {
                    out.set_value(tau, c, series.value(tau, c).map(|v| v + unit));
                }
            }
            AnomalyKind::Drift => {
                for (k, tau) in window.enumerate() {
                    let ramp = (k + 1) as f64 / inj.duration as f64;
                    out.set_value(tau, c, series.value(tau, c).map(|v| v + unit * ramp));
                }
            }
            AnomalyKind::NoiseBurst => {
                let vals: Vec<f64> = window.clone().filter_map(|tau| series.value(tau, c)).collect();
                if vals.is_empty() {
                    continue;
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                for tau in window {
                    out.set_value(tau, c, series.value(tau, c).map(|v| mean + (1.0 + inj.magnitude) * (v - mean)));
                }
            }
            AnomalyKind::Flatline => {
                let anchor = (0..=inj.start_step).rev().find_map(|tau| series.value(tau, c));
                for tau in window {
                    if series.value(tau, c).is_some() {
                        out.set_value(tau, c, anchor);
                    }
                }
            }
        }
    }
    Ok((out, labels))
}

/// A rule assigning one kind of anomaly to a fraction of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionRule {
    pub kind: AnomalyKind,
    pub channel: usize,
    pub fraction: f64,
    pub magnitude: f64,
    /// Window start relative to the first target step.
    #[serde(default)]
    pub offset: usize,
    pub duration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    pub target_len: usize,
    pub rules: Vec<InjectionRule>,
}

impl InjectionPlan {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
        }
    }
}

/// Ground truth for one series of an injected corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesLabel {
    pub series_id: String,
    /// `None` for clean series.
    pub kind: Option<AnomalyKind>,
    pub channel: Option<usize>,
    pub start_step: Option<usize>,
    pub duration: Option<usize>,
    pub magnitude: Option<f64>,
}

/// Seeded assignment of plan rules to disjoint subsets of the corpus; each
/// series gets at most one injection. Returns the mutated corpus and one
/// label per series in input order.
pub fn apply_plan(
    corpus: &[MultivariateSeries],
    plan: &InjectionPlan,
    scales: &[f64],
    seed: u64,
) -> Result<(Vec<MultivariateSeries>, Vec<SeriesLabel>)> {
    let total: f64 = plan.rules.iter().map(|r| r.fraction).sum();
    if plan.rules.iter().any(|r| !(r.fraction >= 0.0)) || total > 1.0 + 1e-9 {
        return Err(Error::config("rules.fraction", "fractions must be nonnegative and sum to at most 1"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| corpus[a].series_id().cmp(corpus[b].series_id()));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assigned: Vec<Option<&InjectionRule>> = vec![None; corpus.len()];
    let mut cursor = 0;
    for rule in &plan.rules {
        let count = ((rule.fraction * corpus.len() as f64) + 1e-9).floor() as usize;
        for &i in order.iter().skip(cursor).take(count) {
            assigned[i] = Some(rule);
        }
        cursor += count;
    }
    let mut out = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for (s, rule) in corpus.iter().zip(assigned) {
        match rule {
            None => {
                out.push(s.clone());
                labels.push(SeriesLabel {
                    series_id: s.series_id().to_string(),
                    kind: None,
                    channel: None,
                    start_step: None,
                    duration: None,
                    magnitude: None,
                });
            }
            Some(r) => {
                let start = s.len().saturating_sub(plan.target_len) + r.offset;
                let inj = AnomalyInjection {
                    kind: r.kind,
                    channel: r.channel,
                    start_step: start,
                    duration: r.duration,
                    magnitude: r.magnitude,
                };
                let (mutated, _) = inject(s, std::slice::from_ref(&inj), scales, Some(plan.target_len))?;
                out.push(mutated);
                labels.push(SeriesLabel {
                    series_id: s.series_id().to_string(),
                    kind: Some(r.kind),
                    channel: Some(r.channel),
                    start_step: Some(start),
                    duration: Some(r.duration),
                    magnitude: Some(r.magnitude),
                });
            }
        }
    }
    Ok((out, labels))
}

pub fn write_labels<W: std::io::Write>(w: W, labels: &[SeriesLabel]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    wtr.write_record(["series_id", "kind", "channel", "start_step", "duration", "magnitude"])
        .map_err(err)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for l in labels {
        wtr.write_record([
            l.series_id.clone(),
            l.kind.map_or_else(|| "clean".to_string(), |k| k.as_str().to_string()),
            opt(l.channel.map(|v| v.to_string())),
            opt(l.start_step.map(|v| v.to_string())),
            opt(l.duration.map(|v| v.to_string())),
            opt(l.magnitude.map(|v| v.to_string())),
        ])
        .map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::io("<labels>", e))?;
    Ok(())
}

pub fn read_labels<R: std::io::Read>(r: R) -> Result<Vec<SeriesLabel>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let parse_err = |what: &str| Error::Parse {
            line,
            message: format!("invalid {what}"),
        };
        let kind = match get(1).as_str() {
            "clean" => None,
            k => Some(k.parse::<AnomalyKind>().map_err(|_| parse_err("kind"))?),
        };
        let num = |i: usize, what: &str| -> Result<Option<usize>> {
            let s = get(i);
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| parse_err(what))
            }
        };
        let magnitude = match get(5) {
            s if s.is_empty() => None,
            s => Some(s.parse::<f64>().map_err(|_| parse_err("magnitude"))?),
        };
        out.push(SeriesLabel {
            series_id: get(0),
            kind,
            channel: num(2, "channel")?,
            start_step: num(3, "start_step")?,
            duration: num(4, "duration")?,
            magnitude,
        });
    }
    Ok(out)
}
