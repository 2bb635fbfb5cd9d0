//! End-to-end calibration, model bundles, corpus scoring and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{
    batch_score, calibrate_anomaly, AnomalyConfig, AnomalyModel, AnomalyReport, BatchSummary, SkipRecord,
    DEFAULT_MIN_WIDTH, DEFAULT_THRESHOLD,
};
use crate::conformal::{calibrate_copula_cpts, ncf_cqr, CalibrationMethod, ConformalModel, NonconformityScores};
use crate::error::{Error, Result};
use crate::forecaster::{Forecaster, ForecasterKind, ForecasterModel};
use crate::plot::{render_svg, PlotData};
use crate::series::{extract_target, split_dataset, DatasetSplit, MultivariateSeries, SplitFractions, SplitPart, TargetSpec};
use crate::splines::{select_k, ElbowCurve, DEFAULT_RHO};
use crate::synth::{AnomalyKind, SeriesLabel};

pub const BUNDLE_FORMAT: &str = "cocai-bundle/1";
pub const UNGROUPED: &str = "all";

/// Input and output locations; never written into a bundle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelinePaths {
    pub data: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl PipelinePaths {
    fn is_empty(&self) -> bool {
        self == &Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    #[serde(skip_serializing_if = "PipelinePaths::is_empty")]
    pub paths: PipelinePaths,
    /// Target channel names (or indices written as decimal strings).
    pub channels: Vec<String>,
    pub target_len: usize,
    pub alpha: f64,
    pub threshold: f64,
    pub method: CalibrationMethod,
    pub forecaster: ForecasterKind,
    pub k_candidates: Option<Vec<usize>>,
    pub k_override: Option<usize>,
    pub rho: f64,
    pub min_width: f64,
    pub group_column: Option<String>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PipelinePaths::default(),
            channels: Vec::new(),
            target_len: 40,
            alpha: 0.1,
            threshold: DEFAULT_THRESHOLD,
            method: CalibrationMethod::BoundedCopula,
            forecaster: ForecasterKind::Climatology,
            k_candidates: None,
            k_override: None,
            rho: DEFAULT_RHO,
            min_width: DEFAULT_MIN_WIDTH,
            group_column: Some("group".to_string()),
            seed: 0,
            fractions: SplitFractions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", format!("must be in (0,1), got {}", self.alpha)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", format!("must be in (0,1), got {}", self.threshold)));
        }
        if self.target_len == 0 {
            return Err(Error::config("target_len", "must be positive"));
        }
        if !(self.min_width > 0.0 && self.min_width.is_finite()) {
            return Err(Error::config("min_width", "must be positive"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho", "must be in (0,1)"));
        }
        self.fractions.validate()
    }

    /// Resolves channel names against a series layout.
    pub fn target_spec(&self, channel_names: &[String]) -> Result<TargetSpec> {
        if self.channels.is_empty() {
            return Err(Error::config("channels", "no target channels given"));
        }
        let idx = self
            .channels
            .iter()
            .map(|c| {
                channel_names
                    .iter()
                    .position(|n| n == c)
                    .or_else(|| c.parse::<usize>().ok().filter(|&i| i < channel_names.len()))
                    .ok_or_else(|| Error::config("channels", format!("unknown channel `{c}`; available: {channel_names:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        TargetSpec::new(idx, self.target_len)
    }

    fn anomaly_config(&self) -> AnomalyConfig {
        AnomalyConfig {
            k_candidates: self.k_candidates.clone(),
            k_override: self.k_override,
            rho: self.rho,
            min_width: self.min_width,
        }
    }
}

/// File name stem for a (channel, group) model.
pub fn model_key(channel_name: &str, group: Option<&str>) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect()
    };
    format!("{}_{}", clean(channel_name), clean(group.unwrap_or(UNGROUPED)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub n_steps: usize,
    pub channel_names: Vec<String>,
    pub target: TargetSpec,
    /// Relative path to sha256 hex digest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: Manifest,
    pub forecaster: ForecasterModel,
    pub split: DatasetSplit,
    pub conformal: BTreeMap<String, ConformalModel>,
    pub anomaly: BTreeMap<String, AnomalyModel>,
}

fn groups_of(series: &[&MultivariateSeries]) -> BTreeSet<Option<String>> {
    series.iter().map(|s| s.group().map(str::to_string)).collect()
}

fn check_layout(corpus: &[MultivariateSeries]) -> Result<(usize, Vec<String>)> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Calibration("corpus is empty".into()))?;
    for s in corpus {
        if s.len() != first.len() || s.channel_names() != first.channel_names() {
            return Err(Error::Schema(format!(
                "series `{}` ({} steps, channels {:?}) differs from `{}` ({} steps, channels {:?})",
                s.series_id(),
                s.len(),
                s.channel_names(),
                first.series_id(),
                first.len(),
                first.channel_names()
            )));
        }
    }
    Ok((first.len(), first.channel_names().to_vec()))
}

fn in_group<'a>(set: &[&'a MultivariateSeries], group: Option<&str>) -> Vec<&'a MultivariateSeries> {
    set.iter().copied().filter(|s| s.group() == group).collect()
}

/// CQR scores of one channel over a set of series.
pub fn channel_scores(
    series: &[&MultivariateSeries],
    forecaster: &dyn Forecaster,
    channel: usize,
    alpha: f64,
) -> Result<NonconformityScores> {
    let spec = forecaster.spec();
    let pos = spec
        .position(channel)
        .ok_or_else(|| Error::Contract(format!("channel {channel} is not a target channel")))?;
    let rows = series
        .par_iter()
        .map(|s| {
            let (x, y) = extract_target(s, spec)?;
            y.require_observed()?;
            let range = forecaster.predict_quantiles(&x, alpha)?;
            let (lo, hi) = range.channel(pos);
            ncf_cqr(&lo, &hi, &y.column(pos))
        })
        .collect::<Result<Vec<_>>>()?;
    NonconformityScores::from_rows(&rows)
}

/// Split, fit, conformal calibration and anomaly calibration.
pub fn calibrate(corpus: &[MultivariateSeries], config: &PipelineConfig) -> Result<Bundle> {
    config.validate()?;
    let (n_steps, channel_names) = check_layout(corpus)?;
    let spec = config.target_spec(&channel_names)?;
    spec.validate_for(n_steps, channel_names.len())?;
    let split = split_dataset(corpus, config.fractions, config.seed)?;
    let train = split.select(SplitPart::Train, corpus);
    let cp = split.select(SplitPart::CalibCp, corpus);
    let ad = split.select(SplitPart::CalibAd, corpus);
    if train.is_empty() {
        return Err(Error::Calibration("calibration set empty: no training series".into()));
    }
    let forecaster = ForecasterModel::fit(config.forecaster, &train, &spec)?;

    let groups = groups_of(&cp).union(&groups_of(&ad)).cloned().collect::<BTreeSet<_>>();
    let jobs: Vec<(usize, Option<String>)> = spec
        .channels
        .iter()
        .flat_map(|&c| groups.iter().map(move |g| (c, g.clone())))
        .collect();
    if jobs.is_empty() {
        return Err(Error::Calibration("calibration set empty (calib_cp and calib_ad)".into()));
    }
    let fitted = jobs
        .iter()
        .map(|(c, g)| {
            let label = g.as_deref().unwrap_or(UNGROUPED);
            let cp_g = in_group(&cp, g.as_deref());
            let ad_g = in_group(&ad, g.as_deref());
            if cp_g.is_empty() {
                return Err(Error::Calibration(format!("calibration set empty: calib_cp for group `{label}`")));
            }
            if ad_g.is_empty() {
                return Err(Error::Calibration(format!("calibration set empty: calib_ad for group `{label}`")));
            }
            let scores = channel_scores(&cp_g, &forecaster, *c, config.alpha)?;
            let mut cm = calibrate_copula_cpts(&scores, config.alpha, config.seed, config.method)?;
            cm.channel = *c;
            cm.group = g.clone();
            let key = model_key(&channel_names[*c], g.as_deref());
            if cm.infeasible {
                return Err(Error::Calibration(format!(
                    "{key}: no finite conformal adjustment reaches joint coverage {} over {} steps with {} calib_cp series; add series, shorten the target or raise alpha",
                    1.0 - config.alpha,
                    spec.length,
                    cp_g.len()
                )));
            }
            let am = calibrate_anomaly(&ad_g, &forecaster, &cm, &config.anomaly_config())?;
            log::info!(
                "{key}: K={} nu={:.1} sum eps={:.4} cal2 coverage={:.3}",
                am.k(),
                am.student_t.nu().unwrap_or(f64::NAN),
                cm.total_adjustment(),
                cm.achieved_coverage
            );
            Ok((key, cm, am))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut conformal = BTreeMap::new();
    let mut anomaly = BTreeMap::new();
    for (key, cm, am) in fitted {
        conformal.insert(key.clone(), cm);
        anomaly.insert(key, am);
    }
    Ok(Bundle {
        manifest: Manifest {
            format: BUNDLE_FORMAT.to_string(),
            seed: config.seed,
            config: PipelineConfig {
                paths: PipelinePaths::default(),
                ..config.clone()
            },
            n_steps,
            channel_names,
            target: spec,
            files: BTreeMap::new(),
        },
        forecaster,
        split,
        conformal,
        anomaly,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(root: &Path, rel: &str, text: &str, files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.insert(rel.to_string(), sha256_hex(text.as_bytes()));
    Ok(())
}

impl Bundle {
    fn file_contents(&self) -> Result<Vec<(String, String)>> {
        let mut out = vec![
            ("forecaster.json".to_string(), self.forecaster.to_json()?),
            ("split.json".to_string(), serde_json::to_string_pretty(&self.split)?),
        ];
        for (k, m) in &self.conformal {
            out.push((format!("conformal/{k}.json"), m.to_json()?));
        }
        for (k, m) in &self.anomaly {
            out.push((format!("anomaly/{k}.json"), m.to_json()?));
        }
        Ok(out)
    }

    /// Writes the bundle directory atomically: files go to a sibling
    /// temporary directory which is renamed into place on success.
    pub fn write(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let name = dir
            .file_name()
            .ok_or_else(|| Error::config("out", format!("invalid bundle path {}", dir.display())))?;
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp: PathBuf = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let result = (|| -> Result<()> {
            let mut files = BTreeMap::new();
            for (rel, text) in self.file_contents()? {
                write_file(&tmp, &rel, &text, &mut files)?;
            }
            self.manifest.files = files;
            let manifest = serde_json::to_string_pretty(&self.manifest)?;
            fs::write(tmp.join("manifest.json"), manifest).map_err(|e| Error::io(tmp.join("manifest.json"), e))?;
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
        })();
        if result.is_err() {
            let _ = fs::remove_dir_all(&tmp);
        }
        result
    }

    /// Loads a bundle and verifies every file hash in the manifest.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |rel: &str| -> Result<String> {
            let p = dir.join(rel);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(Error::Schema(format!(
                "bundle format `{}` is not supported (expected `{BUNDLE_FORMAT}`)",
                manifest.format
            )));
        }
        let mut texts = BTreeMap::new();
        for (rel, hash) in &manifest.files {
            let text = read(rel)?;
            if &sha256_hex(text.as_bytes()) != hash {
                return Err(Error::Schema(format!("{}: content hash does not match the manifest", dir.join(rel).display())));
            }
            texts.insert(rel.clone(), text);
        }
        let take = |rel: &str| {
            texts
                .get(rel)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("bundle manifest does not list `{rel}`")))
        };
        let forecaster = ForecasterModel::from_json(&take("forecaster.json")?)?;
        let split: DatasetSplit = serde_json::from_str(&take("split.json")?)?;
        let mut conformal = BTreeMap::new();
        let mut anomaly = BTreeMap::new();
        for (rel, text) in &texts {
            let stem = || rel.rsplit('/').next().unwrap_or(rel).trim_end_matches(".json").to_string();
            if rel.starts_with("conformal/") {
                conformal.insert(stem(), ConformalModel::from_json(text)?);
            } else if rel.starts_with("anomaly/") {
                anomaly.insert(stem(), AnomalyModel::from_json(text)?);
            }
        }
        if conformal.keys().ne(anomaly.keys()) {
            return Err(Error::Schema("conformal and anomaly model sets differ".into()));
        }
        Ok(Self {
            manifest,
            forecaster,
            split,
            conformal,
            anomaly,
        })
    }

    /// Explains how a corpus layout or requested target differs from the
    /// bundle, if it does.
    pub fn check_compatible(&self, corpus: &[MultivariateSeries], requested: Option<&TargetSpec>) -> Result<()> {
        let m = &self.manifest;
        if let Some(spec) = requested {
            if spec != &m.target {
                return Err(Error::Spec(format!(
                    "requested target channels {:?} / t={} but the bundle was calibrated for channels {:?} / t={}",
                    spec.channels, spec.length, m.target.channels, m.target.length
                )));
            }
        }
        for s in corpus {
            if s.channel_names() != m.channel_names.as_slice() {
                return Err(Error::Spec(format!(
                    "series `{}` has channels {:?}; the bundle expects {:?}",
                    s.series_id(),
                    s.channel_names(),
                    m.channel_names
                )));
            }
            if s.len() != m.n_steps {
                return Err(Error::Spec(format!(
                    "series `{}` has T={}; the bundle expects T={} (target t={})",
                    s.series_id(),
                    s.len(),
                    m.n_steps,
                    m.target.length
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutput {
    pub reports: Vec<AnomalyReport>,
    pub skipped: Vec<SkipRecord>,
    pub summary: BatchSummary,
    pub per_model: BTreeMap<String, BatchSummary>,
}

/// Scores a corpus with every (channel, group) model of the bundle.
pub fn score_corpus(bundle: &Bundle, corpus: &[MultivariateSeries], threshold: f64) -> Result<ScoreOutput> {
    bundle.check_compatible(corpus, None)?;
    let names = &bundle.manifest.channel_names;
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    let mut per_model = BTreeMap::new();
    let mut matched: BTreeSet<&str> = BTreeSet::new();
    for (key, am) in &bundle.anomaly {
        let cm = &bundle.conformal[key];
        let members: Vec<&MultivariateSeries> = corpus
            .iter()
            .filter(|s| s.group() == cm.group.as_deref())
            .collect();
        matched.extend(members.iter().map(|s| s.series_id()));
        let result = batch_score(am, &members, &bundle.forecaster, cm, threshold)?;
        per_model.insert(key.clone(), result.summary);
        reports.extend(result.reports);
        skipped.extend(result.skipped.into_iter().map(|mut s| {
            s.reason = format!("{} ({key})", s.reason);
            s
        }));
    }
    for s in corpus {
        if !matched.contains(s.series_id()) {
            skipped.push(SkipRecord {
                series_id: s.series_id().to_string(),
                reason: format!(
                    "no model for group `{}` on channels {:?}",
                    s.group().unwrap_or(UNGROUPED),
                    bundle.manifest.target.channels.iter().map(|&c| &names[c]).collect::<Vec<_>>()
                ),
            });
        }
    }
    reports.sort_by(|a, b| (&a.series_id, a.channel).cmp(&(&b.series_id, b.channel)));
    skipped.sort_by(|a, b| (&a.series_id, &a.reason).cmp(&(&b.series_id, &b.reason)));
    let summary = BatchSummary::from_reports(&reports, skipped.len(), threshold);
    Ok(ScoreOutput {
        reports,
        skipped,
        summary,
        per_model,
    })
}

pub fn reports_to_jsonl(reports: &[AnomalyReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn reports_from_jsonl(text: &str) -> Result<Vec<AnomalyReport>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// RSS curves of the anomaly-calibration split, recomputed per model.
pub fn elbow_curves(
    bundle: &Bundle,
    corpus: &[MultivariateSeries],
    candidates: &[usize],
    rho: f64,
) -> Result<BTreeMap<String, ElbowCurve>> {
    bundle.check_compatible(corpus, None)?;
    let ad = bundle.split.select(SplitPart::CalibAd, corpus);
    let mut out = BTreeMap::new();
    for (key, am) in &bundle.anomaly {
        let cm = &bundle.conformal[key];
        let members = in_group(&ad, cm.group.as_deref());
        if members.is_empty() {
            return Err(Error::Calibration(format!("calibration set empty: calib_ad for `{key}`")));
        }
        let spec = bundle.forecaster.spec();
        let pos = spec.position(cm.channel).expect("target channel");
        let deltas = members
            .iter()
            .map(|s| {
                let (x, y) = extract_target(s, spec)?;
                let range = bundle.forecaster.predict_quantiles(&x, cm.alpha)?;
                let region = crate::conformal::conformalize(&range, spec, cm)?;
                crate::anomaly::distance_series(&crate::anomaly::apply_min_width(&region, am.min_width), &y.column(pos))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(key.clone(), select_k(&deltas, candidates, rho)?);
    }
    Ok(out)
}

/// One SVG per report, named `<series>_<channel>.svg`.
pub fn plot_reports(
    bundle: &Bundle,
    corpus: &[MultivariateSeries],
    reports: &[AnomalyReport],
) -> Result<Vec<(String, String)>> {
    let by_id: BTreeMap<&str, &MultivariateSeries> = corpus.iter().map(|s| (s.series_id(), s)).collect();
    let names = &bundle.manifest.channel_names;
    reports
        .par_iter()
        .filter_map(|r| by_id.get(r.series_id.as_str()).map(|s| (r, *s)))
        .map(|(r, s)| {
            let name = &names[r.channel];
            let cm = &bundle.conformal[&model_key(name, r.group.as_deref())];
            let data = PlotData::for_report(s, name, &bundle.forecaster, cm, r)?;
            Ok((format!("{}.svg", model_key(&r.series_id, Some(name))), render_svg(&data)))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub n: usize,
    pub flagged: usize,
    pub rate: Option<f64>,
}

impl DetectionCounts {
    fn push(&mut self, flagged: bool) {
        self.n += 1;
        self.flagged += usize::from(flagged);
        self.rate = Some(self.flagged as f64 / self.n as f64);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub per_kind: BTreeMap<String, DetectionCounts>,
    pub clean: DetectionCounts,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

/// Detection rates against injected labels; a series counts as flagged
/// when any of its reports is flagged.
pub fn evaluate(reports: &[AnomalyReport], labels: &[SeriesLabel]) -> Result<EvalMetrics> {
    let mut flagged: BTreeMap<&str, bool> = BTreeMap::new();
    for r in reports {
        *flagged.entry(r.series_id.as_str()).or_default() |= r.flagged;
    }
    let labelled: BTreeSet<&str> = labels.iter().map(|l| l.series_id.as_str()).collect();
    let missing_reports: Vec<&str> = labelled.iter().copied().filter(|id| !flagged.contains_key(id)).collect();
    let missing_labels: Vec<&str> = flagged.keys().copied().filter(|id| !labelled.contains(id)).collect();
    if !missing_reports.is_empty() || !missing_labels.is_empty() {
        return Err(Error::Validation {
            series_id: "<eval>".into(),
            message: format!("unmatched ids: labels without reports {missing_reports:?}; reports without labels {missing_labels:?}"),
        });
    }
    let mut m = EvalMetrics::default();
    for l in labels {
        let f = flagged[l.series_id.as_str()];
        match l.kind {
            None => {
                m.clean.push(f);
                if f {
                    m.false_positive += 1;
                } else {
                    m.true_negative += 1;
                }
            }
            Some(kind) => {
                m.per_kind.entry(kind_name(kind)).or_default().push(f);
                if f {
                    m.true_positive += 1;
                } else {
                    m.false_negative += 1;
                }
            }
        }
    }
    Ok(m)
}

fn kind_name(k: AnomalyKind) -> String {
    k.as_str().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn corpus(n: usize, seed: u64) -> Vec<MultivariateSeries> {
        generate(&SynthConfig {
            n_series: n,
            t: 60,
            d: 2,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn config() -> PipelineConfig {
        PipelineConfig {
            channels: vec!["ch1".into()],
            target_len: 20,
            k_candidates: Some(vec![4, 5, 7]),
            alpha: 0.2,
            seed: 3,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn calibrate_write_load_score() {
        let data = corpus(400, 1);
        let mut bundle = calibrate(&data, &config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle");
        bundle.write(&path).unwrap();
        let loaded = Bundle::load(&path).unwrap();
        assert_eq!(loaded, bundle);
        assert!(loaded.manifest.files.contains_key("conformal/ch1_all.json"));

        let test = corpus(50, 2);
        let out = score_corpus(&loaded, &test, 0.9).unwrap();
        assert_eq!(out.reports.len(), 50);
        assert!(out.reports.windows(2).all(|w| w[0].series_id <= w[1].series_id));

        // tampering is detected
        let f = path.join("forecaster.json");
        let text = fs::read_to_string(&f).unwrap();
        fs::write(&f, text.replacen('1', "2", 1)).unwrap();
        assert!(matches!(Bundle::load(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn compatibility_diff() {
        let data = corpus(400, 1);
        let bundle = calibrate(&data, &config()).unwrap();
        let short = generate(&SynthConfig {
            n_series: 2,
            t: 50,
            d: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        match score_corpus(&bundle, &short, 0.9) {
            Err(Error::Spec(msg)) => assert!(msg.contains("T=50") && msg.contains("T=60")),
            other => panic!("{other:?}"),
        }
        let other = TargetSpec::new(vec![0], 20).unwrap();
        assert!(matches!(bundle.check_compatible(&data, Some(&other)), Err(Error::Spec(_))));
    }

    #[test]
    fn config_validation_and_channels() {
        let mut c = config();
        c.alpha = 1.5;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "alpha"));
        let names = vec!["a".to_string(), "b".to_string()];
        let c = PipelineConfig {
            channels: vec!["b".into(), "0".into()],
            ..config()
        };
        assert_eq!(c.target_spec(&names).unwrap().channels, vec![1, 0]);
        let c = PipelineConfig {
            channels: vec!["zz".into()],
            ..config()
        };
        assert!(c.target_spec(&names).is_err());
        let parsed: PipelineConfig = toml::from_str("channels = [\"ch1\"]\nalpha = 0.2\nmethod = \"uniform_level\"").unwrap();
        assert_eq!(parsed.method, CalibrationMethod::UniformLevel);
        assert!(toml::from_str::<PipelineConfig>("alpah = 0.2").is_err());
    }

    #[test]
    fn missing_ad_split() {
        let data = corpus(100, 1);
        let c = PipelineConfig {
            fractions: SplitFractions {
                train: 0.5,
                calib_cp: 0.5,
                calib_ad: 0.0,
                test: 0.0,
            },
            ..config()
        };
        match calibrate(&data, &c) {
            Err(e) => assert!(e.to_string().contains("calibration set empty"), "{e}"),
            Ok(_) => panic!("expected failure"),
        }
    }

    #[test]
    fn eval_counts_and_mismatch() {
        let data = corpus(400, 1);
        let bundle = calibrate(&data, &config()).unwrap();
        let test = corpus(10, 5);
        let out = score_corpus(&bundle, &test, 0.9).unwrap();
        let labels: Vec<SeriesLabel> = test
            .iter()
            .map(|s| SeriesLabel {
                series_id: s.series_id().into(),
                kind: None,
                channel: None,
                start_step: None,
                duration: None,
                magnitude: None,
            })
            .collect();
        let m = evaluate(&out.reports, &labels).unwrap();
        assert_eq!(m.clean.n, 10);
        assert!(m.per_kind.is_empty());
        assert!(evaluate(&out.reports, &labels[..5]).is_err());
        let text = reports_to_jsonl(&out.reports).unwrap();
        assert_eq!(reports_from_jsonl(&text).unwrap(), out.reports);
    }
}
