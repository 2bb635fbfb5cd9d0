//! Series data model, long-format CSV ingestion, target extraction and
//! dataset splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, FixedOffset, SecondsFormat};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SERIES_ID_COLUMN: &str = "series_id";
pub const TIMESTAMP_COLUMN: &str = "timestamp";
pub const DEFAULT_GROUP_COLUMN: &str = "group";

/// A time index: either an integer step or an RFC 3339 instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timestamp {
    Step(i64),
    Instant(DateTime<FixedOffset>),
}

impl Timestamp {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(step) = s.parse::<i64>() {
            return Some(Timestamp::Step(step));
        }
        DateTime::parse_from_rfc3339(s).ok().map(Timestamp::Instant)
    }

    /// Difference `self - earlier` in native units (steps or seconds).
    fn delta(&self, earlier: &Timestamp) -> Option<i64> {
        match (self, earlier) {
            (Timestamp::Step(a), Timestamp::Step(b)) => Some(a - b),
            (Timestamp::Instant(a), Timestamp::Instant(b)) => Some((*a - *b).num_seconds()),
            _ => None,
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Step(s) => write!(f, "{s}"),
            Timestamp::Instant(t) => f.write_str(&t.to_rfc3339_opts(SecondsFormat::AutoSi, true)),
        }
    }
}

/// One multivariate series: `T` time steps by `d` channels. Unobserved
/// cells are `NaN` with a `false` mask entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    series_id: String,
    group: Option<String>,
    timestamps: Vec<Timestamp>,
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    channel_names: Vec<String>,
}

impl MultivariateSeries {
    pub fn new(
        series_id: impl Into<String>,
        timestamps: Vec<Timestamp>,
        mut values: DMatrix<f64>,
        mask: DMatrix<bool>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let series_id = series_id.into();
        let invalid = |message: String| Error::Validation {
            series_id: series_id.clone(),
            message,
        };
        let (t, d) = values.shape();
        if t == 0 || d == 0 {
            return Err(invalid(format!("series must have T >= 1 and d >= 1, got {t}x{d}")));
        }
        if mask.shape() != (t, d) {
            return Err(invalid("mask shape does not match values".into()));
        }
        if timestamps.len() != t {
            return Err(invalid(format!("{} timestamps for {t} rows", timestamps.len())));
        }
        if channel_names.len() != d {
            return Err(invalid(format!("{} channel names for {d} channels", channel_names.len())));
        }
        let distinct: BTreeSet<&String> = channel_names.iter().collect();
        if distinct.len() != d {
            return Err(invalid("channel names are not distinct".into()));
        }
        if t > 1 {
            let step = timestamps[1]
                .delta(&timestamps[0])
                .ok_or_else(|| invalid("mixed integer and RFC 3339 timestamps".into()))?;
            if step <= 0 {
                return Err(invalid("timestamps are not strictly increasing".into()));
            }
            for (i, w) in timestamps.windows(2).enumerate() {
                match w[1].delta(&w[0]) {
                    Some(s) if s == step => {}
                    Some(s) if s <= 0 => {
                        return Err(invalid(format!("timestamps not strictly increasing at row {}", i + 1)))
                    }
                    Some(s) => {
                        return Err(invalid(format!(
                            "non-uniform timestamps: step {s} at row {} differs from {step}",
                            i + 1
                        )))
                    }
                    None => return Err(invalid("mixed integer and RFC 3339 timestamps".into())),
                }
            }
        }
        for r in 0..t {
            for c in 0..d {
                if mask[(r, c)] {
                    if !values[(r, c)].is_finite() {
                        return Err(invalid(format!("observed cell ({r},{c}) is not finite")));
                    }
                } else {
                    values[(r, c)] = f64::NAN;
                }
            }
        }
        Ok(Self {
            series_id,
            group: None,
            timestamps,
            values,
            mask,
            channel_names,
        })
    }

    /// Fully observed series with integer-step timestamps `0..T`.
    pub fn from_values(
        series_id: impl Into<String>,
        values: DMatrix<f64>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let (t, d) = values.shape();
        let mask = DMatrix::from_fn(t, d, |r, c| values[(r, c)].is_finite());
        let timestamps = (0..t as i64).map(Timestamp::Step).collect();
        Self::new(series_id, timestamps, values, mask, channel_names)
    }

    pub fn with_group(mut self, group: Option<String>) -> Self {
        self.group = group;
        self
    }

    pub fn series_id(&self) -> &str {
        &self.series_id
    }

    pub fn group(&self) -> Option<&str> {
        self.group.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|c| c == name)
    }

    pub fn value(&self, step: usize, channel: usize) -> Option<f64> {
        self.mask[(step, channel)].then(|| self.values[(step, channel)])
    }

    /// Replaces one cell; `None` marks it unobserved.
    pub fn set_value(&mut self, step: usize, channel: usize, value: Option<f64>) {
        match value {
            Some(v) if v.is_finite() => {
                self.values[(step, channel)] = v;
                self.mask[(step, channel)] = true;
            }
            _ => {
                self.values[(step, channel)] = f64::NAN;
                self.mask[(step, channel)] = false;
            }
        }
    }
}

/// Which cells form the prediction target: the trailing `length` steps of
/// the listed channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub channels: Vec<usize>,
    pub length: usize,
}

impl TargetSpec {
    pub fn new(channels: Vec<usize>, length: usize) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Spec("target channel set is empty".into()));
        }
        let distinct: BTreeSet<usize> = channels.iter().copied().collect();
        if distinct.len() != channels.len() {
            return Err(Error::Spec("target channels are not distinct".into()));
        }
        if length == 0 {
            return Err(Error::Spec("target length must be >= 1".into()));
        }
        Ok(Self { channels, length })
    }

    pub fn validate_for(&self, n_steps: usize, n_channels: usize) -> Result<()> {
        if self.length > n_steps {
            return Err(Error::Spec(format!(
                "target length {} exceeds series length {n_steps}",
                self.length
            )));
        }
        if let Some(&bad) = self.channels.iter().find(|&&c| c >= n_channels) {
            return Err(Error::Spec(format!(
                "target channel {bad} out of range for {n_channels} channels"
            )));
        }
        Ok(())
    }

    /// First target row for a series of `n_steps` rows.
    pub fn start(&self, n_steps: usize) -> usize {
        n_steps - self.length
    }

    /// Position of a channel within `channels`.
    pub fn position(&self, channel: usize) -> Option<usize> {
        self.channels.iter().position(|&c| c == channel)
    }

    pub fn contains(&self, step: usize, channel: usize, n_steps: usize) -> bool {
        step >= self.start(n_steps) && self.channels.contains(&channel)
    }
}

/// Conditioning information: every cell not in the target.
#[derive(Debug, Clone)]
pub struct Context {
    series_id: String,
    group: Option<String>,
    values: DMatrix<f64>,
    observed: DMatrix<bool>,
    spec: TargetSpec,
}

impl Context {
    pub fn series_id(&self) -> &str {
        &self.series_id
    }

    pub fn group(&self) -> Option<&str> {
        self.group.as_deref()
    }

    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn spec(&self) -> &TargetSpec {
        &self.spec
    }

    pub fn target_start(&self) -> usize {
        self.spec.start(self.n_steps())
    }

    /// Number of cells that belong to the context (observed or not).
    pub fn cell_count(&self) -> usize {
        self.n_steps() * self.n_channels() - self.spec.length * self.spec.channels.len()
    }

    pub fn contains(&self, step: usize, channel: usize) -> bool {
        !self.spec.contains(step, channel, self.n_steps())
    }

    /// Observed context value; `None` for target or missing cells.
    pub fn value(&self, step: usize, channel: usize) -> Option<f64> {
        self.observed[(step, channel)].then(|| self.values[(step, channel)])
    }

    /// Last observed value on `channel` strictly before row `before`.
    pub fn last_observed(&self, channel: usize, before: usize) -> Option<f64> {
        (0..before).rev().find_map(|r| self.value(r, channel))
    }

    pub fn observed_count_before(&self, channel: usize, before: usize) -> usize {
        (0..before).filter(|&r| self.observed[(r, channel)]).count()
    }
}

/// Target cells `y`, `length × |channels|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    series_id: String,
    values: DMatrix<f64>,
    observed: DMatrix<bool>,
}

impl Target {
    pub fn new(series_id: impl Into<String>, values: DMatrix<f64>) -> Self {
        let observed = values.map(|v| v.is_finite());
        Self {
            series_id: series_id.into(),
            values,
            observed,
        }
    }

    pub fn series_id(&self) -> &str {
        &self.series_id
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.values.ncols()
    }

    /// Values of one target channel by its position in the spec.
    pub fn column(&self, position: usize) -> Vec<f64> {
        self.values.column(position).iter().copied().collect()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    pub fn require_observed(&self) -> Result<()> {
        if self.is_fully_observed() {
            Ok(())
        } else {
            Err(Error::Validation {
                series_id: self.series_id.clone(),
                message: "target cells must be observed for calibration and scoring".into(),
            })
        }
    }
}

/// Splits a series into its context and its trailing target.
pub fn extract_target(series: &MultivariateSeries, spec: &TargetSpec) -> Result<(Context, Target)> {
    let (t, d) = (series.len(), series.n_channels());
    spec.validate_for(t, d)?;
    let start = spec.start(t);
    let target = DMatrix::from_fn(spec.length, spec.channels.len(), |r, c| {
        series.values[(start + r, spec.channels[c])]
    });
    let mut values = series.values.clone();
    let mut observed = series.mask.clone();
    for &c in &spec.channels {
        for r in start..t {
            values[(r, c)] = f64::NAN;
            observed[(r, c)] = false;
        }
    }
    let target_observed = DMatrix::from_fn(spec.length, spec.channels.len(), |r, c| {
        series.mask[(start + r, spec.channels[c])]
    });
    Ok((
        Context {
            series_id: series.series_id.clone(),
            group: series.group.clone(),
            values,
            observed,
            spec: spec.clone(),
        },
        Target {
            series_id: series.series_id.clone(),
            values: target,
            observed: target_observed,
        },
    ))
}

/// Column layout for long-format CSV files.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    /// Channel columns in order; empty means "every non-reserved column".
    pub channels: Vec<String>,
    /// Optional per-series label column.
    pub group_column: Option<String>,
}

impl CsvSchema {
    pub fn infer() -> Self {
        Self {
            channels: Vec::new(),
            group_column: Some(DEFAULT_GROUP_COLUMN.to_string()),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<MultivariateSeries>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

fn parse_cell(raw: &str, line: u64, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Parse {
            line,
            message: format!("column `{column}`: cannot parse `{s}` as a finite number"),
        }),
    }
}

struct PendingSeries {
    id: String,
    group: Option<String>,
    timestamps: Vec<Timestamp>,
    rows: Vec<Vec<Option<f64>>>,
}

impl PendingSeries {
    fn finish(self, channels: &[String]) -> Result<MultivariateSeries> {
        let t = self.rows.len();
        let d = channels.len();
        let values = DMatrix::from_fn(t, d, |r, c| self.rows[r][c].unwrap_or(f64::NAN));
        let mask = DMatrix::from_fn(t, d, |r, c| self.rows[r][c].is_some());
        Ok(MultivariateSeries::new(self.id, self.timestamps, values, mask, channels.to_vec())?
            .with_group(self.group))
    }
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<MultivariateSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col(SERIES_ID_COLUMN)
        .ok_or_else(|| Error::Schema(format!("header has no `{SERIES_ID_COLUMN}` column")))?;
    let ts_col = col(TIMESTAMP_COLUMN)
        .ok_or_else(|| Error::Schema(format!("header has no `{TIMESTAMP_COLUMN}` column")))?;
    let group_col = schema.group_column.as_deref().and_then(col);

    let reserved = |i: usize| i == id_col || i == ts_col || Some(i) == group_col;
    let channels: Vec<String> = if schema.channels.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !reserved(*i))
            .map(|(_, h)| h.to_string())
            .collect()
    } else {
        for (i, h) in headers.iter().enumerate() {
            if !reserved(i) && !schema.channels.iter().any(|c| c == h) {
                return Err(Error::Schema(format!("unknown channel column `{h}`")));
            }
        }
        schema.channels.clone()
    };
    if channels.is_empty() {
        return Err(Error::Schema("no channel columns".into()));
    }
    let channel_cols: Vec<usize> = channels
        .iter()
        .map(|c| col(c).ok_or_else(|| Error::Schema(format!("schema channel `{c}` missing from header"))))
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut current: Option<PendingSeries> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty series_id".into(),
            });
        }
        let raw_ts = record.get(ts_col).unwrap_or("");
        let ts = Timestamp::parse(raw_ts).ok_or_else(|| Error::Parse {
            line,
            message: format!("cannot parse timestamp `{raw_ts}`"),
        })?;
        let group = group_col
            .and_then(|g| record.get(g))
            .filter(|g| !g.is_empty())
            .map(str::to_string);
        let row = channel_cols
            .iter()
            .zip(&channels)
            .map(|(&c, name)| parse_cell(record.get(c).unwrap_or(""), line, name))
            .collect::<Result<Vec<_>>>()?;

        let same = current.as_ref().is_some_and(|p| p.id == id);
        if !same {
            if let Some(done) = current.take() {
                out.push(done.finish(&channels)?);
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Parse {
                    line,
                    message: format!("rows for series `{id}` are not contiguous"),
                });
            }
            current = Some(PendingSeries {
                id: id.clone(),
                group: group.clone(),
                timestamps: Vec::new(),
                rows: Vec::new(),
            });
        }
        let pending = current.as_mut().expect("pending series");
        if pending.group != group {
            return Err(Error::Validation {
                series_id: id,
                message: format!("group label changes at line {line}"),
            });
        }
        pending.timestamps.push(ts);
        pending.rows.push(row);
    }
    if let Some(done) = current.take() {
        out.push(done.finish(&channels)?);
    }
    Ok(out)
}

/// Writes series in long format; missing cells become empty fields.
pub fn write_csv<W: Write>(writer: W, series: &[MultivariateSeries], group_column: Option<&str>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    let Some(first) = series.first() else {
        return Ok(());
    };
    let mut header = vec![SERIES_ID_COLUMN.to_string(), TIMESTAMP_COLUMN.to_string()];
    if let Some(g) = group_column {
        header.push(g.to_string());
    }
    header.extend(first.channel_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_err)?;
    for s in series {
        if s.channel_names != first.channel_names {
            return Err(Error::Schema(format!(
                "series `{}` has different channels than `{}`",
                s.series_id, first.series_id
            )));
        }
        for r in 0..s.len() {
            let mut rec = vec![s.series_id.clone(), s.timestamps[r].to_string()];
            if group_column.is_some() {
                rec.push(s.group.clone().unwrap_or_default());
            }
            for c in 0..s.n_channels() {
                rec.push(s.value(r, c).map(|v| v.to_string()).unwrap_or_default());
            }
            wtr.write_record(&rec).map_err(csv_err)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Fractions of the corpus assigned to training, CP calibration, anomaly
/// calibration and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub calib_cp: f64,
    pub calib_ad: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.5,
            calib_cp: 0.2,
            calib_ad: 0.2,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 4] {
        [self.train, self.calib_cp, self.calib_ad, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Split(format!("fractions must be nonnegative, got {a:?}")));
        }
        if a.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Split(format!("fractions sum to more than 1: {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    CalibCp,
    CalibAd,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 4] = [SplitPart::Train, SplitPart::CalibCp, SplitPart::CalibAd, SplitPart::Test];
}

/// Disjoint assignment of series ids to the four parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub calib_cp: Vec<String>,
    pub calib_ad: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_key: Option<BTreeMap<String, String>>,
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::CalibCp => &self.calib_cp,
            SplitPart::CalibAd => &self.calib_ad,
            SplitPart::Test => &self.test,
        }
    }

    fn part_mut(&mut self, part: SplitPart) -> &mut Vec<String> {
        match part {
            SplitPart::Train => &mut self.train,
            SplitPart::CalibCp => &mut self.calib_cp,
            SplitPart::CalibAd => &mut self.calib_ad,
            SplitPart::Test => &mut self.test,
        }
    }

    /// Series of `part`, in the order given by `series`.
    pub fn select<'a>(&self, part: SplitPart, series: &'a [MultivariateSeries]) -> Vec<&'a MultivariateSeries> {
        let ids: BTreeSet<&str> = self.part(part).iter().map(String::as_str).collect();
        series.iter().filter(|s| ids.contains(s.series_id())).collect()
    }
}

/// Largest-remainder allocation of `n` items to parts.
fn allocate(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let total = ((fractions.iter().sum::<f64>() * n as f64) + 1e-9).floor() as usize;
    let total = total.min(n);
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 4];
    for i in 0..4 {
        sizes[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).filter(|&i| fractions[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().cycle().take(total.saturating_sub(assigned).min(4 * 4)) {
        sizes[i] += 1;
    }
    sizes
}

/// Seeded, order-invariant split; stratified by group label when present.
pub fn split_dataset(series: &[MultivariateSeries], fractions: SplitFractions, seed: u64) -> Result<DatasetSplit> {
    fractions.validate()?;
    if series.is_empty() {
        return Err(Error::Split("cannot split an empty series list".into()));
    }
    let f = fractions.as_array();
    let nonzero = f.iter().filter(|&&x| x > 0.0).count();
    if series.len() < nonzero {
        return Err(Error::Split(format!(
            "{} series cannot fill {nonzero} nonempty parts",
            series.len()
        )));
    }
    let mut by_group: BTreeMap<Option<&str>, Vec<&str>> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for s in series {
        if !ids.insert(s.series_id()) {
            return Err(Error::Split(format!("duplicate series id `{}`", s.series_id())));
        }
        by_group.entry(s.group()).or_default().push(s.series_id());
    }
    let has_groups = by_group.keys().any(Option::is_some);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: vec![],
        calib_cp: vec![],
        calib_ad: vec![],
        test: vec![],
        group_key: None,
    };
    for members in by_group.values_mut() {
        members.sort_unstable();
        members.shuffle(&mut rng);
        let sizes = allocate(members.len(), &f);
        let mut it = members.iter();
        for (part, size) in SplitPart::ALL.iter().zip(sizes) {
            split.part_mut(*part).extend(it.by_ref().take(size).map(|s| s.to_string()));
        }
    }
    // Every nonzero part gets at least one series.
    for (i, part) in SplitPart::ALL.iter().enumerate() {
        if f[i] > 0.0 && split.part(*part).is_empty() {
            let donor = *SplitPart::ALL
                .iter()
                .max_by_key(|p| split.part(**p).len())
                .expect("four parts");
            let moved = split.part_mut(donor).pop().expect("donor nonempty");
            split.part_mut(*part).push(moved);
        }
    }
    for part in SplitPart::ALL {
        split.part_mut(part).sort();
    }
    if has_groups {
        split.group_key = Some(
            series
                .iter()
                .filter_map(|s| s.group().map(|g| (s.series_id().to_string(), g.to_string())))
                .collect(),
        );
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("c{i}")).collect()
    }

    fn series(id: &str, t: usize, d: usize) -> MultivariateSeries {
        MultivariateSeries::from_values(id, DMatrix::from_fn(t, d, |r, c| (r * 10 + c) as f64), names(d)).unwrap()
    }

    #[test]
    fn extract_reference_shape() {
        let s = series("a", 240, 6);
        let spec = TargetSpec::new(vec![2], 40).unwrap();
        let (x, y) = extract_target(&s, &spec).unwrap();
        assert_eq!(y.values().shape(), (40, 1));
        assert_eq!(x.cell_count(), 240 * 6 - 40);
        assert_eq!(y.values()[(0, 0)], 200.0 * 10.0 + 2.0);
        assert!(x.value(200, 2).is_none());
        assert_eq!(x.value(199, 2), Some(1992.0));
    }

    #[test]
    fn extract_full_and_single_cell() {
        let s = series("a", 3, 2);
        let (x, y) = extract_target(&s, &TargetSpec::new(vec![0, 1], 3).unwrap()).unwrap();
        assert_eq!(x.cell_count(), 0);
        assert_eq!(y.values(), s.values());

        let (x, y) = extract_target(&s, &TargetSpec::new(vec![0], 1).unwrap()).unwrap();
        assert_eq!(y.values().shape(), (1, 1));
        assert_eq!(y.values()[(0, 0)], s.values()[(2, 0)]);
        // enumerate every cell: exactly one side owns it
        for r in 0..3 {
            for c in 0..2 {
                let in_y = r == 2 && c == 0;
                assert_eq!(x.contains(r, c), !in_y);
                assert_eq!(x.value(r, c).is_some(), !in_y);
            }
        }
    }

    #[test]
    fn extract_errors() {
        let s = series("a", 3, 2);
        assert!(matches!(
            extract_target(&s, &TargetSpec::new(vec![0], 4).unwrap()),
            Err(Error::Spec(_))
        ));
        assert!(matches!(
            extract_target(&s, &TargetSpec::new(vec![5], 1).unwrap()),
            Err(Error::Spec(_))
        ));
        assert!(TargetSpec::new(vec![], 1).is_err());
        assert!(TargetSpec::new(vec![1, 1], 1).is_err());
    }

    #[test]
    fn csv_basic_and_empty() {
        let csv = "series_id,timestamp,a,b\ns1,0,1.5,2\ns1,1,,3\ns2,5,1,1\n";
        let out = read_csv(csv.as_bytes(), &CsvSchema::infer()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].len(), 2);
        assert_eq!(out[0].value(1, 0), None);
        assert_eq!(out[0].value(1, 1), Some(3.0));

        let empty = read_csv("series_id,timestamp,a\n".as_bytes(), &CsvSchema::infer()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn csv_errors() {
        let schema = CsvSchema::infer();
        let bad = "series_id,timestamp,a\ns1,0,1\ns1,1,oops\n";
        match read_csv(bad.as_bytes(), &schema) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let gap = "series_id,timestamp,a\ns1,0,1\ns1,1,1\ns1,3,1\n";
        match read_csv(gap.as_bytes(), &schema) {
            Err(Error::Validation { series_id, .. }) => assert_eq!(series_id, "s1"),
            other => panic!("{other:?}"),
        }
        let strict = CsvSchema {
            channels: vec!["a".into()],
            group_column: None,
        };
        assert!(matches!(
            read_csv("series_id,timestamp,a,zz\ns1,0,1,2\n".as_bytes(), &strict),
            Err(Error::Schema(_))
        ));
        assert!(matches!(
            read_csv("series_id,timestamp,b\ns1,0,1\n".as_bytes(), &strict),
            Err(Error::Schema(_))
        ));
        let split_rows = "series_id,timestamp,a\ns1,0,1\ns2,0,1\ns1,1,1\n";
        assert!(matches!(read_csv(split_rows.as_bytes(), &schema), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_rfc3339_and_groups() {
        let csv = "series_id,timestamp,group,a\n\
                   s1,2024-01-01T00:00:00Z,dry,1\n\
                   s1,2024-01-01T00:06:00Z,dry,2\n\
                   s1,2024-01-01T00:12:00Z,dry,3\n";
        let out = read_csv(csv.as_bytes(), &CsvSchema::infer()).unwrap();
        assert_eq!(out[0].group(), Some("dry"));
        let mut buf = Vec::new();
        write_csv(&mut buf, &out, Some("group")).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), csv);
    }

    #[test]
    fn csv_nan_round_trip() {
        let mut s = series("x", 4, 3);
        s.set_value(2, 1, None);
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&s), None).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::infer()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].value(2, 1), None);
        assert!(!back[0].mask()[(2, 1)]);
        for r in 0..4 {
            for c in 0..3 {
                if (r, c) != (2, 1) {
                    assert_eq!(back[0].value(r, c), s.value(r, c));
                }
            }
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let all: Vec<_> = (0..100).map(|i| series(&format!("s{i:03}"), 2, 1)).collect();
        let f = SplitFractions::default();
        let a = split_dataset(&all, f, 7).unwrap();
        assert_eq!(
            (a.train.len(), a.calib_cp.len(), a.calib_ad.len(), a.test.len()),
            (50, 20, 20, 10)
        );
        assert_eq!(a, split_dataset(&all, f, 7).unwrap());
        let mut rev = all.clone();
        rev.reverse();
        assert_eq!(a, split_dataset(&rev, f, 7).unwrap());
        assert_ne!(a, split_dataset(&all, f, 8).unwrap());
    }

    #[test]
    fn split_stratified_ratio() {
        let all: Vec<_> = (0..10)
            .map(|i| series(&format!("s{i}"), 2, 1).with_group(Some(if i < 4 { "wet" } else { "dry" }.into())))
            .collect();
        let sp = split_dataset(&all, SplitFractions::default(), 1).unwrap();
        let key = sp.group_key.as_ref().unwrap();
        for part in SplitPart::ALL {
            let ids = sp.part(part);
            let wet = ids.iter().filter(|id| key[*id] == "wet").count() as f64;
            let f = SplitFractions::default().as_array()[part as usize];
            assert!((wet - 4.0 * f).abs() <= 1.0, "{part:?}");
        }
    }

    #[test]
    fn split_errors() {
        let few: Vec<_> = (0..3).map(|i| series(&format!("s{i}"), 2, 1)).collect();
        assert!(matches!(
            split_dataset(&few, SplitFractions::default(), 0),
            Err(Error::Split(_))
        ));
        assert!(split_dataset(&[], SplitFractions::default(), 0).is_err());
        let bad = SplitFractions {
            train: 0.9,
            calib_cp: 0.2,
            calib_ad: 0.0,
            test: 0.0,
        };
        assert!(split_dataset(&few, bad, 0).is_err());
    }
}
