//! Layering of defaults, config file, command-line flags and `COCAI_SEED`.

use std::path::{Path, PathBuf};

use clap::Args;
use cocai::{CalibrationMethod, Error, ForecasterKind, PipelineConfig, Result};

pub const SEED_ENV: &str = "COCAI_SEED";

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlags {
    /// Pipeline config file (TOML, or JSON by extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// `uniform_level` or `bounded_copula`.
    #[arg(long)]
    pub method: Option<CalibrationMethod>,
    /// `climatology` or `persistence`.
    #[arg(long)]
    pub forecaster: Option<ForecasterKind>,
    /// Target channel names or indices, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<String>,
    /// Number of trailing target steps.
    #[arg(long)]
    pub target_len: Option<usize>,
    /// Group column name; `none` disables grouping.
    #[arg(long)]
    pub group_col: Option<String>,
    /// Interval width floor used before computing distances.
    #[arg(long)]
    pub min_width: Option<f64>,
    /// Spline basis candidates, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub k_candidates: Vec<usize>,
    /// Fixed spline basis count, bypassing elbow selection.
    #[arg(long)]
    pub k: Option<usize>,
    /// Elbow flattening threshold.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: PipelineConfig,
    pub channels_given: bool,
    pub len_given: bool,
    pub threshold_given: bool,
    pub group_given: bool,
}

/// Whether a TOML or JSON config file sets a top-level key.
pub fn mentions(path: &Path, key: &str) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let field = path.display().to_string();
    if is_json {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::config(field, e.to_string()))?;
        Ok(v.get(key).is_some())
    } else {
        let v: toml::Table = toml::from_str(&text).map_err(|e| Error::config(field, e.to_string()))?;
        Ok(v.contains_key(key))
    }
}

/// Flag, then config file, then `COCAI_SEED`.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() || file.is_some() {
        return Ok(flag.or(file));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl PipelineFlags {
    /// Defaults, overridden by the config file, overridden by flags.
    pub fn resolve(&self) -> Result<Resolved> {
        let (mut c, has) = match &self.config {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::config("config", format!("{} does not exist", p.display())));
                }
                let c = PipelineConfig::from_path(p)?;
                let has = |k: &str| mentions(p, k);
                let keys = [has("channels")?, has("target_len")?, has("threshold")?, has("group_column")?, has("seed")?];
                (c, keys)
            }
            None => (PipelineConfig::default(), [false; 5]),
        };
        let [file_channels, file_len, file_threshold, file_group, file_seed] = has;
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.threshold {
            c.threshold = v;
        }
        if let Some(v) = self.method {
            c.method = v;
        }
        if let Some(v) = self.forecaster {
            c.forecaster = v;
        }
        if !self.channels.is_empty() {
            c.channels = self.channels.clone();
        }
        if let Some(v) = self.target_len {
            c.target_len = v;
        }
        if let Some(v) = &self.group_col {
            c.group_column = (v != "none" && !v.is_empty()).then(|| v.clone());
        }
        if let Some(v) = self.min_width {
            c.min_width = v;
        }
        if !self.k_candidates.is_empty() {
            c.k_candidates = Some(self.k_candidates.clone());
        }
        if let Some(v) = self.k {
            c.k_override = Some(v);
        }
        if let Some(v) = self.rho {
            c.rho = v;
        }
        if let Some(seed) = resolve_seed(self.seed, file_seed.then_some(c.seed))? {
            c.seed = seed;
        }
        Ok(Resolved {
            channels_given: file_channels || !self.channels.is_empty(),
            len_given: file_len || self.target_len.is_some(),
            threshold_given: file_threshold || self.threshold.is_some(),
            group_given: file_group || self.group_col.is_some(),
            config: c,
        })
    }
}
