//! `cocai`: synthesize corpora, calibrate model bundles, score series and
//! evaluate flags against injected labels.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use cocai::pipeline::{elbow_curves, plot_reports, reports_from_jsonl, reports_to_jsonl};
use cocai::splines::nested_candidates;
use cocai::synth::{read_labels, write_labels};
use cocai::{
    apply_plan, calibrate, evaluate, generate, load_csv, score_corpus, write_csv, Bundle, CsvSchema, Error,
    InjectionPlan, Result, SynthConfig,
};

use config::{resolve_seed, PipelineFlags};

#[derive(Debug, Parser)]
#[command(name = "cocai", version, about = "Conformal prediction regions and copula anomaly scores for multivariate series")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus, optionally with injected anomalies.
    Synth(SynthArgs),
    /// Split a corpus and write a calibrated model bundle.
    Calibrate(CalibrateArgs),
    /// Score series with a bundle; writes reports, summary and plots.
    Score(ScoreArgs),
    /// Compare reports with injected labels.
    Eval(EvalArgs),
    /// Emit the RSS-versus-K curve used to pick the spline basis size.
    Elbow(ElbowArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic corpus config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of series.
    #[arg(long)]
    n: Option<usize>,
    /// Steps per series.
    #[arg(long = "length")]
    length: Option<usize>,
    /// Number of channels.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Injection plan (JSON, or TOML by extension).
    #[arg(long)]
    inject: Option<PathBuf>,
    /// Output corpus CSV.
    #[arg(long, short)]
    out: PathBuf,
    /// Labels CSV; defaults to `<out stem>.labels.csv` when injecting.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Input corpus CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Bundle directory to create.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Bundle directory.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Input corpus CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Write one SVG per report under `<out>/plots`.
    #[arg(long)]
    plot: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// `reports.jsonl`, or the directory holding it.
    #[arg(long)]
    reports: PathBuf,
    /// Labels CSV written by `synth --inject`.
    #[arg(long)]
    labels: PathBuf,
    /// Re-threshold the reports before counting.
    #[arg(long)]
    threshold: Option<f64>,
    /// Write metrics JSON here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ElbowArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Corpus CSV; with it the curve is recomputed on the anomaly
    /// calibration split, otherwise the stored curve is printed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Candidate basis counts, comma-separated.
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    group_col: Option<String>,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn require_file(field: &str, path: Option<&Path>) -> Result<PathBuf> {
    let path = path.ok_or_else(|| Error::config(field, "required"))?;
    if !path.exists() {
        return Err(Error::config(field, format!("{} does not exist", path.display())));
    }
    Ok(path.to_path_buf())
}

fn create_file(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_file(path)?
        .write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

fn schema(group_column: Option<&str>) -> CsvSchema {
    CsvSchema {
        channels: Vec::new(),
        group_column: group_column.map(str::to_string),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_path(require_file("config", Some(p))?)?,
        None => SynthConfig::default(),
    };
    let file_seed = a.config.as_deref().map(|p| config::mentions(p, "seed")).transpose()?.unwrap_or(false);
    cfg.n_series = a.n.unwrap_or(cfg.n_series);
    cfg.t = a.length.unwrap_or(cfg.t);
    cfg.d = a.d.unwrap_or(cfg.d);
    cfg.seed = resolve_seed(a.seed, file_seed.then_some(cfg.seed))?.unwrap_or(cfg.seed);
    let corpus = generate(&cfg)?;
    let group_col = (!cfg.groups.is_empty()).then_some(cocai::series::DEFAULT_GROUP_COLUMN);
    let (corpus, labels) = match &a.inject {
        Some(p) => {
            let plan = InjectionPlan::from_path(require_file("inject", Some(p))?)?;
            let scales: Vec<f64> = cfg.recipes().iter().map(|r| r.noise_std).collect();
            let (c, l) = apply_plan(&corpus, &plan, &scales, cfg.seed)?;
            (c, Some(l))
        }
        None => (corpus, None),
    };
    write_csv(create_file(&a.out)?, &corpus, group_col)?;
    if let Some(labels) = labels {
        let path = a.labels.unwrap_or_else(|| a.out.with_extension("labels.csv"));
        write_labels(create_file(&path)?, &labels)?;
        let injected = labels.iter().filter(|l| l.kind.is_some()).count();
        eprintln!("wrote {} series ({injected} injected) to {}; labels in {}", corpus.len(), a.out.display(), path.display());
    } else {
        eprintln!("wrote {} series to {}", corpus.len(), a.out.display());
    }
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let resolved = a.pipeline.resolve()?;
    let mut cfg = resolved.config;
    let data = require_file("data", a.data.as_deref().or(cfg.paths.data.as_deref()))?;
    let out = a
        .out
        .or_else(|| cfg.paths.models.clone())
        .ok_or_else(|| Error::config("out", "bundle directory required (--out or paths.models)"))?;
    cfg.paths.data = Some(data.clone());
    let corpus = load_csv(&data, &schema(cfg.group_column.as_deref()))?;
    let mut bundle = calibrate(&corpus, &cfg)?;
    bundle.write(&out)?;
    for (key, cm) in &bundle.conformal {
        let am = &bundle.anomaly[key];
        eprintln!(
            "{key}: sum eps {:.4}, cal2 coverage {:.3}{}, K {}, nu {:.1}",
            cm.total_adjustment(),
            cm.achieved_coverage,
            if cm.infeasible { " (infeasible)" } else { "" },
            am.k(),
            am.student_t.nu().unwrap_or(f64::NAN)
        );
    }
    eprintln!("bundle written to {}", out.display());
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let resolved = a.pipeline.resolve()?;
    let cfg = &resolved.config;
    let bundle_dir = require_file("bundle", a.bundle.as_deref().or(cfg.paths.models.as_deref()))?;
    let data = require_file("data", a.data.as_deref().or(cfg.paths.data.as_deref()))?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.paths.reports.clone())
        .ok_or_else(|| Error::config("out", "report directory required (--out or paths.reports)"))?;
    let bundle = Bundle::load(&bundle_dir)?;
    let bcfg = &bundle.manifest.config;
    if resolved.channels_given || resolved.len_given {
        let names = &bundle.manifest.channel_names;
        let mut req = cfg.clone();
        if !resolved.channels_given {
            req.channels = bundle.manifest.target.channels.iter().map(|&c| names[c].clone()).collect();
        }
        if !resolved.len_given {
            req.target_len = bundle.manifest.target.length;
        }
        bundle.check_compatible(&[], Some(&req.target_spec(names)?))?;
    }
    let threshold = if resolved.threshold_given { cfg.threshold } else { bcfg.threshold };
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config("threshold", format!("must be in (0,1), got {threshold}")));
    }
    let group_col = if resolved.group_given { cfg.group_column.clone() } else { bcfg.group_column.clone() };
    let corpus = load_csv(&data, &schema(group_col.as_deref()))?;
    let result = score_corpus(&bundle, &corpus, threshold)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join("reports.jsonl"), &reports_to_jsonl(&result.reports)?)?;
    let summary_path = out.join("summary.csv");
    result
        .summary
        .write_csv(create_file(&summary_path)?)
        .map_err(|e| Error::io(&summary_path, e))?;
    let mut skipped = String::from("series_id,reason\n");
    for s in &result.skipped {
        skipped.push_str(&format!("{},\"{}\"\n", s.series_id, s.reason.replace('"', "\"\"")));
    }
    write_text(&out.join("skipped.csv"), &skipped)?;
    write_text(&out.join("per_model.json"), &serde_json::to_string_pretty(&result.per_model)?)?;
    if a.plot {
        for (name, svg) in plot_reports(&bundle, &corpus, &result.reports)? {
            write_text(&out.join("plots").join(name), &svg)?;
        }
    }
    let s = &result.summary;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "scored {} reports ({} skipped): coverage {} (EQR {}), flag rate {} at threshold {threshold}",
        s.n_scored,
        s.n_skipped,
        fmt(s.coverage),
        fmt(s.eqr_coverage),
        fmt(s.flag_rate)
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut reports_path = require_file("reports", Some(&a.reports))?;
    if reports_path.is_dir() {
        reports_path = require_file("reports", Some(&reports_path.join("reports.jsonl")))?;
    }
    let labels_path = require_file("labels", Some(&a.labels))?;
    let text = fs::read_to_string(&reports_path).map_err(|e| Error::io(&reports_path, e))?;
    let mut reports = reports_from_jsonl(&text)?;
    if let Some(t) = a.threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::config("threshold", format!("must be in (0,1), got {t}")));
        }
        reports = reports.iter().map(|r| r.rethreshold(t)).collect();
    }
    let file = fs::File::open(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let labels = read_labels(file)?;
    let metrics = evaluate(&reports, &labels)?;
    let json = serde_json::to_string_pretty(&metrics)? + "\n";
    match &a.out {
        Some(p) => write_text(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn cmd_elbow(a: ElbowArgs) -> Result<()> {
    let bundle_dir = require_file("bundle", Some(&a.bundle))?;
    let bundle = Bundle::load(&bundle_dir)?;
    let curves = match &a.data {
        Some(p) => {
            let data = require_file("data", Some(p))?;
            let group = a.group_col.clone().or_else(|| bundle.manifest.config.group_column.clone());
            let corpus = load_csv(&data, &schema(group.as_deref()))?;
            let candidates = if a.candidates.is_empty() {
                nested_candidates(bundle.manifest.target.length)
            } else {
                a.candidates.clone()
            };
            let rho = a.rho.unwrap_or(bundle.manifest.config.rho);
            elbow_curves(&bundle, &corpus, &candidates, rho)?
        }
        None => bundle
            .anomaly
            .iter()
            .map(|(k, m)| (k.clone(), m.elbow.clone()))
            .collect(),
    };
    let mut csv = String::from("model,K,total_rss,selected\n");
    for (key, c) in &curves {
        for &(k, rss) in &c.curve {
            csv.push_str(&format!("{key},{k},{rss},{}\n", k == c.k_star));
        }
    }
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Elbow(a) => cmd_elbow(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
