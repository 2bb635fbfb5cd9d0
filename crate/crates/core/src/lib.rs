//! Conformal multi-step prediction regions and copula-based anomaly scores
//! for multivariate time series.

pub mod anomaly;
pub mod conformal;
pub mod copula;
pub mod error;
pub mod forecaster;
pub mod pipeline;
pub mod plot;
pub mod series;
pub mod splines;
pub mod stats;
pub mod synth;

pub use anomaly::{
    apply_min_width, batch_score, calibrate_anomaly, distance_series, score, AnomalyConfig, AnomalyModel, AnomalyReport,
    Audit, BatchResult, BatchSummary, FlagBreakdown, SkipRecord,
};
pub use conformal::{
    calibrate_copula_cpts, conformal_quantile, conformalize, joint_coverage, ncf_cqr, CalibrationMethod,
    ConformalModel, ConformalizedRegion, NonconformityScores,
};
pub use copula::{copula_cdf, fit_gaussian, fit_student_t, CdfEstimate, CopulaKind, CopulaModel};
pub use error::{Error, Result};
pub use forecaster::{
    fit_climatology, fit_persistence, Forecaster, ForecasterKind, ForecasterModel, QuantileRange,
};
pub use series::{
    extract_target, load_csv, read_csv, split_dataset, write_csv, Context, CsvSchema, DatasetSplit,
    MultivariateSeries, SplitFractions, SplitPart, Target, TargetSpec, Timestamp,
};
pub use splines::{build_basis, fit_coefficients, select_k, BSplineBasis, CoefficientVector, ElbowCurve};
pub use pipeline::{
    calibrate, evaluate, model_key, score_corpus, Bundle, EvalMetrics, Manifest, PipelineConfig, PipelinePaths,
    ScoreOutput,
};
pub use synth::{apply_plan, generate, inject, AnomalyInjection, AnomalyKind, InjectionPlan, SeriesLabel, SynthConfig};
