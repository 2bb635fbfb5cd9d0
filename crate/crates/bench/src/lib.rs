//! Shared fixtures for the benchmarks.

use cocai::pipeline::channel_scores;
use cocai::{
    calibrate_anomaly, calibrate_copula_cpts, fit_climatology, generate, AnomalyConfig, AnomalyModel,
    CalibrationMethod, ConformalModel, MultivariateSeries, NonconformityScores, SynthConfig, TargetSpec,
};
use cocai::forecaster::Climatology;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus(n: usize, seed: u64) -> Vec<MultivariateSeries> {
    generate(&SynthConfig {
        n_series: n,
        seed,
        ..SynthConfig::default()
    })
    .expect("synthetic corpus")
}

/// Calibrated forecaster, conformal and anomaly models plus the CP scores.
pub struct Fitted {
    pub forecaster: Climatology,
    pub scores: NonconformityScores,
    pub cp: ConformalModel,
    pub ad: AnomalyModel,
}

pub fn fitted(seed: u64) -> Fitted {
    let all = corpus(2500, seed);
    let r: Vec<&MultivariateSeries> = all.iter().collect();
    let spec = TargetSpec::new(vec![0], 40).expect("spec");
    let forecaster = fit_climatology(&r[..500], &spec).expect("forecaster");
    let scores = channel_scores(&r[500..1500], &forecaster, 0, 0.1).expect("scores");
    let cp = calibrate_copula_cpts(&scores, 0.1, seed, CalibrationMethod::BoundedCopula).expect("cp");
    let ad = calibrate_anomaly(&r[1500..], &forecaster, &cp, &AnomalyConfig::default()).expect("ad");
    Fitted { forecaster, scores, cp, ad }
}

/// `n × k` matrix of pseudo-observations with a shared factor.
pub fn pseudo_obs(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>());
    let common: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mixed = DMatrix::from_fn(n, k, |i, j| 0.5 * raw[(i, j)] + 0.5 * common[i]);
    let mut out = DMatrix::zeros(n, k);
    for j in 0..k {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| mixed[(a, j)].total_cmp(&mixed[(b, j)]));
        for (rank, &i) in idx.iter().enumerate() {
            out[(i, j)] = (rank + 1) as f64 / (n + 1) as f64;
        }
    }
    out
}
