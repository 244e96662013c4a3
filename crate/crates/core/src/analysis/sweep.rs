//! Parameter sweeps over power normalization (FV) and codebook size (HFV).
//!
//! PCA and the GMM are fitted once per sweep; only what the swept parameter
//! touches is recomputed.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::clustering::kmeans_fit;
use crate::corpus::Dataset;
use crate::encoding::HfvOptions;
use crate::error::{Error, Result};
use crate::pipeline::{classify_encoded, encode_dataset, train_models, training_sample, Mode, Models, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub param: f64,
    /// Mean per-class accuracy on the test split.
    pub accuracy: f64,
    pub map: f64,
    pub seed: u64,
}

/// `param,accuracy,map,seed` with a header line.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("param,accuracy,map,seed\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.param, r.accuracy, r.map, r.seed);
    }
    s
}

/// Row with the highest accuracy (first one on ties).
pub fn best_row(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.accuracy >= r.accuracy => Some(b),
        _ => Some(r),
    })
}

/// Max minus min accuracy over the rows.
pub fn accuracy_spread(rows: &[SweepRow]) -> f64 {
    let max = rows.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
    let min = rows.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
    max - min
}

/// PCA and GMM fitted on the configured training sample, without a codebook.
pub fn shared_models(data: &Dataset, cfg: &PipelineConfig) -> Result<Models> {
    let sample = training_sample(data, cfg)?;
    train_models(&sample, cfg, false)
}

/// FV accuracy for each power exponent.
pub fn sweep_power(data: &Dataset, cfg: &PipelineConfig, p_grid: &[f64]) -> Result<Vec<SweepRow>> {
    if p_grid.is_empty() {
        return Err(Error::invalid("empty power grid"));
    }
    if let Some(p) = p_grid.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::invalid(format!("power exponent {p} outside (0, 1]")));
    }
    let models = shared_models(data, cfg)?;
    sweep_power_with(data, cfg, &models, p_grid)
}

pub fn sweep_power_with(data: &Dataset, cfg: &PipelineConfig, models: &Models, p_grid: &[f64]) -> Result<Vec<SweepRow>> {
    p_grid
        .par_iter()
        .map(|&p| {
            let encoded = encode_dataset(models, data, Mode::Fv, p, &cfg.hfv_options())?;
            let eval = classify_encoded(data, &encoded, &cfg.svm_options())?;
            Ok(SweepRow {
                param: p,
                accuracy: eval.metrics.mean_class_accuracy,
                map: eval.metrics.map,
                seed: cfg.seed,
            })
        })
        .collect()
}

/// HFV accuracy for each codebook size, with a codebook trained per size.
pub fn sweep_codebook(data: &Dataset, cfg: &PipelineConfig, k1_grid: &[usize]) -> Result<Vec<SweepRow>> {
    if k1_grid.is_empty() {
        return Err(Error::invalid("empty codebook grid"));
    }
    if k1_grid.contains(&0) {
        return Err(Error::invalid("codebook sizes must be at least 1"));
    }
    let sample = training_sample(data, cfg)?;
    let models = train_models(&sample, cfg, false)?;
    let projected = models.project(&sample)?;
    let hfv: HfvOptions = cfg.hfv_options();
    k1_grid
        .par_iter()
        .map(|&k1| {
            let codebook = kmeans_fit(&projected, &cfg.kmeans_options(k1))?;
            let with_codebook = Models {
                codebook: Some(codebook),
                ..models.clone()
            };
            let encoded = encode_dataset(&with_codebook, data, Mode::Hfv, cfg.power, &hfv)?;
            let eval = classify_encoded(data, &encoded, &cfg.svm_options())?;
            Ok(SweepRow {
                param: k1 as f64,
                accuracy: eval.metrics.mean_class_accuracy,
                map: eval.metrics.map,
                seed: cfg.seed,
            })
        })
        .collect()
}
