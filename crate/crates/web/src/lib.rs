//! Browser demo: preview the synthetic domains, compute continual-learning
//! metrics from a matrix CSV and train a small two-domain sequence.

use masseg_core::benchmark::default_four_domain_suite;
use masseg_core::metrics::{cl_metrics, TrainTestMatrix};
use masseg_core::regularization::{StrategyConfig, StrategyKind};
use masseg_core::trainer::{run_sequence, LrDecay, SequenceOptions, SequenceSpec, TrainSchedule};
use masseg_core::SegNetConfig;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Longest demo run accepted, in epochs per domain.
pub const MAX_DEMO_EPOCHS: usize = 24;

/// Eval image `image` of domain `domain` (0-based) of the suite generated
/// from `suite_seed`, as JSON with `height`, `width`, row-major `pixels`
/// in `[0, 1]`, `labels` and the domain's `shift`.
pub fn domain_preview(suite_seed: u64, domain: usize, image: usize) -> Result<String, String> {
    let suite = default_four_domain_suite(suite_seed).map_err(|e| e.to_string())?;
    let pair = suite
        .get(domain)
        .ok_or_else(|| format!("domain {domain} out of range (suite has {})", suite.len()))?;
    let ds = &pair.eval;
    let img = ds
        .images
        .get(image)
        .ok_or_else(|| format!("image {image} out of range (domain has {})", ds.len()))?;
    let s = &ds.shift;
    Ok(json!({
        "domain": domain + 1,
        "height": ds.height,
        "width": ds.width,
        "num_classes": ds.num_classes,
        "pixels": img.data(),
        "labels": ds.labels[image],
        "shift": {
            "intensity_scale": s.intensity_scale,
            "intensity_bias": s.intensity_bias,
            "noise_std": s.noise_std,
            "blur_radius": s.blur_radius,
            "structure_scale": s.structure_scale,
            "ring_artifact": s.ring_artifact,
        },
    })
    .to_string())
}

/// Metrics JSON for a train-test matrix CSV (`domain_1,...` header).
pub fn metrics_from_csv(csv: &str) -> Result<String, String> {
    let r = TrainTestMatrix::from_csv(csv).map_err(|e| e.to_string())?;
    let m = cl_metrics(&r).map_err(|e| e.to_string())?;
    serde_json::to_string(&m).map_err(|e| e.to_string())
}

/// Trains `strategy` over the first two suite domains with the default network
/// and returns the train-test matrix and its metrics as JSON.
pub fn two_domain_run(strategy: &str, seed: u64, epochs: usize) -> Result<String, String> {
    let kind: StrategyKind = strategy
        .parse()
        .map_err(|e: masseg_core::Error| e.to_string())?;
    if epochs == 0 || epochs > MAX_DEMO_EPOCHS {
        return Err(format!("epochs must be in 1..={MAX_DEMO_EPOCHS}"));
    }
    let suite = default_four_domain_suite(seed).map_err(|e| e.to_string())?;
    let train: Vec<_> = suite[..2].iter().map(|p| p.train.clone()).collect();
    let eval: Vec<_> = suite[..2].iter().map(|p| p.eval.clone()).collect();
    let spec = SequenceSpec {
        train: &train,
        eval: &eval,
        network: SegNetConfig::default(),
        strategy: StrategyConfig::new(kind),
        schedule: TrainSchedule {
            epochs_per_domain: epochs,
            first_domain_decay: LrDecay {
                factor: 0.5,
                every_epochs: epochs.div_ceil(3),
            },
            seed,
            ..TrainSchedule::desk_scale()
        },
    };
    let result = run_sequence(&spec, SequenceOptions::default()).map_err(|e| e.to_string())?;
    let matrix = result.matrix().map_err(|e| e.to_string())?;
    let metrics = cl_metrics(&matrix).map_err(|e| e.to_string())?;
    let frozen = result.freeze_history.last().map(|m| m.frozen_fraction());
    Ok(json!({
        "strategy": kind.name(),
        "seed": seed,
        "epochs": epochs,
        "parameters": result.network.num_params(),
        "R": result.rows,
        "metrics": metrics,
        "loss_per_epoch": result.logs.iter().map(|l| l.epoch_means()).collect::<Vec<_>>(),
        "frozen_fraction": frozen,
    })
    .to_string())
}

#[wasm_bindgen(js_name = domainPreview)]
pub fn domain_preview_js(suite_seed: u32, domain: u32, image: u32) -> Result<String, JsError> {
    domain_preview(suite_seed as u64, domain as usize, image as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = metricsFromCsv)]
pub fn metrics_from_csv_js(csv: &str) -> Result<String, JsError> {
    metrics_from_csv(csv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = twoDomainRun)]
pub fn two_domain_run_js(strategy: &str, seed: u32, epochs: u32) -> Result<String, JsError> {
    two_domain_run(strategy, seed as u64, epochs as usize).map_err(|e| JsError::new(&e))
}
