//! Detection quality and domain-distance measurements.

pub mod emd;
pub mod features;
pub mod heatmap;
pub mod map;
pub mod pad;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::DetectorModel;
use crate::scalar::Scalar;
use crate::synth_data::ImageSample;
pub use emd::{emd, hungarian};
pub use features::{collect_features, FeatureSet, Level, DEFAULT_PER_CLASS_CAP};
pub use heatmap::export_feature_heatmap;
pub use map::{compute_map, ImageResult, MapResult};
pub use pad::proxy_a_distance;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{domain} has {n} samples; at least {min} are needed for a meaningful estimate")]
    InsufficientSamples {
        domain: &'static str,
        n: usize,
        min: usize,
    },
    #[error("{0}")]
    Shape(String),
}

pub const MAP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub pad_global: Option<f64>,
    pub pad_instance: Option<f64>,
    pub emd_global: Option<f64>,
    pub emd_instance: Option<f64>,
    pub num_images: usize,
    pub num_objects: usize,
    pub warnings: Vec<String>,
}

/// Runs the detector over labelled images.
pub fn detection_results<T: Scalar>(
    model: &DetectorModel<T>,
    samples: &[ImageSample],
) -> Vec<ImageResult> {
    samples
        .iter()
        .map(|s| ImageResult {
            id: s.id.clone(),
            detections: model.detect(s),
            ground_truth: s.annotations().to_vec(),
        })
        .collect()
}

/// mAP@0.5 of the model on a labelled dataset.
pub fn evaluate_detection<T: Scalar>(
    model: &DetectorModel<T>,
    samples: &[ImageSample],
) -> EvalReport {
    let results = detection_results(model, samples);
    let m = compute_map(&results, model.cfg.num_classes, MAP_IOU);
    let mut warnings = Vec::new();
    for (c, ap) in m.per_class_ap.iter().enumerate() {
        if ap.is_none() {
            warnings.push(format!(
                "class {c}: no ground truth; AP undefined and excluded from mAP"
            ));
        }
    }
    EvalReport {
        per_class_ap: m.per_class_ap,
        map: m.map,
        num_images: samples.len(),
        num_objects: m.gt_per_class.iter().sum(),
        warnings,
        ..Default::default()
    }
}

/// PAD and EMD between source and target features at one level.
pub fn domain_distance<T: Scalar>(
    model: &DetectorModel<T>,
    source: &[ImageSample],
    target: &[ImageSample],
    level: Level,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let fs = collect_features(model, source, level, DEFAULT_PER_CLASS_CAP, seed);
    let ft = collect_features(
        model,
        target,
        level,
        DEFAULT_PER_CLASS_CAP,
        seed.wrapping_add(1),
    );
    let pad = proxy_a_distance(&fs.rows, &ft.rows, seed)?;
    let e = emd(&fs.rows, &ft.rows, seed);
    let mut warnings: Vec<String> = fs.warnings.iter().map(|w| format!("source {w}")).collect();
    warnings.extend(ft.warnings.iter().map(|w| format!("target {w}")));
    let mut r = EvalReport {
        num_images: source.len() + target.len(),
        warnings,
        ..Default::default()
    };
    match level {
        Level::Global => {
            r.pad_global = Some(pad);
            r.emd_global = Some(e);
        }
        Level::Instance => {
            r.pad_instance = Some(pad);
            r.emd_instance = Some(e);
        }
    }
    Ok(r)
}
