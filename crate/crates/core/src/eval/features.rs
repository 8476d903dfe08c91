//! Feature collection for domain-distance measurements.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::detector::boxes::{iou, BBox};
use crate::detector::{DetectorModel, GradMask};
use crate::scalar::Scalar;
use crate::synth_data::ImageSample;

pub const DEFAULT_PER_CLASS_CAP: usize = 100;
pub const FOREGROUND_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Global,
    Instance,
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(Level::Global),
            "instance" => Ok(Level::Instance),
            other => Err(format!(
                "unknown level {other:?}; expected global or instance"
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    /// Rows kept per class (instance level only).
    pub per_class: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Sorted indices of a seeded random subset of `0..n` of size `min(n, cap)`.
pub fn capped_selection(n: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// Shared-path proposals and their instance vectors for one image.
pub fn proposal_instances<T: Scalar>(
    model: &DetectorModel<T>,
    img: &ImageSample,
) -> (Vec<BBox>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let mask = GradMask::NONE;
    let x = tape.constant(model.image_tensor(img));
    let b = model.encode_base(&mut tape, x, mask);
    let s = model.encode_shared(&mut tape, b, mask);
    let (o, d) = model.rpn_head(&mut tape, s, mask);
    let boxes: Vec<BBox> = model
        .proposals(tape.value(o), tape.value(d), model.cfg.rpn_top_n_test)
        .iter()
        .map(|p| p.bbox)
        .collect();
    let inst = model.instance_vectors(&mut tape, s, &boxes, mask);
    let v = tape.value(inst);
    let rows = (0..boxes.len())
        .map(|i| v.row(i).iter().map(|x| x.f64()).collect())
        .collect();
    (boxes, rows)
}

/// Global level: spatial mean of the shared features, one row per image.
/// Instance level: instance vectors of proposals overlapping a ground-truth
/// box at IoU >= 0.5, bucketed by that box's class and capped per class by a
/// seeded random selection. Labels are used only for bucketing.
pub fn collect_features<T: Scalar>(
    model: &DetectorModel<T>,
    samples: &[ImageSample],
    level: Level,
    per_class_cap: usize,
    seed: u64,
) -> FeatureSet {
    match level {
        Level::Global => {
            let rows = samples
                .iter()
                .map(|img| {
                    let f = model.shared_features(img);
                    let c = f.shape()[0];
                    let hw = f.len() / c;
                    f.data()
                        .chunks(hw)
                        .map(|ch| ch.iter().map(|v| v.f64()).sum::<f64>() / hw as f64)
                        .collect()
                })
                .collect();
            FeatureSet {
                rows,
                ..Default::default()
            }
        }
        Level::Instance => {
            let nc = model.cfg.num_classes;
            let mut buckets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); nc];
            for img in samples {
                let gt = img.annotations();
                let (boxes, rows) = proposal_instances(model, img);
                for (b, row) in boxes.iter().zip(rows) {
                    let best = gt.iter().map(|g| (iou(b, &g.bbox), g.class_id)).fold(
                        None,
                        |acc: Option<(f64, usize)>, x| match acc {
                            Some(a) if a.0 >= x.0 => Some(a),
                            _ => Some(x),
                        },
                    );
                    if let Some((o, class)) = best {
                        if o >= FOREGROUND_IOU && class < nc {
                            buckets[class].push(row);
                        }
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = FeatureSet::default();
            for (class, bucket) in buckets.into_iter().enumerate() {
                if bucket.is_empty() {
                    out.warnings.push(format!(
                        "class {class}: no proposals matched ground truth; skipped"
                    ));
                    out.per_class.push(0);
                    continue;
                }
                let keep = capped_selection(bucket.len(), per_class_cap, &mut rng);
                out.per_class.push(keep.len());
                out.rows.extend(keep.into_iter().map(|i| bucket[i].clone()));
            }
            out
        }
    }
}
