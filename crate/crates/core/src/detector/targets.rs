//! Training-target assignment and minibatch sampling for the RPN and the
//! detection head.

use rand::seq::SliceRandom;
use rand::Rng;

use super::boxes::{encode, iou, BBox, DeltaWeights, UNIT_WEIGHTS};
use crate::synth_data::BoxAnnotation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            rpn_batch: 32,
            rpn_fg_fraction: 0.25,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            roi_batch: 16,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
        }
    }
}

/// Sampled anchors with binary labels, plus regression targets for the
/// foreground subset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RpnTargets {
    pub anchors: Vec<usize>,
    pub labels: Vec<f64>,
    pub fg: Vec<(usize, [f64; 4])>,
}

/// Sampled ROIs with class labels (0 is background) and class-specific
/// regression targets `(row, class, deltas)` for foreground rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoiTargets {
    pub rois: Vec<BBox>,
    pub labels: Vec<usize>,
    pub fg: Vec<(usize, usize, [f64; 4])>,
}

fn best_match(b: &BBox, gt: &[BBox]) -> (f64, usize) {
    gt.iter()
        .enumerate()
        .map(|(j, g)| (iou(b, g), j))
        .fold(
            (0.0, usize::MAX),
            |acc, x| if x.0 > acc.0 { x } else { acc },
        )
}

fn take_random(mut v: Vec<usize>, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if v.len() > n {
        v.partial_shuffle(rng, n);
        v.truncate(n);
    }
    v
}

/// Anchors with IoU at least `rpn_fg_iou` to some box, and each box's best
/// anchors, are foreground; anchors below `rpn_bg_iou` everywhere are
/// background; the rest are ignored.
pub fn rpn_targets(
    anchors: &[BBox],
    gt: &[BBox],
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> RpnTargets {
    let matches: Vec<(f64, usize)> = anchors.iter().map(|a| best_match(a, gt)).collect();
    let mut is_fg: Vec<bool> = matches.iter().map(|m| m.0 >= cfg.rpn_fg_iou).collect();
    for g in gt {
        let ious: Vec<f64> = anchors.iter().map(|a| iou(a, g)).collect();
        let best = ious.iter().cloned().fold(0.0, f64::max);
        if best > 0.0 {
            for (i, &v) in ious.iter().enumerate() {
                if v == best {
                    is_fg[i] = true;
                }
            }
        }
    }
    let fg: Vec<usize> = (0..anchors.len()).filter(|&i| is_fg[i]).collect();
    let bg: Vec<usize> = (0..anchors.len())
        .filter(|&i| !is_fg[i] && matches[i].0 < cfg.rpn_bg_iou)
        .collect();
    let max_fg = (cfg.rpn_batch as f64 * cfg.rpn_fg_fraction).round() as usize;
    let fg = take_random(fg, max_fg, rng);
    let bg = take_random(bg, cfg.rpn_batch - fg.len(), rng);

    let mut out = RpnTargets::default();
    for &i in &fg {
        out.anchors.push(i);
        out.labels.push(1.0);
        out.fg
            .push((i, encode(&anchors[i], &gt[matches[i].1], UNIT_WEIGHTS)));
    }
    for &i in &bg {
        out.anchors.push(i);
        out.labels.push(0.0);
    }
    out
}

/// Ground-truth boxes join the proposal pool; ROIs with IoU at least
/// `roi_fg_iou` take their best box's class, all others are background.
pub fn roi_targets(
    proposals: &[BBox],
    gt: &[BoxAnnotation],
    weights: DeltaWeights,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> RoiTargets {
    let gt_boxes: Vec<BBox> = gt.iter().map(|a| a.bbox).collect();
    let pool: Vec<BBox> = proposals
        .iter()
        .copied()
        .chain(gt_boxes.iter().copied())
        .collect();
    let matches: Vec<(f64, usize)> = pool.iter().map(|b| best_match(b, &gt_boxes)).collect();
    let fg: Vec<usize> = (0..pool.len())
        .filter(|&i| matches[i].0 >= cfg.roi_fg_iou)
        .collect();
    let bg: Vec<usize> = (0..pool.len())
        .filter(|&i| matches[i].0 < cfg.roi_fg_iou)
        .collect();
    let max_fg = (cfg.roi_batch as f64 * cfg.roi_fg_fraction).round() as usize;
    let fg = take_random(fg, max_fg, rng);
    let bg = take_random(bg, cfg.roi_batch - fg.len(), rng);

    let mut out = RoiTargets::default();
    for &i in &fg {
        let g = &gt[matches[i].1];
        out.fg.push((
            out.rois.len(),
            g.class_id,
            encode(&pool[i], &g.bbox, weights),
        ));
        out.rois.push(pool[i]);
        out.labels.push(g.class_id + 1);
    }
    for &i in &bg {
        out.rois.push(pool[i]);
        out.labels.push(0);
    }
    out
}
