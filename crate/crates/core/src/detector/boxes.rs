//! Axis-aligned boxes, IoU, greedy NMS, delta encoding and anchor grids.

use serde::{Deserialize, Serialize};

/// Corner-form box in pixel coordinates, `x1 < x2`, `y1 < y2` when valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn cx(&self) -> f64 {
        (self.x1 + self.x2) / 2.0
    }

    pub fn cy(&self) -> f64 {
        (self.y1 + self.y2) / 2.0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices sorted by descending score, ties broken by lower index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; every kept pair has IoU at most `thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Regression-target scaling `(wx, wy, ww, wh)`.
pub type DeltaWeights = [f64; 4];

pub const UNIT_WEIGHTS: DeltaWeights = [1.0, 1.0, 1.0, 1.0];

/// Upper bound on `dw`, `dh` before exponentiation.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Deltas that move `reference` onto `target`:
/// `dx = (gx - ax) / aw`, `dw = ln(gw / aw)`, each multiplied by its weight.
pub fn encode(reference: &BBox, target: &BBox, weights: DeltaWeights) -> [f64; 4] {
    let (aw, ah) = (reference.width(), reference.height());
    [
        weights[0] * (target.cx() - reference.cx()) / aw,
        weights[1] * (target.cy() - reference.cy()) / ah,
        weights[2] * (target.width() / aw).ln(),
        weights[3] * (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`]: `cx' = cx + dx w`, `w' = w exp(dw)`.
pub fn decode(reference: &BBox, deltas: [f64; 4], weights: DeltaWeights) -> BBox {
    let (aw, ah) = (reference.width(), reference.height());
    let dx = deltas[0] / weights[0];
    let dy = deltas[1] / weights[1];
    let dw = (deltas[2] / weights[2]).min(DELTA_CLAMP);
    let dh = (deltas[3] / weights[3]).min(DELTA_CLAMP);
    BBox::from_center(
        reference.cx() + dx * aw,
        reference.cy() + dy * ah,
        aw * dw.exp(),
        ah * dh.exp(),
    )
}

/// Anchors over a `fh x fw` grid with the given stride. Index layout is
/// `(y * fw + x) * A + a` with `a = scale_index * ratios.len() + ratio_index`;
/// `ratio` is height over width.
pub fn anchor_grid(fh: usize, fw: usize, stride: f64, scales: &[f64], ratios: &[f64]) -> Vec<BBox> {
    let mut out = Vec::with_capacity(fh * fw * scales.len() * ratios.len());
    for y in 0..fh {
        for x in 0..fw {
            let (cx, cy) = ((x as f64 + 0.5) * stride, (y as f64 + 0.5) * stride);
            for &s in scales {
                for &r in ratios {
                    out.push(BBox::from_center(cx, cy, s / r.sqrt(), s * r.sqrt()));
                }
            }
        }
    }
    out
}
