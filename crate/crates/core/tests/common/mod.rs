//! Independent reference implementations shared by the property and
//! acceptance tests.
#![allow(dead_code)]

pub mod gradcheck;

use ddf_core::detector::boxes::{iou, BBox};
use ddf_core::detector::Detection;
use ddf_core::eval::ImageResult;
use ddf_core::synth_data::BoxAnnotation;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Greedy NMS by suppression marks: walk boxes by descending score (lower
/// index first on ties) and strike every later box overlapping a survivor.
pub fn nms_reference(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    // insertion sort keeps the reference free of the library's comparator
    for i in 1..n {
        let mut j = i;
        while j > 0 && {
            let (a, b) = (order[j - 1], order[j]);
            scores[b] > scores[a] || (scores[b] == scores[a] && b < a)
        } {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if iou(&boxes[i], &boxes[j]) > thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// AP by explicit enumeration: the precision at every rank, the envelope as
/// a max over all later ranks, summed at each true positive.
pub fn ap_reference(images: &[ImageResult], class: usize, thresh: f64) -> Option<f64> {
    let num_gt: usize = images
        .iter()
        .flat_map(|im| &im.ground_truth)
        .filter(|g| g.class_id == class)
        .count();
    if num_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, &str, usize, usize)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for (j, d) in im.detections.iter().enumerate() {
            if d.class_id == class {
                dets.push((d.score, im.id.as_str(), j, i));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut taken: Vec<Vec<bool>> = images
        .iter()
        .map(|im| vec![false; im.ground_truth.len()])
        .collect();
    let mut hits = Vec::new();
    for &(_, _, j, i) in &dets {
        let d = &images[i].detections[j];
        let mut best = None;
        let mut best_iou = thresh;
        for (g, gt) in images[i].ground_truth.iter().enumerate() {
            if gt.class_id == class && !taken[i][g] {
                let o = iou(&d.bbox, &gt.bbox);
                if o >= best_iou && (best.is_none() || o > best_iou) {
                    best = Some(g);
                    best_iou = o;
                }
            }
        }
        if let Some(g) = best {
            taken[i][g] = true;
        }
        hits.push(best.is_some());
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let envelope = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += envelope / num_gt as f64;
        }
    }
    Some(ap)
}

pub fn map_reference(
    images: &[ImageResult],
    num_classes: usize,
    thresh: f64,
) -> (Vec<Option<f64>>, Option<f64>) {
    let aps: Vec<Option<f64>> = (0..num_classes)
        .map(|c| ap_reference(images, c, thresh))
        .collect();
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    (aps, map)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.gen_range(0.0..50.0);
    let y1 = rng.gen_range(0.0..50.0);
    BBox::new(
        x1,
        y1,
        x1 + rng.gen_range(5.0..30.0),
        y1 + rng.gen_range(5.0..30.0),
    )
}

/// A few images with ground truth and detections, many of them jittered
/// copies of the ground truth so that matches, duplicates and misses occur.
pub fn random_map_instance(rng: &mut ChaCha8Rng, num_classes: usize) -> Vec<ImageResult> {
    let n_images = rng.gen_range(1..5);
    (0..n_images)
        .map(|i| {
            let gt: Vec<BoxAnnotation> = (0..rng.gen_range(0..4))
                .map(|_| BoxAnnotation {
                    class_id: rng.gen_range(0..num_classes),
                    bbox: random_box(rng),
                })
                .collect();
            let mut dets = Vec::new();
            for g in &gt {
                for _ in 0..rng.gen_range(0..3) {
                    let j = |rng: &mut ChaCha8Rng| rng.gen_range(-4.0..4.0);
                    let b = BBox::new(
                        g.bbox.x1 + j(rng),
                        g.bbox.y1 + j(rng),
                        g.bbox.x2 + j(rng),
                        g.bbox.y2 + j(rng),
                    );
                    let class = if rng.gen_bool(0.8) {
                        g.class_id
                    } else {
                        rng.gen_range(0..num_classes)
                    };
                    dets.push(Detection {
                        bbox: b,
                        class_id: class,
                        score: rng.gen_range(0.0..1.0),
                    });
                }
            }
            for _ in 0..rng.gen_range(0..3) {
                dets.push(Detection {
                    bbox: random_box(rng),
                    class_id: rng.gen_range(0..num_classes),
                    score: rng.gen_range(0.0..1.0),
                });
            }
            ImageResult {
                id: format!("img{i}"),
                detections: dets,
                ground_truth: gt,
            }
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Minimum mean matching cost over every permutation (Heap's algorithm).
pub fn emd_reference(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    assert_eq!(n, b.len());
    if n == 0 {
        return 0.0;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &j)| euclid(&a[i], &b[j]))
            .sum::<f64>()
    };
    let mut best = cost(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best / n as f64
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect()
}
