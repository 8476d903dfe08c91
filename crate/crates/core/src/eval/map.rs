//! Mean average precision at a fixed IoU threshold, all-point interpolation.

use serde::{Deserialize, Serialize};

use crate::detector::boxes::iou;
use crate::detector::Detection;
use crate::synth_data::BoxAnnotation;

/// Detections and ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BoxAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub gt_per_class: Vec<usize>,
    /// Mean over classes with ground truth; `None` if there are none.
    pub map: Option<f64>,
}

/// Area under the precision envelope for a ranked list of hit/miss flags.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

/// Per class: rank detections by score (ties by image id, then detection
/// index), match each to the unmatched ground truth of highest IoU at or
/// above `iou_thresh`, and integrate precision over recall.
pub fn compute_map(images: &[ImageResult], num_classes: usize, iou_thresh: f64) -> MapResult {
    let mut per_class_ap = Vec::with_capacity(num_classes);
    let mut gt_per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let num_gt: usize = images
            .iter()
            .map(|im| {
                im.ground_truth
                    .iter()
                    .filter(|g| g.class_id == class)
                    .count()
            })
            .sum();
        gt_per_class.push(num_gt);
        if num_gt == 0 {
            per_class_ap.push(None);
            continue;
        }
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (i, im) in images.iter().enumerate() {
            for (j, d) in im.detections.iter().enumerate() {
                if d.class_id == class {
                    ranked.push((i, j));
                }
            }
        }
        ranked.sort_by(|&(ia, ja), &(ib, jb)| {
            let (a, b) = (&images[ia].detections[ja], &images[ib].detections[jb]);
            b.score
                .total_cmp(&a.score)
                .then_with(|| images[ia].id.cmp(&images[ib].id))
                .then(ja.cmp(&jb))
        });
        let mut used: Vec<Vec<bool>> = images
            .iter()
            .map(|im| vec![false; im.ground_truth.len()])
            .collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(i, j)| {
                let d = &images[i].detections[j];
                let mut best: Option<(f64, usize)> = None;
                for (g, gt) in images[i].ground_truth.iter().enumerate() {
                    if gt.class_id != class || used[i][g] {
                        continue;
                    }
                    let o = iou(&d.bbox, &gt.bbox);
                    if o >= iou_thresh && best.is_none_or(|(b, _)| o > b) {
                        best = Some((o, g));
                    }
                }
                match best {
                    Some((_, g)) => {
                        used[i][g] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class_ap.push(Some(average_precision(&hits, num_gt)));
    }
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    MapResult {
        per_class_ap,
        gt_per_class,
        map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::boxes::BBox;

    fn gt(b: BBox) -> BoxAnnotation {
        BoxAnnotation {
            class_id: 0,
            bbox: b,
        }
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            class_id: 0,
            score,
        }
    }

    #[test]
    fn single_detection_cases() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        let im = |d: Vec<Detection>| {
            vec![ImageResult {
                id: "a".into(),
                detections: d,
                ground_truth: vec![gt(b)],
            }]
        };
        assert_eq!(compute_map(&im(vec![det(b, 0.9)]), 1, 0.5).map, Some(1.0));
        assert_eq!(compute_map(&im(vec![det(far, 0.9)]), 1, 0.5).map, Some(0.0));
        assert_eq!(
            compute_map(&im(vec![det(b, 0.9), det(far, 0.8)]), 1, 0.5).map,
            Some(1.0)
        );
        assert_eq!(
            compute_map(&im(vec![det(far, 0.9), det(b, 0.8)]), 1, 0.5).map,
            Some(0.5)
        );
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let ims = vec![ImageResult {
            id: "a".into(),
            detections: vec![det(b, 0.5)],
            ground_truth: vec![gt(b)],
        }];
        let r = compute_map(&ims, 3, 0.5);
        assert_eq!(r.per_class_ap, vec![Some(1.0), None, None]);
        assert_eq!(r.map, Some(1.0));
        assert_eq!(compute_map(&[], 2, 0.5).map, None);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let ims = vec![ImageResult {
            id: "a".into(),
            detections: vec![det(b, 0.9), det(b, 0.8)],
            ground_truth: vec![gt(b), gt(BBox::new(40.0, 40.0, 50.0, 50.0))],
        }];
        // hits [T, F], 2 GT: precision envelope 1 up to recall 0.5
        assert_eq!(compute_map(&ims, 1, 0.5).map, Some(0.5));
    }
}
