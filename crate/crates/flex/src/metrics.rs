//! Average-precision evaluation: greedy confidence-ordered matching per
//! class at each IoU threshold, 101-point interpolated AP, axis-aligned IoU.

use crate::pyramid::Roi;

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub image: usize,
    pub bbox: Roi,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: Roi,
    pub class: usize,
}

/// AP for one class at one IoU threshold (101-point interpolation).
/// Returns None when the class has no ground truth.
pub fn average_precision(
    detections: &[Detection],
    truths: &[GroundTruth],
    class: usize,
    iou_threshold: f64,
) -> Option<f64> {
    let gt_idx: Vec<usize> = truths
        .iter()
        .enumerate()
        .filter(|(_, g)| g.class == class)
        .map(|(i, _)| i)
        .collect();
    if gt_idx.is_empty() {
        return None;
    }

    let mut dets: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class == class)
        .collect();
    // confidence order, with a stable index tiebreak for determinism
    dets.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });

    let mut matched = vec![false; truths.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(dets.len()); // (recall, precision)
    let n_gt = gt_idx.len() as f64;
    for (_, det) in &dets {
        let mut best: Option<(usize, f64)> = None;
        for &gi in &gt_idx {
            if matched[gi] || truths[gi].image != det.image {
                continue;
            }
            let iou = det.bbox.iou(&truths[gi].bbox);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / n_gt, tp as f64 / (tp + fp) as f64));
    }

    // precision envelope, then 101-point interpolation
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        ap += p;
    }
    Some(ap / 101.0)
}

/// AP aggregates across classes and thresholds.
#[derive(Debug, Clone)]
pub struct ApSummary {
    /// AP at IoU 0.50, averaged over classes with ground truth.
    pub ap50: f64,
    /// AP at IoU 0.75.
    pub ap75: f64,
    /// Mean over the ten 0.50:0.05:0.95 threshold APs.
    pub map: f64,
    /// Per-class AP averaged over thresholds; NaN for absent classes.
    pub per_class: Vec<f64>,
}

pub fn summarize(detections: &[Detection], truths: &[GroundTruth], classes: usize) -> ApSummary {
    let thresholds = coco_thresholds();
    let mut per_thr_means = Vec::with_capacity(thresholds.len());
    let mut per_class_acc = vec![0.0f64; classes];
    let mut per_class_n = vec![0usize; classes];
    let mut ap50 = 0.0;
    let mut ap75 = 0.0;
    for (ti, thr) in thresholds.iter().enumerate() {
        let mut acc = 0.0;
        let mut n = 0usize;
        for class in 0..classes {
            if let Some(ap) = average_precision(detections, truths, class, *thr) {
                acc += ap;
                n += 1;
                per_class_acc[class] += ap;
                per_class_n[class] += 1;
            }
        }
        let mean = if n > 0 { acc / n as f64 } else { 0.0 };
        per_thr_means.push(mean);
        if ti == 0 {
            ap50 = mean;
        }
        if (*thr - 0.75).abs() < 1e-9 {
            ap75 = mean;
        }
    }
    let map = per_thr_means.iter().sum::<f64>() / per_thr_means.len() as f64;
    let per_class = (0..classes)
        .map(|c| {
            if per_class_n[c] > 0 {
                per_class_acc[c] / per_class_n[c] as f64
            } else {
                f64::NAN
            }
        })
        .collect();
    ApSummary { ap50, ap75, map, per_class }
}

/// Standard box-delta encoding of a ground-truth box against a proposal.
pub fn encode_deltas(gt: &Roi, proposal: &Roi) -> [f64; 4] {
    let (pcx, pcy) = proposal.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - pcx) / proposal.w,
        (gcy - pcy) / proposal.h,
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
    ]
}

/// Apply predicted deltas to a proposal.
pub fn decode_deltas(proposal: &Roi, deltas: &[f64]) -> Roi {
    let (pcx, pcy) = proposal.center();
    let cx = pcx + deltas[0] * proposal.w;
    let cy = pcy + deltas[1] * proposal.h;
    let w = proposal.w * deltas[2].clamp(-4.0, 4.0).exp();
    let h = proposal.h * deltas[3].clamp(-4.0, 4.0).exp();
    Roi { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
}
