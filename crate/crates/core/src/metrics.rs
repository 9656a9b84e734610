//! Detection evaluation: greedy IoU matching, average precision and the
//! mAP50 / mAP75 / mAP@[.50:.95] summary.

use std::fmt::Write as _;

use crate::geometry::{iou_unchecked, Detection, GroundTruth};
use crate::parallel;

pub use crate::geometry::iou;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    /// Exact area under the monotone precision envelope.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0.00, 0.01, ..., 1.00.
    Coco101,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub true_positive: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    /// Ground truths left unmatched.
    pub false_negatives: usize,
}

/// Indices of `dets` by descending confidence, ties in input order.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Visit detections by descending confidence; each takes the unmatched
/// same-class ground truth of highest IoU, provided that IoU reaches the
/// threshold. IoU ties go to the lower ground-truth index.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut true_positive = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    for di in confidence_order(dets) {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou_unchecked(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            true_positive[di] = true;
            matched_gt[di] = Some(gi);
        }
    }
    MatchResult {
        true_positive,
        matched_gt,
        false_negatives: taken.iter().filter(|&&t| !t).count(),
    }
}

/// Precision and recall after each detection of a confidence-sorted list.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    (precision, recall)
}

/// AP of TP/FP flags already sorted by descending confidence.
pub fn average_precision(flags: &[bool], num_gt: usize, interp: Interpolation) -> f64 {
    if num_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let (precision, recall) = pr_curve(flags, num_gt);
    // envelope: best precision at this or any later (higher recall) point
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    match interp {
        Interpolation::AllPoints => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        Interpolation::Coco101 => {
            let mut sum = 0.0;
            for i in 0..=100 {
                let r = i as f64 / 100.0;
                if let Some(k) = recall.iter().position(|&x| x >= r) {
                    sum += envelope[k];
                }
            }
            sum / 101.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub thresholds: [f64; 10],
    /// Per class: AP in `[0, 1]` at each threshold, or `None` for a class
    /// with no ground truth (left out of every mean).
    pub per_class: Vec<Option<[f64; 10]>>,
    /// Percentages.
    pub map50: f64,
    pub map75: f64,
    pub map: f64,
}

/// Evaluate detections against ground truth for images `0..n`.
pub fn map_suite(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    interp: Interpolation,
) -> MapReport {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let thresholds = iou_thresholds();
    // per image, per threshold matching
    let matches: Vec<Vec<MatchResult>> = parallel::map_indexed(dets.len(), |i| {
        thresholds
            .iter()
            .map(|&t| match_detections(&dets[i], &gts[i], t))
            .collect()
    });

    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let num_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|gt| gt.class_id == class).count())
            .sum();
        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        // (confidence, image, det) sorted by confidence desc, then image, then det
        let mut pool: Vec<(f64, usize, usize)> = Vec::new();
        for (img, ds) in dets.iter().enumerate() {
            for (di, d) in ds.iter().enumerate() {
                if d.class_id == class {
                    pool.push((d.confidence, img, di));
                }
            }
        }
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let aps = std::array::from_fn(|ti| {
            let flags: Vec<bool> = pool
                .iter()
                .map(|&(_, img, di)| matches[img][ti].true_positive[di])
                .collect();
            average_precision(&flags, num_gt, interp)
        });
        per_class.push(Some(aps));
    }

    let counted: Vec<&[f64; 10]> = per_class.iter().flatten().collect();
    let mean_at = |ti: usize| {
        if counted.is_empty() {
            0.0
        } else {
            counted.iter().map(|a| a[ti]).sum::<f64>() / counted.len() as f64
        }
    };
    let map50 = 100.0 * mean_at(0);
    let map75 = 100.0 * mean_at(5);
    let map = 100.0 * (0..10).map(mean_at).sum::<f64>() / 10.0;
    MapReport {
        thresholds,
        per_class,
        map50,
        map75,
        map,
    }
}

impl MapReport {
    /// Fixed-order text report, values in percent to 4 decimals.
    pub fn to_text(&self, class_names: &[&str]) -> String {
        let mut s = String::from("class,name");
        for t in &self.thresholds {
            let _ = write!(s, ",ap@{t:.2}");
        }
        s.push('\n');
        for (c, aps) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).copied().unwrap_or("?");
            let _ = write!(s, "{c},{name}");
            match aps {
                Some(aps) => {
                    for ap in aps {
                        let _ = write!(s, ",{:.4}", 100.0 * ap);
                    }
                }
                None => {
                    for _ in &self.thresholds {
                        s.push_str(",excluded");
                    }
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "mAP50 = {:.4}", self.map50);
        let _ = writeln!(s, "mAP75 = {:.4}", self.map75);
        let _ = writeln!(s, "mAP = {:.4}", self.map);
        s
    }
}
