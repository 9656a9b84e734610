//! Independent mAP evaluator and randomized detection fixtures.

use cft_core::geometry::{iou, BBox, Detection, GroundTruth};
use cft_core::rng::Rng;

pub fn random_dets(rng: &mut Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = rng.uniform_range(0.0, 20.0);
            let y = rng.uniform_range(0.0, 20.0);
            Detection {
                bbox: BBox::new(x, y, x + rng.uniform_range(3.0, 12.0), y + rng.uniform_range(3.0, 12.0)),
                class_id: rng.below(classes),
                confidence: rng.uniform(),
            }
        })
        .collect()
}

/// Brute-force all-points AP: for every recall step, the best precision at
/// any prefix reaching at least that recall.
pub fn ap_oracle(flags: &[bool], num_gt: usize, coco: bool) -> f64 {
    let prefix: Vec<(f64, f64)> = (1..=flags.len())
        .map(|k| {
            let tp = flags[..k].iter().filter(|&&f| f).count() as f64;
            (tp / num_gt as f64, tp / k as f64)
        })
        .collect();
    let best_from = |r: f64| {
        prefix
            .iter()
            .filter(|&&(rec, _)| rec >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max)
    };
    if coco {
        (0..=100).map(|i| best_from(i as f64 / 100.0)).sum::<f64>() / 101.0
    } else {
        let tps = flags.iter().filter(|&&f| f).count();
        (1..=tps).map(|j| best_from(j as f64 / num_gt as f64)).sum::<f64>() / num_gt as f64
    }
}

/// Threshold-by-threshold evaluator written independently of the library.
pub fn map_oracle(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], classes: usize, coco: bool) -> (Vec<Option<[f64; 10]>>, f64, f64, f64) {
    let mut per_class = Vec::new();
    for class in 0..classes {
        let num_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.class_id == class).count()).sum();
        if num_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut aps = [0.0; 10];
        for (ti, ap) in aps.iter_mut().enumerate() {
            let thr = 0.5 + 0.05 * ti as f64;
            let mut pool: Vec<(f64, usize, usize)> = Vec::new();
            for (img, ds) in dets.iter().enumerate() {
                for (di, d) in ds.iter().enumerate() {
                    if d.class_id == class {
                        pool.push((d.confidence, img, di));
                    }
                }
            }
            pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut flags = Vec::new();
            for &(_, img, di) in &pool {
                let d = &dets[img][di];
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts[img].iter().enumerate() {
                    if taken[img][gi] || g.class_id != class {
                        continue;
                    }
                    let v = iou(&d.bbox, &g.bbox).unwrap();
                    if v + 1e-15 >= thr && best.is_none_or(|(_, b)| v > b) {
                        best = Some((gi, v));
                    }
                }
                if let Some((gi, _)) = best {
                    taken[img][gi] = true;
                }
                flags.push(best.is_some());
            }
            *ap = ap_oracle(&flags, num_gt, coco);
        }
        per_class.push(Some(aps));
    }
    let counted: Vec<[f64; 10]> = per_class.iter().flatten().copied().collect();
    let mean = |ti: usize| counted.iter().map(|a| a[ti]).sum::<f64>() / counted.len() as f64;
    let all = (0..10).map(mean).sum::<f64>() / 10.0;
    (per_class, 100.0 * mean(0), 100.0 * mean(5), 100.0 * all)
}

pub fn map_fixture(seed: u64, images: usize, classes: usize) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let mut rng = Rng::new(seed);
    let mut all_d = Vec::new();
    let mut all_g = Vec::new();
    for _ in 0..images {
        let gts: Vec<GroundTruth> = (0..rng.below(5))
            .map(|_| {
                let x = rng.uniform_range(0.0, 40.0);
                let y = rng.uniform_range(0.0, 40.0);
                GroundTruth {
                    bbox: BBox::new(x, y, x + rng.uniform_range(4.0, 20.0), y + rng.uniform_range(4.0, 20.0)),
                    class_id: rng.below(classes),
                }
            })
            .collect();
        let mut dets = Vec::new();
        for g in &gts {
            for _ in 0..rng.below(3) {
                let j = |r: &mut Rng| r.uniform_range(-3.0, 3.0);
                let b = g.bbox;
                let bbox = BBox::new(b.x1 + j(&mut rng), b.y1 + j(&mut rng), b.x2 + j(&mut rng), b.y2 + j(&mut rng));
                if bbox.is_valid() {
                    let class_id = if rng.uniform() < 0.85 { g.class_id } else { rng.below(classes) };
                    // coarse confidences so ties occur
                    dets.push(Detection { bbox, class_id, confidence: (rng.uniform() * 10.0).floor() / 10.0 });
                }
            }
        }
        let extra = rng.below(3);
        dets.extend(random_dets(&mut rng, extra, classes));
        all_d.push(dets);
        all_g.push(gts);
    }
    (all_d, all_g)
}
