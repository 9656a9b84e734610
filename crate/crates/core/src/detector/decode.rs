use super::{CLS, OBJ, SIZE_LOGIT_RANGE, TH, TW, TX, TY};
use crate::error::{CftError, Result};
use crate::geometry::{iou_unchecked, BBox, Detection};
use crate::real::Real;
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub image_width: f64,
    pub image_height: f64,
}

impl DecodeParams {
    pub fn new(image_size: usize) -> Self {
        DecodeParams {
            score_threshold: 0.25,
            iou_threshold: 0.45,
            image_width: image_size as f64,
            image_height: image_size as f64,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

/// Turn one head map `[(5 + classes) x S x S]` into detections.
///
/// Center `(cell + sigmoid(t)) * stride`, size `exp(t) * stride`, confidence
/// `sigmoid(obj) * max_c p(c)` with `p` the softmax over class logits.
/// Detections scoring below the threshold, or whose box collapses when
/// clamped to the image, are dropped.
pub fn decode_boxes<S: Real>(map: &Tensor<S>, stride: usize, params: &DecodeParams) -> Result<Vec<Detection>> {
    let [ch, sh, sw] = map.shape()[..] else {
        return Err(CftError::dim(format!("head map must be 3-d, got {:?}", map.shape())));
    };
    if ch <= CLS {
        return Err(CftError::dim(format!("head map has {ch} channels; need at least {}", CLS + 1)));
    }
    let nc = ch - CLS;
    let plane = sh * sw;
    let at = |c: usize, cell: usize| map.data()[c * plane + cell].to_f64();
    let stride = stride as f64;
    let (lo, hi) = SIZE_LOGIT_RANGE;
    let mut out = Vec::new();
    for cell in 0..plane {
        let logits: Vec<f64> = (0..nc).map(|c| at(CLS + c, cell)).collect();
        let probs = kernels::softmax(&logits, 1, nc, 1);
        let (class_id, pmax) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        let confidence = sigmoid(at(OBJ, cell)) * pmax;
        if !confidence.is_finite() || confidence < params.score_threshold {
            continue;
        }
        let (gy, gx) = ((cell / sw) as f64, (cell % sw) as f64);
        let cx = (gx + sigmoid(at(TX, cell))) * stride;
        let cy = (gy + sigmoid(at(TY, cell))) * stride;
        let w = at(TW, cell).clamp(lo, hi).exp() * stride;
        let h = at(TH, cell).clamp(lo, hi).exp() * stride;
        let bbox = BBox::from_center(cx, cy, w, h).clamp_to(params.image_width, params.image_height);
        if !bbox.is_valid() {
            continue;
        }
        out.push(Detection {
            bbox,
            class_id,
            confidence,
        });
    }
    Ok(out)
}

/// Greedy same-class suppression. Candidates are visited by descending
/// confidence, ties in input order; a candidate is dropped when its IoU with
/// an already kept box of the same class reaches `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_unchecked(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
