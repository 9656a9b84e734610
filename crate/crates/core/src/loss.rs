//! Training objective: `L_box + L_cls + L_obj + L_noobj` over grid targets.
//!
//! Every term is a sum over cells of one image. The box term is
//! `1 - GIoU` on decoded boxes, the class term is cross-entropy of the softmax
//! class distribution against a one-hot target, and the two confidence terms
//! are squared errors of `sigmoid(obj)` against 1 on responsible cells and 0
//! elsewhere.

use crate::autodiff::{Graph, Var};
use crate::detector::{CLS, OBJ, SIZE_LOGIT_RANGE, TH, TW, TX, TY};
use crate::error::{CftError, Result};
use crate::geometry::{self, BBox, GroundTruth};
use crate::real::Real;
use crate::tensor::Tensor;

/// Probability clamp for the logarithm in the class term.
pub const PROB_EPS: f64 = 1e-7;

/// `1 - GIoU(a, b)`, in `[0, 2)`.
pub fn giou_loss(a: &BBox, b: &BBox) -> Result<f64> {
    Ok(1.0 - geometry::giou(a, b)?)
}

pub use crate::geometry::giou;

/// Responsible cells of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets {
    pub grid: usize,
    pub stride: f64,
    /// `(cell, ground-truth index)` in ascending ground-truth order.
    pub positives: Vec<(usize, usize)>,
    /// `grid * grid` flags, row-major; the noobj mask is the complement.
    pub obj_mask: Vec<bool>,
}

impl ScaleTargets {
    pub fn negatives(&self) -> Vec<usize> {
        (0..self.obj_mask.len()).filter(|&c| !self.obj_mask[c]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub scales: Vec<ScaleTargets>,
    pub gts: Vec<GroundTruth>,
}

/// Every ground truth is assigned, at every scale, to the cell containing
/// its center. When two centers fall in one cell the earlier ground truth
/// keeps it.
pub fn assign_targets(
    gts: &[GroundTruth],
    grids: &[usize],
    image_width: f64,
    image_height: f64,
) -> Result<TargetAssignment> {
    for gt in gts {
        gt.bbox.ensure_valid()?;
        if !gt.bbox.inside(image_width, image_height) {
            return Err(CftError::contract(format!(
                "ground truth {:?} lies outside the {image_width}x{image_height} image",
                gt.bbox
            )));
        }
    }
    let mut scales = Vec::with_capacity(grids.len());
    for &grid in grids {
        if grid == 0 {
            return Err(CftError::dim("grid size must be positive"));
        }
        let stride = image_width / grid as f64;
        let stride_y = image_height / grid as f64;
        let mut obj_mask = vec![false; grid * grid];
        let mut positives = Vec::new();
        for (gi, gt) in gts.iter().enumerate() {
            let (cx, cy) = gt.bbox.center();
            let x = ((cx / stride).floor() as usize).min(grid - 1);
            let y = ((cy / stride_y).floor() as usize).min(grid - 1);
            let cell = y * grid + x;
            if !obj_mask[cell] {
                obj_mask[cell] = true;
                positives.push((cell, gi));
            }
        }
        scales.push(ScaleTargets {
            grid,
            stride,
            positives,
            obj_mask,
        });
    }
    Ok(TargetAssignment {
        scales,
        gts: gts.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub box_loss: f64,
    pub cls: f64,
    pub obj: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            box_loss: 1.0,
            cls: 1.0,
            obj: 1.0,
            noobj: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown<'g, S: Real> {
    pub box_loss: Var<'g, S>,
    pub cls: Var<'g, S>,
    pub obj: Var<'g, S>,
    pub noobj: Var<'g, S>,
    pub total: Var<'g, S>,
}

/// Plain values of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub box_loss: f64,
    pub cls: f64,
    pub obj: f64,
    pub noobj: f64,
    pub total: f64,
}

impl<S: Real> LossBreakdown<'_, S> {
    pub fn values(&self) -> LossValues {
        let v = |x: &Var<'_, S>| x.value().item().to_f64();
        LossValues {
            box_loss: v(&self.box_loss),
            cls: v(&self.cls),
            obj: v(&self.obj),
            noobj: v(&self.noobj),
            total: v(&self.total),
        }
    }
}

impl LossValues {
    pub fn add(&mut self, other: &LossValues) {
        self.box_loss += other.box_loss;
        self.cls += other.cls;
        self.obj += other.obj;
        self.noobj += other.noobj;
        self.total += other.total;
    }

    pub fn scaled(&self, f: f64) -> LossValues {
        LossValues {
            box_loss: self.box_loss * f,
            cls: self.cls * f,
            obj: self.obj * f,
            noobj: self.noobj * f,
            total: self.total * f,
        }
    }
}

fn zero<S: Real>(g: &Graph<S>) -> Var<'_, S> {
    g.constant(Tensor::scalar(S::ZERO))
}

fn column<S: Real>(g: &Graph<S>, values: impl Iterator<Item = f64>) -> Var<'_, S> {
    let data: Vec<S> = values.map(S::from_f64).collect();
    let n = data.len();
    g.constant(Tensor::new(vec![n], data).expect("non-empty column"))
}

/// `-sum log p(target)` over rows of `probs[n x classes]`, probabilities
/// clamped to `[eps, 1 - eps]`. Zero rows give zero.
pub fn classification_loss<'g, S: Real>(probs: Var<'g, S>, targets: &[usize]) -> Result<Var<'g, S>> {
    let g = probs.graph();
    if targets.is_empty() {
        return Ok(zero(g));
    }
    let shape = probs.shape();
    let [n, nc] = shape[..] else {
        return Err(CftError::dim(format!("class probabilities must be n x classes, got {shape:?}")));
    };
    if n != targets.len() {
        return Err(CftError::dim(format!("{n} rows for {} targets", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= nc) {
        return Err(CftError::contract(format!("target class {t} out of {nc}")));
    }
    let index = targets.iter().enumerate().map(|(r, &t)| r * nc + t).collect();
    probs
        .gather(index, &[n])?
        .clamp(PROB_EPS, 1.0 - PROB_EPS)?
        .ln()?
        .sum()?
        .neg()
}

/// `(sum_obj (1 - c)^2, sum_noobj c^2)` for confidences `conf[cells]`.
pub fn confidence_losses<'g, S: Real>(conf: Var<'g, S>, obj_mask: &[bool]) -> Result<(Var<'g, S>, Var<'g, S>)> {
    let g = conf.graph();
    let shape = conf.shape();
    if shape.len() != 1 || shape[0] != obj_mask.len() {
        return Err(CftError::dim(format!(
            "confidences {shape:?} do not match a mask of {} cells",
            obj_mask.len()
        )));
    }
    let pos: Vec<usize> = (0..obj_mask.len()).filter(|&c| obj_mask[c]).collect();
    let neg: Vec<usize> = (0..obj_mask.len()).filter(|&c| !obj_mask[c]).collect();
    let obj = if pos.is_empty() {
        zero(g)
    } else {
        let n = pos.len();
        conf.gather(pos, &[n])?.neg()?.add_scalar(1.0)?.square()?.sum()?
    };
    let noobj = if neg.is_empty() {
        zero(g)
    } else {
        let n = neg.len();
        conf.gather(neg, &[n])?.square()?.sum()?
    };
    Ok((obj, noobj))
}

/// Per-row GIoU between predicted corners and constant targets.
#[allow(clippy::too_many_arguments)]
fn giou_rows<'g, S: Real>(
    px1: Var<'g, S>,
    py1: Var<'g, S>,
    px2: Var<'g, S>,
    py2: Var<'g, S>,
    targets: &[BBox],
) -> Result<Var<'g, S>> {
    let g = px1.graph();
    let gx1 = column(g, targets.iter().map(|b| b.x1));
    let gy1 = column(g, targets.iter().map(|b| b.y1));
    let gx2 = column(g, targets.iter().map(|b| b.x2));
    let gy2 = column(g, targets.iter().map(|b| b.y2));
    let garea = column(g, targets.iter().map(|b| b.area()));
    let zeros = column(g, targets.iter().map(|_| 0.0));

    let iw = px2.minimum(gx2)?.sub(px1.maximum(gx1)?)?.maximum(zeros)?;
    let ih = py2.minimum(gy2)?.sub(py1.maximum(gy1)?)?.maximum(zeros)?;
    let inter = iw.mul(ih)?;
    let parea = px2.sub(px1)?.mul(py2.sub(py1)?)?;
    let union = parea.add(garea)?.sub(inter)?;
    let hw = px2.maximum(gx2)?.sub(px1.minimum(gx1)?)?;
    let hh = py2.maximum(gy2)?.sub(py1.minimum(gy1)?)?;
    let hull = hw.mul(hh)?;
    inter.div(union)?.sub(hull.sub(union)?.div(hull)?)
}

/// All four terms for one image, summed over pyramid levels.
pub fn total_loss<'g, S: Real>(
    heads: &[Var<'g, S>],
    assignment: &TargetAssignment,
    weights: &LossWeights,
) -> Result<LossBreakdown<'g, S>> {
    let first = heads.first().ok_or_else(|| CftError::dim("no head maps"))?;
    let g = first.graph();
    if heads.len() != assignment.scales.len() {
        return Err(CftError::dim(format!(
            "{} head maps for {} assigned scales",
            heads.len(),
            assignment.scales.len()
        )));
    }
    let (lo, hi) = SIZE_LOGIT_RANGE;
    let (mut box_loss, mut cls, mut obj, mut noobj) = (zero(g), zero(g), zero(g), zero(g));
    for (head, st) in heads.iter().zip(&assignment.scales) {
        let shape = head.shape();
        let [ch, sh, sw] = shape[..] else {
            return Err(CftError::dim(format!("head map must be 3-d, got {shape:?}")));
        };
        if sh != st.grid || sw != st.grid || ch <= CLS {
            return Err(CftError::dim(format!(
                "head map {shape:?} does not match a {0}x{0} grid",
                st.grid
            )));
        }
        let nc = ch - CLS;
        let plane = sh * sw;

        let conf = head.gather((0..plane).map(|c| OBJ * plane + c).collect(), &[plane])?.sigmoid()?;
        let (o, no) = confidence_losses(conf, &st.obj_mask)?;
        obj = obj.add(o)?;
        noobj = noobj.add(no)?;

        let n = st.positives.len();
        if n == 0 {
            continue;
        }
        let pick = |channel: usize| -> Result<Var<'g, S>> {
            head.gather(st.positives.iter().map(|&(c, _)| channel * plane + c).collect(), &[n])
        };
        let gx = column(g, st.positives.iter().map(|&(c, _)| (c % sw) as f64));
        let gy = column(g, st.positives.iter().map(|&(c, _)| (c / sw) as f64));
        let cx = pick(TX)?.sigmoid()?.add(gx)?.scale(st.stride)?;
        let cy = pick(TY)?.sigmoid()?.add(gy)?.scale(st.stride)?;
        let half_w = pick(TW)?.clamp(lo, hi)?.exp()?.scale(st.stride * 0.5)?;
        let half_h = pick(TH)?.clamp(lo, hi)?.exp()?.scale(st.stride * 0.5)?;
        let targets: Vec<BBox> = st.positives.iter().map(|&(_, gi)| assignment.gts[gi].bbox).collect();
        let giou = giou_rows(cx.sub(half_w)?, cy.sub(half_h)?, cx.add(half_w)?, cy.add(half_h)?, &targets)?;
        box_loss = box_loss.add(giou.neg()?.add_scalar(1.0)?.sum()?)?;

        let mut index = Vec::with_capacity(n * nc);
        for &(c, _) in &st.positives {
            index.extend((0..nc).map(|k| (CLS + k) * plane + c));
        }
        let probs = head.gather(index, &[n, nc])?.softmax(1)?;
        let class_targets: Vec<usize> = st.positives.iter().map(|&(_, gi)| assignment.gts[gi].class_id).collect();
        cls = cls.add(classification_loss(probs, &class_targets)?)?;
    }
    let weighted = |v: Var<'g, S>, w: f64| if w == 1.0 { Ok(v) } else { v.scale(w) };
    let total = weighted(box_loss, weights.box_loss)?
        .add(weighted(cls, weights.cls)?)?
        .add(weighted(obj, weights.obj)?)?
        .add(weighted(noobj, weights.noobj)?)?;
    Ok(LossBreakdown {
        box_loss,
        cls,
        obj,
        noobj,
        total,
    })
}
