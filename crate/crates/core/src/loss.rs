//! Weighted binary cross-entropy on score maps and GIoU + L1 box regression.

use inbn_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, BoxFrame};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub neg_weight: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            neg_weight: 1.0 / 16.0,
            lambda_giou: 2.0,
            lambda_l1: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Divide the classification term by the position count and the
    /// regression term by the positive count; raw sums otherwise.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            normalize: true,
        }
    }
}

/// Where score-map cells sit inside the candidate crop, in crop pixels:
/// cell `(i, j)` ↦ `(offset + (j + 0.5)·stride, offset + (i + 0.5)·stride)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropGeometry {
    pub crop_size: f64,
    pub stride: f64,
    pub offset: f64,
}

impl CropGeometry {
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.offset + (j as f64 + 0.5) * self.stride,
            self.offset + (i as f64 + 0.5) * self.stride,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    pub map_h: usize,
    pub map_w: usize,
    /// Row-major `{0, 1}` labels.
    pub labels: Vec<f64>,
    /// Ground truth in crop-normalized coordinates; the target of every positive cell.
    pub target: BBox,
    pub positives: usize,
    /// Set when no cell is positive (box outside the crop or smaller than a cell).
    pub warning: bool,
}

/// Label 1 iff the cell center lies strictly inside `gt` (crop-normalized).
pub fn assign_labels(gt: &BBox, map_h: usize, map_w: usize, geom: &CropGeometry) -> LabelAssignment {
    let px = BBox::new(
        gt.cx * geom.crop_size,
        gt.cy * geom.crop_size,
        gt.w * geom.crop_size,
        gt.h * geom.crop_size,
        BoxFrame::Image,
    );
    let mut labels = vec![0.0; map_h * map_w];
    let mut positives = 0;
    for i in 0..map_h {
        for j in 0..map_w {
            let (x, y) = geom.cell_center(i, j);
            if px.contains_strictly(x, y) {
                labels[i * map_w + j] = 1.0;
                positives += 1;
            }
        }
    }
    LabelAssignment {
        map_h,
        map_w,
        labels,
        target: *gt,
        positives,
        warning: positives == 0,
    }
}

/// `−Σ [y log p + w (1−y) log(1−p)]` on probabilities (reference form).
pub fn bce_loss_probs(p: &[f64], y: &[f64], neg_weight: f64) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| -(y * p.ln() + neg_weight * (1.0 - y) * (1.0 - p).ln()))
        .sum()
}

/// Weighted BCE on logits `[B, H, W]` with labels stacked over the batch.
pub fn bce_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[LabelAssignment], cfg: &LossConfig) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let y: Vec<f64> = labels.iter().flat_map(|a| a.labels.iter().copied()).collect();
    if y.len() != tape.value(logits).numel() {
        return Err(CoreError::contract(
            "bce_loss",
            format!("{} labels for logits of shape {shape:?}", y.len()),
        ));
    }
    let w: Vec<f64> = y.iter().map(|&v| if v > 0.5 { 1.0 } else { cfg.weights.neg_weight }).collect();
    let targets = Tensor::from_f64(shape.clone(), &y)?;
    let weights = Tensor::from_f64(shape, &w)?;
    let n = y.len();
    let l = tape.bce_with_logits(logits, targets, weights)?;
    Ok(if cfg.normalize { tape.scale(l, 1.0 / n as f64) } else { l })
}

/// Definition form: IoU − |C \ (A ∪ B)| / |C| with C the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check("giou")?;
    b.check("giou")?;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Ok(inter / union - (hull - union) / hull)
}

/// Per-row GIoU of `(cx, cy, w, h)` boxes: `pred [N, 4]`, `gt [N, 4]` → `[N, 1]`.
pub fn giou_rows<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let col = |tape: &mut Tape<T>, v: Var, k: usize| tape.narrow(v, 1, k, 1);
    let corners = |tape: &mut Tape<T>, v: Var| -> Result<[Var; 6]> {
        let (cx, cy, w, h) = (col(tape, v, 0)?, col(tape, v, 1)?, col(tape, v, 2)?, col(tape, v, 3)?);
        let hw = tape.scale(w, 0.5);
        let hh = tape.scale(h, 0.5);
        Ok([
            tape.sub(cx, hw)?,
            tape.sub(cy, hh)?,
            tape.add(cx, hw)?,
            tape.add(cy, hh)?,
            w,
            h,
        ])
    };
    let [px1, py1, px2, py2, pw, ph] = corners(tape, pred)?;
    let [gx1, gy1, gx2, gy2, gw, gh] = corners(tape, gt)?;

    let ix1 = tape.maximum(px1, gx1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let pa = tape.mul(pw, ph)?;
    let ga = tape.mul(gw, gh)?;
    let sum = tape.add(pa, ga)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let cx1 = tape.minimum(px1, gx1)?;
    let cx2 = tape.maximum(px2, gx2)?;
    let cy1 = tape.minimum(py1, gy1)?;
    let cy2 = tape.maximum(py2, gy2)?;
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let hull = tape.mul(cw, ch)?;
    let gap = tape.sub(hull, union)?;
    let frac = tape.div(gap, hull)?;
    Ok(tape.sub(iou, frac)?)
}

/// `Σ_{y=1} [λ_G (1 − giou) + λ_1 ‖b − b̂‖₁]` over `pred [B, H, W, 4]`.
///
/// Returns `(loss, positive count)`. With no positives the loss is a constant 0.
pub fn reg_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    labels: &[LabelAssignment],
    cfg: &LossConfig,
) -> Result<(Var, usize)> {
    let shape = tape.shape(pred).to_vec();
    let n: usize = labels.iter().map(|a| a.labels.len()).sum();
    if shape.len() != 4 || shape[3] != 4 || shape[0] != labels.len() || shape[0] * shape[1] * shape[2] != n {
        return Err(CoreError::contract(
            "reg_loss",
            format!("predictions {shape:?} do not match {} label maps", labels.len()),
        ));
    }
    let positives: usize = labels.iter().map(|a| a.positives).sum();
    if positives == 0 {
        return Ok((tape.constant(Tensor::scalar(T::zero())), 0));
    }
    let mut gt = Vec::with_capacity(n * 4);
    let mut mask = Vec::with_capacity(n);
    for a in labels {
        let t = a.target;
        for &y in &a.labels {
            gt.extend([t.cx, t.cy, t.w, t.h]);
            mask.push(y);
        }
    }
    let rows = tape.reshape(pred, [n, 4])?;
    let gt = tape.constant(Tensor::from_f64([n, 4], &gt)?);
    let mask = tape.constant(Tensor::from_f64([n, 1], &mask)?);

    let g = giou_rows(tape, rows, gt)?;
    let one_minus = tape.neg(g);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let giou_term = tape.scale(one_minus, cfg.weights.lambda_giou);

    let diff = tape.sub(rows, gt)?;
    let absd = tape.abs(diff);
    let ones = tape.constant(Tensor::ones([4, 1])?);
    let l1 = tape.linear(absd, ones)?;
    let l1_term = tape.scale(l1, cfg.weights.lambda_l1);

    let per_row = tape.add(giou_term, l1_term)?;
    let masked = tape.mul(per_row, mask)?;
    let total = tape.sum(masked);
    let total = if cfg.normalize {
        tape.scale(total, 1.0 / positives as f64)
    } else {
        total
    };
    Ok((total, positives))
}

/// Scalar parts of one training objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub positives: usize,
}

/// `bce_loss + reg_loss` with unit inter-task weight.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    cls: Var,
    reg: Var,
    labels: &[LabelAssignment],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let c = bce_loss(tape, cls, labels, cfg)?;
    let (r, positives) = reg_loss(tape, reg, labels, cfg)?;
    Ok(LossParts {
        total: tape.add(c, r)?,
        cls: c,
        reg: r,
        positives,
    })
}
