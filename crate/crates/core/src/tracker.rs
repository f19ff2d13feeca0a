//! Online inference: reference caching, candidate cropping, score-map
//! post-processing and box selection.

use inbn_tensor::{Element, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, BoxFrame};
use crate::error::{CoreError, Result};
use crate::image::{crop_region, Image};
use crate::model::{Model, ModelCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    /// Hanning blend weight `w` in `(1 − w)·cls·p + w·H`.
    pub window_weight: f64,
    pub penalty_k: f64,
    pub reference_context: f64,
    pub candidate_context: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            window_weight: 0.3,
            penalty_k: 0.04,
            reference_context: 1.0,
            candidate_context: 2.0,
        }
    }
}

/// Symmetric Hanning window of length `n` (`0.5 − 0.5·cos(2πk/(n−1))`); `[1]` for `n = 1`.
pub fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Outer product of two Hanning windows, row-major `[h, w]`.
pub fn hanning2d(h: usize, w: usize) -> Vec<f64> {
    let (a, b) = (hanning(h), hanning(w));
    a.iter().flat_map(|&y| b.iter().map(move |&x| y * x)).collect()
}

fn change(x: f64) -> f64 {
    x.max(1.0 / x)
}

fn padded_size(w: f64, h: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

/// `exp(−k·(max(r/r′, r′/r)·max(s/s′, s′/s) − 1))`.
pub fn scale_penalty(pred: &BBox, prev: &BBox, k: f64) -> f64 {
    let r = change((pred.w / pred.h) / (prev.w / prev.h));
    let s = change(padded_size(pred.w, pred.h) / padded_size(prev.w, prev.h));
    (-k * (r * s - 1.0)).exp()
}

/// `(1 − w)·cls·p + w·H` elementwise.
pub fn postprocess(cls: &[f64], penalties: &[f64], hanning: &[f64], w: f64) -> Result<Vec<f64>> {
    if cls.len() != penalties.len() || cls.len() != hanning.len() {
        return Err(CoreError::contract(
            "postprocess",
            format!("map sizes differ: {} / {} / {}", cls.len(), penalties.len(), hanning.len()),
        ));
    }
    Ok(cls
        .iter()
        .zip(penalties)
        .zip(hanning)
        .map(|((&c, &p), &h)| (1.0 - w) * c * p + w * h)
        .collect())
}

/// Row-major index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState<T: Element> {
    pub prev_box: BBox,
    pub cache: ModelCache<T>,
    pub hanning: Vec<f64>,
    pub map_size: usize,
    pub window_weight: f64,
    pub penalty_k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub map_size: usize,
    /// Sigmoid of the classification logits.
    pub raw: Vec<f64>,
    pub penalties: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub best: usize,
}

/// Single-owner tracker over shared, immutable model weights.
pub struct Tracker<'m, T: Element> {
    pub model: &'m Model<T>,
    pub params: TrackerParams,
}

impl<'m, T: Element> Tracker<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            model,
            params: model.cfg.tracker,
        }
    }

    pub fn with_params(model: &'m Model<T>, params: TrackerParams) -> Self {
        Self { model, params }
    }

    fn input(&self, img: &Image) -> Result<Tensor<T>> {
        Ok(img.with_channels(self.model.cfg.backbone.in_channels)?.to_tensor())
    }

    pub fn init(&self, frame: &Image, gt: &BBox) -> Result<TrackerState<T>> {
        gt.check("tracker init")?;
        let b = &self.model.cfg.backbone;
        let (crop, _) = crop_region(frame, gt, b.reference_size, self.params.reference_context)?;
        let cache = self.model.reference_cache(&self.input(&crop)?)?;
        let n = self.model.cfg.score_map_size();
        Ok(TrackerState {
            prev_box: *gt,
            cache,
            hanning: hanning2d(n, n),
            map_size: n,
            window_weight: self.params.window_weight,
            penalty_k: self.params.penalty_k,
        })
    }

    pub fn step(&self, state: &mut TrackerState<T>, frame: &Image) -> Result<(BBox, StepDiagnostics)> {
        let b = &self.model.cfg.backbone;
        let (crop, map) = crop_region(frame, &state.prev_box, b.candidate_size, self.params.candidate_context)?;
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, false);
        let x = tape.constant(self.input(&crop)?);
        let out = self.model.forward_cached(&mut tape, &p, x, &state.cache)?;
        let cls = tape.value(out.head.cls);
        let reg = tape.value(out.head.reg);
        let n = state.map_size;
        if cls.numel() != n * n {
            return Err(CoreError::contract("track_step", format!("score map {:?} is not {n}x{n}", cls.shape())));
        }
        let raw: Vec<f64> = cls.data().iter().map(|&v| 1.0 / (1.0 + (-v.as_f64()).exp())).collect();
        let boxes: Vec<BBox> = reg
            .data()
            .chunks(4)
            .map(|r| {
                let nb = BBox::new(r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64(), BoxFrame::CropNormalized);
                map.to_image(&nb)
            })
            .collect();
        let penalties: Vec<f64> = boxes
            .iter()
            .map(|bx| scale_penalty(bx, &state.prev_box, state.penalty_k))
            .collect();
        let adjusted = postprocess(&raw, &penalties, &state.hanning, state.window_weight)?;
        let best = argmax(&adjusted);
        let mut out_box = boxes[best];
        // keep the box on the frame and between one pixel and the frame size, so
        // the next crop stays anchored and a bad size estimate cannot compound
        let (fw, fh) = (frame.width as f64, frame.height as f64);
        out_box.cx = out_box.cx.clamp(0.0, fw);
        out_box.cy = out_box.cy.clamp(0.0, fh);
        out_box.w = out_box.w.clamp(1.0, fw.max(1.0));
        out_box.h = out_box.h.clamp(1.0, fh.max(1.0));
        state.prev_box = out_box;
        Ok((
            out_box,
            StepDiagnostics {
                map_size: n,
                raw,
                penalties,
                adjusted,
                best,
            },
        ))
    }

    /// Boxes for every frame; the first is `init` itself.
    pub fn run(&self, frames: &[Image], init: &BBox) -> Result<Vec<BBox>> {
        let Some(first) = frames.first() else {
            return Ok(Vec::new());
        };
        let mut state = self.init(first, init)?;
        let mut out = vec![*init];
        for f in &frames[1..] {
            out.push(self.step(&mut state, f)?.0);
        }
        Ok(out)
    }
}
