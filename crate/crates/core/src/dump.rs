//! Channel-mean activation heatmaps of the CSA and TCA sublayers.

use inbn_tensor::{Element, Tape, Var};

use crate::bbox::BBox;
use crate::error::{CoreError, Result};
use crate::gim::{window_merge, WindowedFeature};
use crate::image::{crop_region, Image};
use crate::model::Model;
use crate::tracker::Tracker;

/// Heatmaps of one frame at one stage; sides equal that stage's candidate feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMaps {
    pub csa: Image,
    pub tca: Option<Image>,
}

/// Channel-mean `|activation|` of a windowed feature, min-max scaled to `[0, 1]`.
/// A flat map comes out all zeros.
pub fn activation_map<T: Element>(tape: &mut Tape<T>, fw: &WindowedFeature, h: usize, w: usize) -> Result<Image> {
    let merged: Var = window_merge(tape, fw)?;
    let v = tape.value(merged);
    let c = v.shape()[3];
    let full_w = v.shape()[2];
    let mut m = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let base = (i * full_w + j) * c;
            let s: f64 = v.data()[base..base + c].iter().map(|x| x.as_f64().abs()).sum();
            m.push(s / c as f64);
        }
    }
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = m
        .iter()
        .map(|&x| if span > 0.0 { ((x - lo) / span) as f32 } else { 0.0 })
        .collect();
    Image::new(w, h, 1, data)
}

/// Runs the tracker over `frames` and returns the maps of the last GIM of
/// `stage` for every frame, computed on the crop the tracker searches (the
/// reference box on frame 0).
pub fn dump_attention<T: Element>(model: &Model<T>, frames: &[Image], init: &BBox, stage: usize) -> Result<Vec<AttnMaps>> {
    let n = model.cfg.backbone.stages.len();
    if stage >= n {
        return Err(CoreError::Config(format!("stage {stage} out of range (model has {n} stages)")));
    }
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let b = &model.cfg.backbone;
    let side = b.stage_sizes(b.candidate_size)?[stage];
    let tracker = Tracker::new(model);
    let mut state = tracker.init(first, init)?;
    let mut out = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let (crop, _) = crop_region(frame, &state.prev_box, b.candidate_size, tracker.params.candidate_context)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let x = tape.constant(crop.with_channels(b.in_channels)?.to_tensor::<T>());
        let fwd = model.forward_cached(&mut tape, &p, x, &state.cache)?;
        let trace = fwd.candidate.traces[stage]
            .last()
            .cloned()
            .ok_or_else(|| CoreError::Config(format!("stage {stage} has no GIM")))?;
        let csa = activation_map(&mut tape, &trace.csa, side, side)?;
        let tca = match &trace.tca {
            Some(fw) => Some(activation_map(&mut tape, fw, side, side)?),
            None => None,
        };
        out.push(AttnMaps { csa, tca });
        if t > 0 {
            tracker.step(&mut state, frame)?;
        }
    }
    Ok(out)
}
