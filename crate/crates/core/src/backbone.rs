//! Two-stream hierarchical backbone with GIM blocks in every stage, a
//! replayable reference cache and multi-stage fusion at stride 8.

use std::sync::Arc;

use inbn_tensor::{Bound, Element, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::ScaleMode;
use crate::error::{CoreError, Result};
use crate::gim::{GimConfig, GimTrace, GimWeights, WindowedFeature};
use crate::layers::Linear;

/// Output stride of the fused feature map.
pub const FUSED_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    PatchEmbedding,
    ConvBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: StageKind,
    pub stride: usize,
    pub channels: usize,
    pub gim_count: usize,
    pub tca_in_last_only: bool,
    /// Width the GIMs run at. Convolution stages map to this width first.
    pub gim_channels: Option<usize>,
    pub heads: usize,
    /// Attention inner width `d`; defaults to the GIM width.
    pub inner: Option<usize>,
}

impl StageConfig {
    pub fn patch(stride: usize, channels: usize, gim_count: usize, heads: usize) -> Self {
        Self {
            kind: StageKind::PatchEmbedding,
            stride,
            channels,
            gim_count,
            tca_in_last_only: true,
            gim_channels: None,
            heads,
            inner: None,
        }
    }

    pub fn conv(stride: usize, channels: usize, gim_count: usize, gim_channels: usize, heads: usize) -> Self {
        Self {
            kind: StageKind::ConvBlock,
            stride,
            channels,
            gim_count,
            tca_in_last_only: true,
            gim_channels: Some(gim_channels),
            heads,
            inner: None,
        }
    }

    pub fn gim_width(&self) -> usize {
        match self.kind {
            StageKind::PatchEmbedding => self.channels,
            StageKind::ConvBlock => self.gim_channels.unwrap_or(self.channels),
        }
    }

    pub fn inner_width(&self) -> usize {
        self.inner.unwrap_or(self.gim_width())
    }

    fn has_tca(&self, gim_index: usize) -> bool {
        !self.tca_in_last_only || gim_index + 1 == self.gim_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    pub win: usize,
    pub fused_channels: usize,
    pub candidate_size: usize,
    pub reference_size: usize,
    pub in_channels: usize,
    /// Cross-attention from the reference into the candidate stream.
    pub tca: bool,
    /// Window process; when off every block attends densely (equivalent to `win = 1`).
    pub wp: bool,
    pub swin_style: bool,
    pub share_csa: bool,
    pub bias: bool,
    pub scale: ScaleMode,
    pub pad_to_window: bool,
}

impl BackboneConfig {
    fn base(stages: Vec<StageConfig>, win: usize, fused: usize, cand: usize, reference: usize, in_ch: usize) -> Self {
        Self {
            stages,
            win,
            fused_channels: fused,
            candidate_size: cand,
            reference_size: reference,
            in_channels: in_ch,
            tca: true,
            wp: true,
            swin_style: false,
            share_csa: true,
            bias: false,
            scale: ScaleMode::FullWidth,
            pad_to_window: false,
        }
    }

    /// Transformer-stage column: P = 4,2,2,1; C = 96,192,384,768; GIMs = 2,2,6,2.
    pub fn transformer() -> Self {
        let stages = [(4, 96, 2), (2, 192, 2), (2, 384, 6), (1, 768, 2)]
            .map(|(p, c, n)| StageConfig::patch(p, c, n, 4))
            .to_vec();
        Self::base(stages, 7, 256, 224, 112, 3)
    }

    /// CNN-stage column: P = 4,2,1,1; C = 256,512,1024,2048; one GIM per stage at width 256.
    pub fn cnn() -> Self {
        let stages = [(4, 256), (2, 512), (1, 1024), (1, 2048)]
            .map(|(p, c)| StageConfig::conv(p, c, 1, 256, 4))
            .to_vec();
        Self::base(stages, 7, 256, 224, 112, 3)
    }

    /// Two-stage desk-scale preset used by the synthetic harness.
    pub fn toy() -> Self {
        let stages = vec![StageConfig::patch(4, 8, 1, 2), StageConfig::patch(2, 16, 1, 2)];
        Self::base(stages, 2, 64, 64, 32, 1)
    }

    /// Four-stage miniature used for end-to-end gradient checks.
    pub fn full_tiny() -> Self {
        let stages = vec![
            StageConfig::patch(2, 4, 1, 2),
            StageConfig::patch(2, 8, 1, 2),
            StageConfig::patch(2, 8, 1, 2),
            StageConfig::patch(1, 8, 1, 2),
        ];
        Self::base(stages, 2, 8, 32, 16, 1)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "transformer" => Ok(Self::transformer()),
            "cnn" => Ok(Self::cnn()),
            "toy" => Ok(Self::toy()),
            "full-tiny" => Ok(Self::full_tiny()),
            other => Err(CoreError::Config(format!(
                "unknown preset {other:?} (expected transformer, cnn, toy or full-tiny)"
            ))),
        }
    }

    pub fn effective_win(&self) -> usize {
        if self.wp {
            self.win
        } else {
            1
        }
    }

    pub fn gim_config(&self, stage: usize, gim_index: usize) -> GimConfig {
        let s = &self.stages[stage];
        GimConfig {
            channels: s.gim_width(),
            inner: s.inner_width(),
            heads: s.heads,
            win: self.effective_win(),
            tca: self.tca && s.has_tca(gim_index),
            swin_style: self.swin_style,
            share_csa: self.share_csa,
            bias: self.bias,
            scale: self.scale,
            pad_to_window: self.pad_to_window,
        }
    }

    /// Cumulative stride after each stage.
    pub fn strides(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(1, |acc, s| {
                *acc *= s.stride;
                Some(*acc)
            })
            .collect()
    }

    /// Spatial side of each stage output for an input of side `input`.
    pub fn stage_sizes(&self, input: usize) -> Result<Vec<usize>> {
        let mut side = input;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 0 || !side.is_multiple_of(s.stride) {
                return Err(CoreError::from(TensorError::NotDivisible {
                    op: "stage input",
                    what: "side",
                    size: side,
                    by: s.stride,
                })
                .at_stage(i));
            }
            side /= s.stride;
            out.push(side);
        }
        Ok(out)
    }

    pub fn fused_size(&self, input: usize) -> usize {
        input / FUSED_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(CoreError::Config("backbone needs at least one stage".into()));
        }
        if self.win == 0 || self.fused_channels == 0 || self.in_channels == 0 {
            return Err(CoreError::Config("win, fused_channels and in_channels must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 0 || s.channels == 0 || s.gim_count == 0 || s.heads == 0 || s.gim_width() == 0 {
                return Err(CoreError::Config(format!("stage {i}: stride, channels, gim_count and heads must be positive")));
            }
            if s.inner_width() % s.heads != 0 {
                return Err(CoreError::Config(format!(
                    "stage {i}: inner width {} not divisible by {} heads",
                    s.inner_width(),
                    s.heads
                )));
            }
        }
        let win = self.effective_win();
        for (stream, input) in [("candidate", self.candidate_size), ("reference", self.reference_size)] {
            if input % FUSED_STRIDE != 0 {
                return Err(CoreError::Config(format!(
                    "{stream} size {input} is not a multiple of the fused stride {FUSED_STRIDE}"
                )));
            }
            let fused = self.fused_size(input);
            let sizes = self.stage_sizes(input)?;
            for (i, &side) in sizes.iter().enumerate() {
                if !self.pad_to_window && side % win != 0 {
                    return Err(CoreError::Config(format!(
                        "stage {i}: {stream} feature side {side} is not divisible by win {win} (enable pad_to_window or change sizes)"
                    )));
                }
                if !(side % fused == 0 || fused.is_multiple_of(side)) {
                    return Err(CoreError::Config(format!(
                        "stage {i}: {stream} feature side {side} cannot be resampled to the stride-{FUSED_STRIDE} side {fused}"
                    )));
                }
            }
        }
        if self.candidate_size < self.reference_size {
            return Err(CoreError::Config("candidate size must be at least the reference size".into()));
        }
        Ok(())
    }
}

/// Non-overlapping `P×P` patches flattened in `(row, col, channel)` order, then `· w`.
/// `w`: `[P²·C_in, C_out]`.
pub fn patch_embed<T: Element>(tape: &mut Tape<T>, x: Var, w: Var, p: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [b, h, wd, c] = <[usize; 4]>::try_from(s.as_slice())
        .map_err(|_| CoreError::contract("patch_embed", format!("expected [B, H, W, C], got {s:?}")))?;
    for (what, size) in [("H", h), ("W", wd)] {
        if p == 0 || size % p != 0 {
            return Err(TensorError::NotDivisible {
                op: "patch_embed",
                what,
                size,
                by: p,
            }
            .into());
        }
    }
    let y = if p == 1 {
        x
    } else {
        let y = tape.reshape(x, [b, h / p, p, wd / p, p, c])?;
        let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
        tape.reshape(y, [b, h / p, wd / p, p * p * c])?
    };
    Ok(tape.linear(y, w)?)
}

/// `relu(conv3x3(relu(conv3x3(x, w1, stride P, pad 1)), w2, stride 1, pad 1))`.
pub fn conv_block<T: Element>(tape: &mut Tape<T>, x: Var, w1: Var, w2: Var, p: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(CoreError::contract("conv_block", format!("expected [B, H, W, C], got {s:?}")));
    }
    for (what, size) in [("H", s[1]), ("W", s[2])] {
        if p == 0 || size % p != 0 {
            return Err(TensorError::NotDivisible {
                op: "conv_block",
                what,
                size,
                by: p,
            }
            .into());
        }
    }
    let y = tape.conv2d(x, w1, p, 1)?;
    let y = tape.relu(y);
    let y = tape.conv2d(y, w2, 1, 1)?;
    Ok(tape.relu(y))
}

#[derive(Debug, Clone)]
pub enum Embed {
    Patch(ParamId),
    Conv { w1: ParamId, w2: ParamId },
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub cfg: StageConfig,
    pub embed: Embed,
    /// 1×1 mapping from the stage width to the GIM width (convolution stages).
    pub map: Option<Linear>,
    pub gims: Vec<GimWeights>,
}

/// Per-stage 1×1 mappings to the fused width and the final 1×1 after concatenation.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub per_stage: Vec<Linear>,
    pub out: Linear,
}

/// Resample every stage map to `target`, map to the fused width, concatenate, map again.
pub fn fuse<T: Element>(tape: &mut Tape<T>, p: &Bound, fusion: &Fusion, stages: &[Var], target: (usize, usize)) -> Result<Var> {
    if stages.len() != fusion.per_stage.len() {
        return Err(CoreError::contract(
            "fuse",
            format!("{} stage features for {} fusion mappings", stages.len(), fusion.per_stage.len()),
        ));
    }
    let mut parts = Vec::with_capacity(stages.len());
    for (i, (&f, map)) in stages.iter().zip(&fusion.per_stage).enumerate() {
        let m = map.forward(tape, p, f).map_err(|e| e.at_stage(i))?;
        let r = tape.resample(m, target).map_err(|e| CoreError::from(e).at_stage(i))?;
        parts.push(r);
    }
    let cat = tape.concat(&parts, 3)?;
    fusion.out.forward(tape, p, cat)
}

/// Reference-stream values on a tape.
#[derive(Debug, Clone)]
pub struct ReferenceVars {
    pub stages: Vec<Var>,
    /// Windowed post-CSA feature per stage and GIM (present where the GIM has TCA).
    pub kv: Vec<Vec<Option<WindowedFeature>>>,
}

/// Candidate-stream values on a tape.
#[derive(Debug, Clone)]
pub struct CandidateVars {
    pub stages: Vec<Var>,
    pub traces: Vec<Vec<GimTrace>>,
}

impl CandidateVars {
    pub fn tca_count(&self) -> usize {
        self.traces.iter().flatten().filter(|t| t.tca.is_some()).count()
    }
}

/// Per-stage features of both streams.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub candidate: Vec<Var>,
    pub reference: Vec<Var>,
    pub strides: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedWindow<T: Element> {
    pub data: Arc<Tensor<T>>,
    pub orig_h: usize,
    pub orig_w: usize,
    pub win: usize,
}

/// Reference features materialized off-tape so they can be replayed every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCache<T: Element> {
    pub stages: Vec<Arc<Tensor<T>>>,
    pub kv: Vec<Vec<Option<CachedWindow<T>>>>,
}

impl<T: Element> ReferenceCache<T> {
    pub fn from_vars(tape: &Tape<T>, r: &ReferenceVars) -> Self {
        Self {
            stages: r.stages.iter().map(|&v| tape.value_arc(v)).collect(),
            kv: r
                .kv
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|kv| {
                            kv.map(|w| CachedWindow {
                                data: tape.value_arc(w.data),
                                orig_h: w.orig_h,
                                orig_w: w.orig_w,
                                win: w.win,
                            })
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Records the cached values as constants.
    pub fn to_vars(&self, tape: &mut Tape<T>) -> ReferenceVars {
        ReferenceVars {
            stages: self.stages.iter().map(|t| tape.leaf_arc(Arc::clone(t), false)).collect(),
            kv: self
                .kv
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|kv| {
                            kv.as_ref().map(|c| WindowedFeature {
                                data: tape.leaf_arc(Arc::clone(&c.data), false),
                                orig_h: c.orig_h,
                                orig_w: c.orig_w,
                                win: c.win,
                            })
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stages: Vec<Stage>,
    pub fusion: Fusion,
}

impl Backbone {
    pub fn new<T: Element>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut cin = cfg.in_channels;
        for (i, s) in cfg.stages.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            let embed = match s.kind {
                StageKind::PatchEmbedding => {
                    let k = s.stride * s.stride * cin;
                    let w = Tensor::randn([k, s.channels], (1.0 / k as f64).sqrt(), rng)?;
                    Embed::Patch(store.insert(format!("{name}.embed.w"), w)?)
                }
                StageKind::ConvBlock => {
                    let std1 = (2.0 / (9 * cin) as f64).sqrt();
                    let std2 = (2.0 / (9 * s.channels) as f64).sqrt();
                    let w1 = Tensor::randn([3, 3, cin, s.channels], std1, rng)?;
                    let w2 = Tensor::randn([3, 3, s.channels, s.channels], std2, rng)?;
                    Embed::Conv {
                        w1: store.insert(format!("{name}.conv1.w"), w1)?,
                        w2: store.insert(format!("{name}.conv2.w"), w2)?,
                    }
                }
            };
            let map = if s.gim_width() != s.channels {
                Some(Linear::new(store, &format!("{name}.map"), s.channels, s.gim_width(), cfg.bias, rng)?)
            } else {
                None
            };
            let gims = (0..s.gim_count)
                .map(|j| GimWeights::new(store, &format!("{name}.gim{j}"), cfg.gim_config(i, j), rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                cfg: *s,
                embed,
                map,
                gims,
            });
            cin = s.channels;
        }
        let f = cfg.fused_channels;
        let per_stage = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| Linear::new(store, &format!("backbone.fuse.stage{i}"), s.gim_width(), f, cfg.bias, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(store, "backbone.fuse.out", f * cfg.stages.len(), f, cfg.bias, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            fusion: Fusion { per_stage, out },
        })
    }

    fn embed<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let st = &self.stages[i];
        let y = match &st.embed {
            Embed::Patch(w) => patch_embed(tape, x, p.var(*w), st.cfg.stride)?,
            Embed::Conv { w1, w2 } => conv_block(tape, x, p.var(*w1), p.var(*w2), st.cfg.stride)?,
        };
        match &st.map {
            Some(m) => m.forward(tape, p, y),
            None => Ok(y),
        }
    }

    fn check_input<T: Element>(&self, tape: &Tape<T>, x: Var, size: usize, stream: &str) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != size || s[2] != size || s[3] != self.cfg.in_channels {
            return Err(CoreError::contract(
                "backbone",
                format!(
                    "{stream} input {s:?} does not match [B, {size}, {size}, {}]",
                    self.cfg.in_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn forward_reference_vars<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<ReferenceVars> {
        self.check_input(tape, z, self.cfg.reference_size, "reference")?;
        let mut z = z;
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut kvs = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let run = |tape: &mut Tape<T>, z: Var| -> Result<(Var, Vec<Option<WindowedFeature>>)> {
                let mut z = self.embed(tape, p, i, z)?;
                let mut row = Vec::with_capacity(st.gims.len());
                for g in &st.gims {
                    let (out, kv) = g.forward_reference(tape, p, z)?;
                    row.push(g.tca.as_ref().map(|_| kv));
                    z = out;
                }
                Ok((z, row))
            };
            let (out, row) = run(tape, z).map_err(|e| e.at_stage(i))?;
            z = out;
            stages.push(z);
            kvs.push(row);
        }
        Ok(ReferenceVars { stages, kv: kvs })
    }

    pub fn forward_candidate_vars<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        r: &ReferenceVars,
    ) -> Result<CandidateVars> {
        self.check_input(tape, x, self.cfg.candidate_size, "candidate")?;
        let mut x = x;
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut traces = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let run = |tape: &mut Tape<T>, x: Var| -> Result<(Var, Vec<GimTrace>)> {
                let mut x = self.embed(tape, p, i, x)?;
                let mut row = Vec::with_capacity(st.gims.len());
                for (j, g) in st.gims.iter().enumerate() {
                    let kv = r.kv.get(i).and_then(|k| k.get(j)).copied().flatten();
                    let t = g.forward_candidate(tape, p, x, kv.as_ref())?;
                    x = t.out;
                    row.push(t);
                }
                Ok((x, row))
            };
            let (out, row) = run(tape, x).map_err(|e| e.at_stage(i))?;
            x = out;
            stages.push(x);
            traces.push(row);
        }
        Ok(CandidateVars { stages, traces })
    }

    pub fn forward_two_stream<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        z: Var,
    ) -> Result<(StageOutputs, CandidateVars)> {
        let r = self.forward_reference_vars(tape, p, z)?;
        let c = self.forward_candidate_vars(tape, p, x, &r)?;
        Ok((
            StageOutputs {
                candidate: c.stages.clone(),
                reference: r.stages,
                strides: self.cfg.strides(),
            },
            c,
        ))
    }

    /// Runs the reference stream once and materializes everything the candidate stream needs.
    pub fn forward_reference_stages<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<ReferenceCache<T>> {
        let r = self.forward_reference_vars(tape, p, z)?;
        Ok(ReferenceCache::from_vars(tape, &r))
    }

    pub fn forward_candidate_stages<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        cache: &ReferenceCache<T>,
    ) -> Result<CandidateVars> {
        let r = cache.to_vars(tape);
        self.forward_candidate_vars(tape, p, x, &r)
    }

    pub fn fuse<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, stages: &[Var], input_size: usize) -> Result<Var> {
        let side = self.cfg.fused_size(input_size);
        fuse(tape, p, &self.fusion, stages, (side, side))
    }
}
