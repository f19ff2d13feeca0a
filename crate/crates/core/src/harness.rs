//! Synthetic distractor-tracking task, toy trainer and evaluation.

use std::f64::consts::PI;

use inbn_tensor::{AdamW, Element, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, BoxFrame};
use crate::error::{CoreError, Result};
use crate::image::{context_side, sample_square, CropMap, Image};
use crate::loss::{assign_labels, total_loss, LabelAssignment};
use crate::model::{Model, ModelConfig};
use crate::tracker::{Tracker, TrackerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskConfig {
    pub frame_size: usize,
    /// Inclusive range of object side lengths in pixels.
    pub target_size: (usize, usize),
    pub distractors: usize,
    pub texture_seed: u64,
    /// Per-frame random-walk step (pixels, per axis).
    pub sigma: f64,
    pub length: usize,
    /// Phase perturbation of distractor textures, in units of π. 0 gives exact copies.
    pub distractor_phase: f64,
    /// Relative contrast perturbation of distractor textures.
    pub distractor_contrast: f64,
    /// Frame-0 target as top-left `[x, y, w, h]`; random when absent.
    pub initial_target: Option<[f64; 4]>,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            frame_size: 64,
            target_size: (10, 14),
            distractors: 3,
            texture_seed: 7,
            sigma: 1.0,
            length: 50,
            distractor_phase: 0.35,
            distractor_contrast: 0.2,
            initial_target: None,
        }
    }
}

const WAVES: usize = 6;

/// Shared frequencies and orientations of one texture family.
#[derive(Debug, Clone)]
struct TextureFamily {
    freq: [f64; WAVES],
    angle: [f64; WAVES],
    amp: [f64; WAVES],
    bg_freq: [f64; WAVES],
    bg_angle: [f64; WAVES],
    bg_phase: [f64; WAVES],
}

impl TextureFamily {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arr = |lo: f64, hi: f64| -> [f64; WAVES] { std::array::from_fn(|_| rng.random_range(lo..hi)) };
        Self {
            freq: arr(0.06, 0.22),
            angle: arr(0.0, PI),
            amp: arr(0.5, 1.0),
            bg_freq: arr(0.02, 0.08),
            bg_angle: arr(0.0, PI),
            bg_phase: arr(0.0, 2.0 * PI),
        }
    }

    fn norm(&self) -> f64 {
        self.amp.iter().sum()
    }

    /// Object texture at local coordinates, in `[-1, 1]`.
    fn object(&self, phase: &[f64; WAVES], u: f64, v: f64) -> f64 {
        let mut s = 0.0;
        for k in 0..WAVES {
            let t = u * self.angle[k].cos() + v * self.angle[k].sin();
            s += self.amp[k] * (2.0 * PI * self.freq[k] * t + phase[k]).sin();
        }
        s / self.norm()
    }

    fn background(&self, x: f64, y: f64) -> f64 {
        let mut s = 0.0;
        for k in 0..WAVES {
            let t = x * self.bg_angle[k].cos() + y * self.bg_angle[k].sin();
            s += (2.0 * PI * self.bg_freq[k] * t + self.bg_phase[k]).sin();
        }
        s / WAVES as f64
    }
}

#[derive(Debug, Clone)]
struct Track {
    w: f64,
    h: f64,
    /// Top-left position per frame.
    pos: Vec<(f64, f64)>,
    phase: [f64; WAVES],
    contrast: f64,
}

/// A generated sequence; frames are rendered on demand.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub cfg: ToyTaskConfig,
    family: TextureFamily,
    /// Target first, then distractors.
    tracks: Vec<Track>,
}

fn overlaps(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.3 && b.1 < a.1 + a.3
}

impl Sequence {
    pub fn generate(cfg: &ToyTaskConfig, seed: u64) -> Result<Self> {
        let fs = cfg.frame_size as f64;
        let (lo, hi) = cfg.target_size;
        if lo == 0 || lo > hi || hi >= cfg.frame_size || cfg.length == 0 {
            return Err(CoreError::Generation(format!(
                "object sizes {lo}..={hi} do not fit {}px frames (or zero-length sequence)",
                cfg.frame_size
            )));
        }
        let family = TextureFamily::new(cfg.texture_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_phase: [f64; WAVES] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));

        let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
        let target = match cfg.initial_target {
            Some([x, y, w, h]) => {
                if !(w > 0.0 && h > 0.0 && x >= 0.0 && y >= 0.0 && x + w <= fs && y + h <= fs) {
                    return Err(CoreError::Generation(format!("initial target {:?} is outside the frame", [x, y, w, h])));
                }
                (x, y, w, h)
            }
            None => {
                let w = rng.random_range(lo..=hi) as f64;
                let h = rng.random_range(lo..=hi) as f64;
                (rng.random_range(0.0..=fs - w), rng.random_range(0.0..=fs - h), w, h)
            }
        };
        placed.push(target);
        for _ in 0..cfg.distractors {
            let mut ok = None;
            for _ in 0..1000 {
                let w = rng.random_range(lo..=hi) as f64;
                let h = rng.random_range(lo..=hi) as f64;
                let cand = (rng.random_range(0.0..=fs - w), rng.random_range(0.0..=fs - h), w, h);
                if !placed.iter().any(|&p| overlaps(p, cand)) {
                    ok = Some(cand);
                    break;
                }
            }
            let Some(c) = ok else {
                return Err(CoreError::Generation(format!(
                    "could not place {} non-overlapping objects in a {}px frame",
                    cfg.distractors + 1,
                    cfg.frame_size
                )));
            };
            placed.push(c);
        }

        let mut tracks = Vec::with_capacity(placed.len());
        for (i, &(x, y, w, h)) in placed.iter().enumerate() {
            let (phase, contrast) = if i == 0 {
                (base_phase, 1.0)
            } else {
                let phase = std::array::from_fn(|k| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    base_phase[k] + cfg.distractor_phase * PI * z
                });
                let z: f64 = StandardNormal.sample(&mut rng);
                (phase, (1.0 + cfg.distractor_contrast * z).clamp(0.3, 1.7))
            };
            let mut pos = Vec::with_capacity(cfg.length);
            let (mut px, mut py) = (x, y);
            pos.push((px, py));
            for _ in 1..cfg.length {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                px = reflect(px + cfg.sigma * dx, fs - w);
                py = reflect(py + cfg.sigma * dy, fs - h);
                pos.push((px, py));
            }
            tracks.push(Track {
                w,
                h,
                pos,
                phase,
                contrast,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            family,
            tracks,
        })
    }

    pub fn len(&self) -> usize {
        self.cfg.length
    }

    pub fn is_empty(&self) -> bool {
        self.cfg.length == 0
    }

    pub fn gt(&self, t: usize) -> BBox {
        let tr = &self.tracks[0];
        let (x, y) = tr.pos[t];
        BBox::from_xywh(x, y, tr.w, tr.h)
    }

    /// Grayscale frame quantized to 8-bit levels so it survives a PGM round trip.
    pub fn frame(&self, t: usize) -> Image {
        let n = self.cfg.frame_size;
        let mut data = vec![0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = 0.5 + 0.12 * self.family.background(fx, fy);
                // distractors first, target drawn last stays visible
                for tr in self.tracks.iter().rev() {
                    let (ox, oy) = tr.pos[t];
                    if fx >= ox && fx < ox + tr.w && fy >= oy && fy < oy + tr.h {
                        v = 0.5 + 0.45 * tr.contrast * self.family.object(&tr.phase, fx - ox, fy - oy);
                    }
                }
                data[y * n + x] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
        }
        Image {
            width: n,
            height: n,
            channels: 1,
            data,
        }
    }
}

fn reflect(v: f64, max: f64) -> f64 {
    let mut v = v;
    if v < 0.0 {
        v = -v;
    }
    if v > max {
        v = 2.0 * max - v;
    }
    v.clamp(0.0, max)
}

pub fn generate_sequence(cfg: &ToyTaskConfig, seed: u64) -> Result<(Vec<Image>, Vec<BBox>)> {
    let s = Sequence::generate(cfg, seed)?;
    Ok(((0..s.len()).map(|t| s.frame(t)).collect(), (0..s.len()).map(|t| s.gt(t)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub tca_enabled: bool,
    pub wp_enabled: bool,
    /// Candidate crop center jitter as a fraction of the crop side (uniform, per axis).
    pub jitter_shift: f64,
    /// Candidate crop side jitter as a relative factor (uniform in log space).
    pub jitter_scale: f64,
    /// Reuse one fixed batch for every step.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr_backbone: 1e-3,
            lr_head: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            tca_enabled: true,
            wp_enabled: true,
            jitter_shift: 0.15,
            jitter_scale: 0.3,
            fixed_batch: false,
        }
    }
}

/// One reference / candidate training pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub reference: Image,
    pub candidate: Image,
    /// Ground truth in candidate-crop normalized coordinates.
    pub target: BBox,
}

pub fn make_sample(task: &ToyTaskConfig, cfg: &ModelConfig, train: &TrainConfig, rng: &mut impl Rng) -> Result<Sample> {
    let seq = Sequence::generate(task, rng.random())?;
    let b = &cfg.backbone;
    let tp = &cfg.tracker;
    let gt0 = seq.gt(0);
    let ref_map = CropMap::centered(gt0.cx, gt0.cy, context_side(gt0.w, gt0.h, tp.reference_context));
    let reference = sample_square(&seq.frame(0), &ref_map, b.reference_size);

    let t = if seq.len() > 1 { rng.random_range(1..seq.len()) } else { 0 };
    let gt = seq.gt(t);
    let side = context_side(gt.w, gt.h, tp.candidate_context);
    let ln = (1.0 + train.jitter_scale).ln();
    let side = side * rng.random_range(-ln..=ln).exp();
    let dx = rng.random_range(-train.jitter_shift..=train.jitter_shift) * side;
    let dy = rng.random_range(-train.jitter_shift..=train.jitter_shift) * side;
    let map = CropMap::centered(gt.cx + dx, gt.cy + dy, side);
    let candidate = sample_square(&seq.frame(t), &map, b.candidate_size);
    Ok(Sample {
        reference,
        candidate,
        target: map.to_crop(&gt),
    })
}

fn stack<T: Element>(imgs: &[&Image], channels: usize) -> Result<Tensor<T>> {
    let first = imgs[0];
    let mut data = Vec::with_capacity(imgs.len() * first.width * first.height * channels);
    for img in imgs {
        data.extend(img.with_channels(channels)?.to_tensor::<T>().into_data());
    }
    Ok(Tensor::new([imgs.len(), first.height, first.width, channels], data)?)
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model<f32>,
    /// Total loss per step.
    pub losses: Vec<f64>,
}

/// Applies the ablation switches of `train` to a model configuration.
pub fn apply_switches(cfg: &ModelConfig, train: &TrainConfig) -> ModelConfig {
    let mut cfg = cfg.clone();
    cfg.backbone.tca = train.tca_enabled;
    cfg.backbone.wp = train.wp_enabled;
    cfg
}

/// Loss of `model` on a batch of samples, recorded on `tape`.
pub fn batch_loss<T: Element>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    p: &inbn_tensor::Bound,
    samples: &[Sample],
) -> Result<crate::loss::LossParts> {
    let c = model.cfg.backbone.in_channels;
    let x = stack::<T>(&samples.iter().map(|s| &s.candidate).collect::<Vec<_>>(), c)?;
    let z = stack::<T>(&samples.iter().map(|s| &s.reference).collect::<Vec<_>>(), c)?;
    let (xv, zv) = (tape.constant(x), tape.constant(z));
    let out = model.forward(tape, p, xv, zv)?;
    let n = model.cfg.score_map_size();
    let geom = model.cfg.crop_geometry();
    let labels: Vec<LabelAssignment> = samples.iter().map(|s| assign_labels(&s.target, n, n, &geom)).collect();
    total_loss(tape, out.head.cls, out.head.reg, &labels, &model.cfg.loss)
}

pub fn train_toy(model_seed: u64, model_cfg: &ModelConfig, task: &ToyTaskConfig, train: &TrainConfig) -> Result<TrainResult> {
    train_toy_with(model_seed, model_cfg, task, train, |_, _| {})
}

/// [`train_toy`] with a per-step callback `(step, loss)`.
pub fn train_toy_with(
    model_seed: u64,
    model_cfg: &ModelConfig,
    task: &ToyTaskConfig,
    train: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainResult> {
    let cfg = apply_switches(model_cfg, train);
    let mut model = Model::<f32>::new(cfg, model_seed)?;
    let mut opt = AdamW::new(train.lr_head)
        .with_prefix_lr("backbone.", train.lr_backbone)
        .with_weight_decay(train.weight_decay);
    opt.beta1 = train.beta1;
    opt.beta2 = train.beta2;
    opt.eps = train.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut fixed: Option<Vec<Sample>> = None;
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let samples = match &fixed {
            Some(s) => s.clone(),
            None => {
                let s = (0..train.batch)
                    .map(|_| make_sample(task, &model.cfg, train, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                if train.fixed_batch {
                    fixed = Some(s.clone());
                }
                s
            }
        };
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let parts = batch_loss(&model, &mut tape, &p, &samples)?;
        let loss = tape.value(parts.total).item() as f64;
        if !loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { step });
        }
        let mut grads = tape.backward(parts.total)?;
        let g = model.params.collect_grads(&p, &mut grads);
        opt.step(&mut model.params, &g)?;
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(TrainResult { model, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub seed: u64,
    pub center_accuracy: f64,
    pub mean_iou: f64,
    pub boxes: Vec<BBox>,
    pub gt: Vec<BBox>,
}

/// Center accuracy (distance ≤ `tau`) and mean IoU over frames `1..`.
pub fn score_trace(pred: &[BBox], gt: &[BBox], tau: f64) -> (f64, f64) {
    let n = pred.len().min(gt.len());
    if n <= 1 {
        return (1.0, 1.0);
    }
    let (mut hits, mut iou) = (0usize, 0.0);
    for t in 1..n {
        if pred[t].center_distance(&gt[t]) <= tau {
            hits += 1;
        }
        iou += pred[t].iou(&gt[t]);
    }
    let m = (n - 1) as f64;
    (hits as f64 / m, iou / m)
}

pub const CENTER_TAU: f64 = 8.0;

/// Seed of episode `i` in an evaluation started with `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64 + 1);
    rng.random()
}

pub fn evaluate<T: Element>(
    model: &Model<T>,
    task: &ToyTaskConfig,
    params: &TrackerParams,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeMetrics>> {
    let tracker = Tracker::with_params(model, *params);
    (0..episodes)
        .map(|e| {
            let s = episode_seed(seed, e);
            let seq = Sequence::generate(task, s)?;
            let frames: Vec<Image> = (0..seq.len()).map(|t| seq.frame(t)).collect();
            let gt: Vec<BBox> = (0..seq.len()).map(|t| seq.gt(t)).collect();
            let boxes = tracker.run(&frames, &gt[0])?;
            let (center_accuracy, mean_iou) = score_trace(&boxes, &gt, CENTER_TAU);
            Ok(EpisodeMetrics {
                episode: e,
                seed: s,
                center_accuracy,
                mean_iou,
                boxes,
                gt,
            })
        })
        .collect()
}

pub fn metrics_csv(rows: &[EpisodeMetrics]) -> String {
    let mut s = String::from("episode,seed,center_accuracy,mean_iou\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.episode, r.seed, r.center_accuracy, r.mean_iou));
    }
    s
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Image-frame box helper for callers that build ground truth by hand.
pub fn image_box(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x + w / 2.0, y + h / 2.0, w, h, BoxFrame::Image)
}
