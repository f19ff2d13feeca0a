//! Registry of finite-difference checks over every differentiable building block.
//!
//! Each check reduces its op's output to a scalar through a fixed random
//! projection `Σ out ⊙ R`, so every output coordinate reaches the gradient
//! with a distinct weight.

use inbn_tensor::{Bound, CheckReport, Element, FiniteDiff, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention, MultiHeadWeights};
use crate::backbone::{conv_block, fuse, patch_embed, BackboneConfig, Fusion};
use crate::error::{CoreError, Result};
use crate::gim::{csa, tca, window_partition, GimWeights};
use crate::head::{depthwise_xcorr, Head, HeadConfig};
use crate::layers::Linear;
use crate::loss::{assign_labels, bce_loss, reg_loss, CropGeometry, LossConfig};
use crate::model::{Model, ModelConfig};

pub const CHECK_NAMES: &[&str] = &[
    "attention",
    "multi_head",
    "csa",
    "tca",
    "gim_block",
    "patch_embed",
    "conv_block",
    "fuse",
    "depthwise_xcorr",
    "cls_head",
    "reg_head",
    "bce_loss",
    "reg_loss",
    "model",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: CheckReport,
}

/// Sizes the checks are instantiated at, taken from a backbone preset.
#[derive(Debug, Clone)]
pub struct Dims {
    pub preset: String,
    pub backbone: BackboneConfig,
    pub channels: usize,
    pub inner: usize,
    pub heads: usize,
    pub win: usize,
    /// Spatial side of the candidate feature in block-level checks; the reference side is half of it.
    pub side: usize,
}

impl Dims {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = ModelConfig::preset(name)?;
        if !matches!(name, "toy" | "full-tiny") {
            return Err(CoreError::Config(format!("gradient checks run on toy or full-tiny presets, not {name:?}")));
        }
        let g = cfg.backbone.gim_config(0, 0);
        Ok(Self {
            preset: name.to_string(),
            backbone: cfg.backbone,
            channels: g.channels,
            inner: g.inner,
            heads: g.heads,
            win: g.win,
            side: 2 * g.win,
        })
    }
}

fn rand_tensor<T: Element>(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor<T>> {
    Ok(Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)?)
}

/// `Σ out ⊙ R` with `R` drawn from `rng`.
fn project<T: Element>(tape: &mut Tape<T>, out: Var, r: &Tensor<T>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let m = tape.mul(out, rv)?;
    Ok(tape.sum(m))
}

fn projection<T: Element>(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor<T>> {
    rand_tensor(shape, rng)
}

fn param_tensors<T: Element>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store.iter().map(|(_, _, t)| t.clone()).collect()
}

/// Perturbs freshly initialized parameters so zero-initialized tensors
/// (layer-norm shifts, biases) are checked away from special points.
fn jitter<T: Element>(ts: Vec<Tensor<T>>, rng: &mut impl Rng) -> Vec<Tensor<T>> {
    ts.into_iter()
        .map(|t| {
            let data = t.data().iter().map(|v| T::of(v.as_f64() + rng.random_range(-0.1..0.1))).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

/// Runs one named check.
pub fn run_check<T: Element>(name: &str, dims: &Dims, seed: u64, fd: &FiniteDiff) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, heads, win, s) = (dims.channels, dims.inner, dims.heads, dims.win, dims.side);
    let sz = (s / 2).max(win);
    match name {
        "attention" => {
            let (nq, nk, dk, dv) = (5, 4, 3, 2);
            let xs = vec![
                rand_tensor::<T>(&[2, nq, dk], &mut rng)?,
                rand_tensor(&[2, nk, dk], &mut rng)?,
                rand_tensor(&[2, nk, dv], &mut rng)?,
            ];
            let r = projection(&[2, nq, dv], &mut rng)?;
            fd.check(&xs, |t, v| -> Result<Var> {
                let (o, _) = attention(t, v[0], v[1], v[2], dk)?;
                project(t, o, &r)
            })
        }
        "multi_head" => {
            let mut store = ParamStore::<T>::new();
            let w = MultiHeadWeights::new(&mut store, "mh", c, d, heads, true, Default::default(), &mut rng)?;
            let mut xs = vec![rand_tensor::<T>(&[1, 2, 5, c], &mut rng)?, rand_tensor(&[1, 2, 3, c], &mut rng)?];
            xs.extend(jitter(param_tensors(&store), &mut rng));
            let r = projection(&[1, 2, 5, c], &mut rng)?;
            fd.check(&xs, |t, v| -> Result<Var> {
                let p = Bound::from_vars(v[2..].to_vec());
                let o = w.forward(t, &p, v[0], v[1])?;
                project(t, o, &r)
            })
        }
        "csa" | "tca" => {
            let mut store = ParamStore::<T>::new();
            let w = MultiHeadWeights::new(&mut store, "mh", c, d, heads, false, Default::default(), &mut rng)?;
            let mut xs = vec![rand_tensor::<T>(&[1, s, s, c], &mut rng)?, rand_tensor(&[1, sz, sz, c], &mut rng)?];
            xs.extend(param_tensors(&store));
            let r = projection(&[1, s, s, c], &mut rng)?;
            let is_tca = name == "tca";
            fd.check(&xs, |t, v| -> Result<Var> {
                let p = Bound::from_vars(v[2..].to_vec());
                let fx = window_partition(t, v[0], win)?;
                let out = if is_tca {
                    let fz = window_partition(t, v[1], win)?;
                    tca(t, &p, &fx, &fz, &w)?
                } else {
                    csa(t, &p, &fx, &w)?
                };
                let m = crate::gim::window_merge(t, &out)?;
                project(t, m, &r)
            })
        }
        "gim_block" => {
            let mut store = ParamStore::<T>::new();
            let mut g = dims.backbone.gim_config(0, 0);
            g.tca = true;
            let w = GimWeights::new(&mut store, "gim", g, &mut rng)?;
            let mut xs = vec![rand_tensor::<T>(&[1, s, s, c], &mut rng)?, rand_tensor(&[1, sz, sz, c], &mut rng)?];
            xs.extend(jitter(param_tensors(&store), &mut rng));
            let rx = projection(&[1, s, s, c], &mut rng)?;
            let rz = projection(&[1, sz, sz, c], &mut rng)?;
            fd.check(&xs, |t, v| -> Result<Var> {
                let p = Bound::from_vars(v[2..].to_vec());
                let (ox, oz) = w.forward(t, &p, v[0], Some(v[1]))?;
                let a = project(t, ox, &rx)?;
                let b = project(t, oz.expect("reference output"), &rz)?;
                Ok(t.add(a, b)?)
            })
        }
        "patch_embed" => {
            let (pp, cin, cout) = (2, 3, 4);
            let xs = vec![
                rand_tensor::<T>(&[2, 4, 6, cin], &mut rng)?,
                rand_tensor(&[pp * pp * cin, cout], &mut rng)?,
            ];
            let r = projection(&[2, 2, 3, cout], &mut rng)?;
            fd.check(&xs, |t, v| -> Result<Var> {
                let o = patch_embed(t, v[0], v[1], pp)?;
                project(t, o, &r)
            })
        }
        "conv_block" => {
            let (cin, cout) = (2, 3);
            let xs = vec![
                rand_tensor::<T>(&[1, 6, 6, cin], &mut rng)?,
                rand_tensor(&[3, 3, cin, cout], &mut rng)?,
                rand_tensor(&[3, 3, cout, cout], &mut rng)?,
            ];
            let r = projection(&[1, 3, 3, cout], &mut rng)?;
            fd.check(&xs, |t, v| -> Result<Var> {
                let o = conv_block(t, v[0], v[1], v[2], 2)?;
                project(t, o, &r)
            })
        }
        "fuse" => {
            let mut store = ParamStore::<T>::new();
            let widths = [c, 2 * c, 3];
            let f = 5;
            let fusion = Fusion {
                per_stage: widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| Linear::new(&mut store, &format!("fuse.stage{i}"), w, f, true, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
                out: Linear::new(&mut store, "fuse.out", f * widths.len(), f, true, &mut rng)?,
            };
            // one stage above, one at and one below the target resolution
            let sides = [8, 4, 2];
            let mut xs = Vec::new();
            for (&sd, &w) in sides.iter().zip(&widths) {
                xs.push(rand_tensor::<T>(&[1, sd, sd, w], &mut rng)?);
            }
            xs.extend(jitter(param_tensors(&store), &mut rng));
            let r = projection(&[1, 4, 4, f], &mut rng)?;
            fd.check(&xs, |t, v| -> Result<Var> {
                let p = Bound::from_vars(v[3..].to_vec());
                let o = fuse(t, &p, &fusion, &v[..3], (4, 4))?;
                project(t, o, &r)
            })
        }
        "depthwise_xcorr" => {
            let xs = vec![rand_tensor::<T>(&[2, 5, 6, 3], &mut rng)?, rand_tensor(&[2, 2, 3, 3], &mut rng)?];
            let r = projection(&[2, 4, 4, 3], &mut rng)?;
            fd.check(&xs, |t, v| -> Result<Var> {
                let o = depthwise_xcorr(t, v[0], v[1])?;
                project(t, o, &r)
            })
        }
        "cls_head" | "reg_head" => {
            let mut store = ParamStore::<T>::new();
            let mut hc = HeadConfig::new(c, 2 * c);
            hc.bias = true;
            let head = Head::new(&mut store, hc, &mut rng)?;
            let mut xs = vec![rand_tensor::<T>(&[2, 3, 3, c], &mut rng)?];
            xs.extend(jitter(param_tensors(&store), &mut rng));
            let cls = name == "cls_head";
            let r = projection(if cls { &[2, 3, 3][..] } else { &[2, 3, 3, 4][..] }, &mut rng)?;
            fd.check(&xs, |t, v| -> Result<Var> {
                let p = Bound::from_vars(v[1..].to_vec());
                let o = head.predict(t, &p, v[0])?;
                project(t, if cls { o.cls } else { o.reg }, &r)
            })
        }
        "bce_loss" => {
            let geom = CropGeometry {
                crop_size: 40.0,
                stride: 8.0,
                offset: 0.0,
            };
            let labels = vec![
                assign_labels(&crate::bbox::BBox::new(0.5, 0.5, 0.4, 0.3, crate::bbox::BoxFrame::CropNormalized), 5, 5, &geom),
                assign_labels(&crate::bbox::BBox::new(0.3, 0.6, 0.5, 0.5, crate::bbox::BoxFrame::CropNormalized), 5, 5, &geom),
            ];
            let xs = vec![Tensor::<T>::uniform([2, 5, 5], -3.0, 3.0, &mut rng)?];
            let cfg = LossConfig::default();
            fd.check(&xs, |t, v| bce_loss(t, v[0], &labels, &cfg))
        }
        "reg_loss" => {
            let geom = CropGeometry {
                crop_size: 40.0,
                stride: 8.0,
                offset: 0.0,
            };
            let gt = crate::bbox::BBox::new(0.5, 0.45, 0.5, 0.4, crate::bbox::BoxFrame::CropNormalized);
            let labels = vec![assign_labels(&gt, 5, 5, &geom)];
            let target = [gt.cx, gt.cy, gt.w, gt.h];
            // keep every coordinate at least 0.02 from its target (away from the L1 kink)
            let mut data = Vec::with_capacity(100);
            for i in 0..100 {
                let g = target[i % 4];
                let off = rng.random_range(0.02..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                data.push(T::of((g + off).clamp(0.05, 0.95)));
            }
            let xs = vec![Tensor::new([1, 5, 5, 4], data)?];
            let cfg = LossConfig::default();
            fd.check(&xs, |t, v| -> Result<Var> { Ok(reg_loss(t, v[0], &labels, &cfg)?.0) })
        }
        "model" => model_check::<T>(dims, seed, fd),
        other => Err(CoreError::Config(format!("unknown gradient check {other:?}"))),
    }
}

/// Whole model (backbone, fusion, head, total loss) with respect to its parameters.
fn model_check<T: Element>(dims: &Dims, seed: u64, fd: &FiniteDiff) -> Result<CheckReport> {
    let cfg = ModelConfig::preset(&dims.preset)?;
    let model = Model::<T>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let b = &model.cfg.backbone;
    let x = Tensor::<T>::uniform([1, b.candidate_size, b.candidate_size, b.in_channels], -0.5, 0.5, &mut rng)?;
    let z = Tensor::<T>::uniform([1, b.reference_size, b.reference_size, b.in_channels], -0.5, 0.5, &mut rng)?;
    let gt = crate::bbox::BBox::new(0.52, 0.47, 0.3, 0.25, crate::bbox::BoxFrame::CropNormalized);
    let n = model.cfg.score_map_size();
    let labels = vec![assign_labels(&gt, n, n, &model.cfg.crop_geometry())];
    let xs = jitter(param_tensors(&model.params), &mut rng);
    let mut fd = fd.clone();
    // the whole-model check subsamples each parameter tensor
    fd.max_coords = Some(fd.max_coords.unwrap_or(4).min(4));
    fd.check(&xs, |t, v| -> Result<Var> {
        let p = Bound::from_vars(v.to_vec());
        let xv = t.constant(x.clone());
        let zv = t.constant(z.clone());
        let out = model.forward(t, &p, xv, zv)?;
        Ok(crate::loss::total_loss(t, out.head.cls, out.head.reg, &labels, &model.cfg.loss)?.total)
    })
}

/// Every registered check, in registry order.
pub fn run_suite<T: Element>(preset: &str, seed: u64, fd: &FiniteDiff) -> Result<Vec<CheckResult>> {
    let dims = Dims::preset(preset)?;
    CHECK_NAMES
        .iter()
        .map(|&name| {
            Ok(CheckResult {
                name,
                report: run_check::<T>(name, &dims, seed, fd)?,
            })
        })
        .collect()
}
