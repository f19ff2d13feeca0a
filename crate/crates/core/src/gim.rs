//! Window process, context-aware self-attention (CSA), target-aware
//! cross-attention (TCA) and the block that composes them.

use inbn_tensor::{Bound, Element, ParamStore, Tape, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{MultiHeadWeights, ScaleMode};
use crate::error::{CoreError, Result};
use crate::layers::{LayerNorm, Mlp2};

/// Feature map laid out as `[B, win², L, C]` with `L = H·W / win²`.
///
/// Element `(b, p, l, c)` is the pixel at in-window offset `p` (row-major inside
/// the window) of window `l` (row-major over the `H/win × W/win` grid).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowedFeature {
    pub data: Var,
    pub orig_h: usize,
    pub orig_w: usize,
    pub win: usize,
}

impl WindowedFeature {
    pub fn grid(&self) -> (usize, usize) {
        (self.orig_h / self.win, self.orig_w / self.win)
    }

    pub fn seq_len(&self) -> usize {
        self.orig_h * self.orig_w / (self.win * self.win)
    }

    fn with_data(self, data: Var) -> Self {
        Self { data, ..self }
    }
}

fn rank4<T: Element>(tape: &Tape<T>, op: &'static str, v: Var) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(tape.shape(v))
        .map_err(|_| CoreError::contract(op, format!("expected [B, H, W, C], got {:?}", tape.shape(v))))
}

pub fn window_partition<T: Element>(tape: &mut Tape<T>, f: Var, win: usize) -> Result<WindowedFeature> {
    let [b, h, w, c] = rank4(tape, "window_partition", f)?;
    for (what, size) in [("H", h), ("W", w)] {
        if win == 0 || size % win != 0 {
            return Err(TensorError::NotDivisible {
                op: "window_partition",
                what,
                size,
                by: win,
            }
            .into());
        }
    }
    let (gh, gw) = (h / win, w / win);
    let x = tape.reshape(f, [b, gh, win, gw, win, c])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let data = tape.reshape(x, [b, win * win, gh * gw, c])?;
    Ok(WindowedFeature {
        data,
        orig_h: h,
        orig_w: w,
        win,
    })
}

pub fn window_merge<T: Element>(tape: &mut Tape<T>, fw: &WindowedFeature) -> Result<Var> {
    let s = tape.shape(fw.data).to_vec();
    let win = fw.win;
    if s.len() != 4
        || win == 0
        || !fw.orig_h.is_multiple_of(win)
        || !fw.orig_w.is_multiple_of(win)
        || s[1] != win * win
        || s[2] * win * win != fw.orig_h * fw.orig_w
    {
        return Err(CoreError::contract(
            "window_merge",
            format!(
                "data shape {s:?} inconsistent with {}x{} map and win {win}",
                fw.orig_h, fw.orig_w
            ),
        ));
    }
    let (b, c) = (s[0], s[3]);
    let (gh, gw) = fw.grid();
    let x = tape.reshape(fw.data, [b, win, win, gh, gw, c])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    Ok(tape.reshape(x, [b, fw.orig_h, fw.orig_w, c])?)
}

/// `f_WP + MultiHead(f_WP, f_WP)`, attending over the window-grid axis.
pub fn csa<T: Element>(tape: &mut Tape<T>, p: &Bound, fw: &WindowedFeature, w: &MultiHeadWeights) -> Result<WindowedFeature> {
    let m = w.forward(tape, p, fw.data, fw.data)?;
    Ok(fw.with_data(tape.add(fw.data, m)?))
}

fn check_pair<T: Element>(tape: &Tape<T>, fx: &WindowedFeature, fz: &WindowedFeature) -> Result<()> {
    let (sx, sz) = (tape.shape(fx.data), tape.shape(fz.data));
    if fx.win != fz.win || sx.len() != 4 || sz.len() != 4 || sx[3] != sz[3] || sx[0] != sz[0] {
        return Err(CoreError::contract(
            "tca",
            format!(
                "candidate {sx:?} (win {}) and reference {sz:?} (win {}) disagree",
                fx.win, fz.win
            ),
        ));
    }
    Ok(())
}

/// `f_x + MultiHead(Q from f_x, K/V from f_z)`. Also returns the attention
/// weights `[B, win², heads, L_x, L_z]`.
pub fn tca_traced<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    fx: &WindowedFeature,
    fz: &WindowedFeature,
    w: &MultiHeadWeights,
) -> Result<(WindowedFeature, Var)> {
    check_pair(tape, fx, fz)?;
    let t = w.forward_traced(tape, p, fx.data, fz.data)?;
    Ok((fx.with_data(tape.add(fx.data, t.out)?), t.weights))
}

pub fn tca<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    fx: &WindowedFeature,
    fz: &WindowedFeature,
    w: &MultiHeadWeights,
) -> Result<WindowedFeature> {
    Ok(tca_traced(tape, p, fx, fz, w)?.0)
}

/// Analytic multiply-accumulate count of one CSA layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCount {
    /// Score computation plus value aggregation: `2·H²W²/win²·d`.
    pub attention: u64,
    /// Q, K, V and output projections: `4·HW·C·d`.
    pub projections: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.attention + self.projections
    }
}

pub fn count_macs_csa(h: usize, w: usize, c: usize, d: usize, win: usize) -> Result<MacCount> {
    for (what, size) in [("H", h), ("W", w)] {
        if win == 0 || size % win != 0 {
            return Err(TensorError::NotDivisible {
                op: "count_macs_csa",
                what,
                size,
                by: win,
            }
            .into());
        }
    }
    let (hw, win2) = ((h * w) as u64, (win * win) as u64);
    let l = hw / win2;
    Ok(MacCount {
        attention: 2 * win2 * l * l * d as u64,
        projections: 4 * hw * (c * d) as u64,
    })
}

/// Shape and behavior of one GIM block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GimConfig {
    pub channels: usize,
    pub inner: usize,
    pub heads: usize,
    pub win: usize,
    pub tca: bool,
    pub swin_style: bool,
    pub share_csa: bool,
    pub bias: bool,
    pub scale: ScaleMode,
    /// Zero-pad non-divisible maps up to a multiple of `win`, crop after merging.
    pub pad_to_window: bool,
}

impl GimConfig {
    pub fn new(channels: usize, inner: usize, heads: usize, win: usize, tca: bool) -> Self {
        Self {
            channels,
            inner,
            heads,
            win,
            tca,
            swin_style: false,
            share_csa: true,
            bias: false,
            scale: ScaleMode::FullWidth,
            pad_to_window: false,
        }
    }
}

/// Pre-norms and ratio-4 MLPs used when `swin_style` is on.
#[derive(Debug, Clone)]
pub struct SwinParts {
    pub csa_norm: LayerNorm,
    pub csa_mlp_norm: LayerNorm,
    pub csa_mlp: Mlp2,
    pub tca_norm_q: Option<LayerNorm>,
    pub tca_norm_kv: Option<LayerNorm>,
    pub tca_mlp_norm: Option<LayerNorm>,
    pub tca_mlp: Option<Mlp2>,
}

#[derive(Debug, Clone)]
pub struct GimWeights {
    pub cfg: GimConfig,
    pub csa: MultiHeadWeights,
    /// Separate reference-stream CSA when `share_csa` is off.
    pub csa_ref: Option<MultiHeadWeights>,
    pub tca: Option<MultiHeadWeights>,
    pub swin: Option<SwinParts>,
}

/// Intermediate values of the candidate stream through one block.
#[derive(Debug, Clone, Copy)]
pub struct GimTrace {
    pub out: Var,
    pub csa: WindowedFeature,
    pub tca: Option<WindowedFeature>,
    pub tca_weights: Option<Var>,
}

impl GimWeights {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: GimConfig, rng: &mut impl Rng) -> Result<Self> {
        let mh = |store: &mut ParamStore<T>, n: &str, rng: &mut _| {
            MultiHeadWeights::new(store, &format!("{name}.{n}"), cfg.channels, cfg.inner, cfg.heads, cfg.bias, cfg.scale, rng)
        };
        let csa = mh(store, "csa", rng)?;
        let csa_ref = if cfg.share_csa {
            None
        } else {
            Some(mh(store, "csa_ref", rng)?)
        };
        let tca = if cfg.tca { Some(mh(store, "tca", rng)?) } else { None };
        let swin = if cfg.swin_style {
            let c = cfg.channels;
            let ln = |store: &mut ParamStore<T>, n: &str| LayerNorm::new(store, &format!("{name}.{n}"), c);
            let csa_norm = ln(store, "csa_norm")?;
            let csa_mlp_norm = ln(store, "csa_mlp_norm")?;
            let csa_mlp = Mlp2::new(store, &format!("{name}.csa_mlp"), c, 4 * c, cfg.bias, rng)?;
            let (tca_norm_q, tca_norm_kv, tca_mlp_norm, tca_mlp) = if cfg.tca {
                (
                    Some(ln(store, "tca_norm_q")?),
                    Some(ln(store, "tca_norm_kv")?),
                    Some(ln(store, "tca_mlp_norm")?),
                    Some(Mlp2::new(store, &format!("{name}.tca_mlp"), c, 4 * c, cfg.bias, rng)?),
                )
            } else {
                (None, None, None, None)
            };
            Some(SwinParts {
                csa_norm,
                csa_mlp_norm,
                csa_mlp,
                tca_norm_q,
                tca_norm_kv,
                tca_mlp_norm,
                tca_mlp,
            })
        } else {
            None
        };
        Ok(Self {
            cfg,
            csa,
            csa_ref,
            tca,
            swin,
        })
    }

    fn pad_amount(&self, h: usize, w: usize) -> (usize, usize) {
        let win = self.cfg.win;
        if !self.cfg.pad_to_window {
            return (0, 0);
        }
        (h.div_ceil(win) * win - h, w.div_ceil(win) * win - w)
    }

    fn partition<T: Element>(&self, tape: &mut Tape<T>, f: Var) -> Result<WindowedFeature> {
        let [_, h, w, _] = rank4(tape, "gim_block", f)?;
        let (ph, pw) = self.pad_amount(h, w);
        let mut f = f;
        if ph > 0 {
            f = tape.pad(f, 1, 0, ph)?;
        }
        if pw > 0 {
            f = tape.pad(f, 2, 0, pw)?;
        }
        window_partition(tape, f, self.cfg.win)
    }

    fn merge<T: Element>(&self, tape: &mut Tape<T>, fw: &WindowedFeature, h: usize, w: usize) -> Result<Var> {
        let mut f = window_merge(tape, fw)?;
        if fw.orig_h != h {
            f = tape.narrow(f, 1, 0, h)?;
        }
        if fw.orig_w != w {
            f = tape.narrow(f, 2, 0, w)?;
        }
        Ok(f)
    }

    fn csa_sublayer<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        fw: &WindowedFeature,
        w: &MultiHeadWeights,
    ) -> Result<WindowedFeature> {
        let Some(s) = &self.swin else {
            return csa(tape, p, fw, w);
        };
        let n = s.csa_norm.forward(tape, p, fw.data)?;
        let a = w.forward(tape, p, n, n)?;
        let x = tape.add(fw.data, a)?;
        let n = s.csa_mlp_norm.forward(tape, p, x)?;
        let m = s.csa_mlp.forward(tape, p, n)?;
        Ok(fw.with_data(tape.add(x, m)?))
    }

    fn tca_sublayer<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        fx: &WindowedFeature,
        fz: &WindowedFeature,
        w: &MultiHeadWeights,
    ) -> Result<(WindowedFeature, Var)> {
        let Some(s) = &self.swin else {
            return tca_traced(tape, p, fx, fz, w);
        };
        check_pair(tape, fx, fz)?;
        let (nq, nkv, nm, mlp) = (
            s.tca_norm_q.as_ref().expect("tca norms exist with tca"),
            s.tca_norm_kv.as_ref().expect("tca norms exist with tca"),
            s.tca_mlp_norm.as_ref().expect("tca norms exist with tca"),
            s.tca_mlp.as_ref().expect("tca mlp exists with tca"),
        );
        let q = nq.forward(tape, p, fx.data)?;
        let kv = nkv.forward(tape, p, fz.data)?;
        let t = w.forward_traced(tape, p, q, kv)?;
        let x = tape.add(fx.data, t.out)?;
        let n = nm.forward(tape, p, x)?;
        let m = mlp.forward(tape, p, n)?;
        Ok((fx.with_data(tape.add(x, m)?), t.weights))
    }

    /// Reference stream: returns the merged output and the windowed post-CSA
    /// feature that a TCA sublayer consumes as keys and values.
    pub fn forward_reference<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<(Var, WindowedFeature)> {
        let [_, h, w, _] = rank4(tape, "gim_block", z)?;
        let zw = self.partition(tape, z)?;
        let csa_w = self.csa_ref.as_ref().unwrap_or(&self.csa);
        let zw = self.csa_sublayer(tape, p, &zw, csa_w)?;
        Ok((self.merge(tape, &zw, h, w)?, zw))
    }

    /// Candidate stream, with the reference's windowed post-CSA feature when TCA is configured.
    pub fn forward_candidate<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        kv: Option<&WindowedFeature>,
    ) -> Result<GimTrace> {
        let [_, h, w, _] = rank4(tape, "gim_block", x)?;
        let xw = self.partition(tape, x)?;
        let csa_out = self.csa_sublayer(tape, p, &xw, &self.csa)?;
        let (last, tca_out, tca_weights) = match (&self.tca, kv) {
            (Some(tw), Some(kv)) => {
                let (t, wts) = self.tca_sublayer(tape, p, &csa_out, kv, tw)?;
                (t, Some(t), Some(wts))
            }
            (Some(_), None) => {
                return Err(CoreError::contract("gim_block", "TCA configured but no reference feature given"));
            }
            (None, _) => (csa_out, None, None),
        };
        Ok(GimTrace {
            out: self.merge(tape, &last, h, w)?,
            csa: csa_out,
            tca: tca_out,
            tca_weights,
        })
    }

    /// Both streams through one block: WP → CSA (both) → TCA (candidate) → merge.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, fx: Var, fz: Option<Var>) -> Result<(Var, Option<Var>)> {
        let (z_out, kv) = match fz {
            Some(z) => {
                let (o, kv) = self.forward_reference(tape, p, z)?;
                (Some(o), Some(kv))
            }
            None => (None, None),
        };
        let kv = if self.tca.is_some() { kv } else { None };
        let t = self.forward_candidate(tape, p, fx, kv.as_ref())?;
        Ok((t.out, z_out))
    }
}
