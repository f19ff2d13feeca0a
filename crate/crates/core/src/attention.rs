//! Scaled dot-product attention and its multi-head form.

use inbn_tensor::{Bound, Element, ParamStore, Tape, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::Linear;

/// Which channel count goes under the square root of the logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `√d` with `d` the full inner width of the multi-head layer.
    #[default]
    FullWidth,
    /// `√(d/n)`.
    PerHead,
}

/// `softmax(q·kᵀ / √scale_dim) · v` over the last two axes.
///
/// Returns `(output [..., N_Q, d_h], weights [..., N_Q, N_K])`.
pub fn attention<T: Element>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, scale_dim: usize) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() < 2 || ks.len() < 2 || vs.len() < 2 {
        return Err(TensorError::contract("attention", "q, k and v need rank >= 2").into());
    }
    if qs[qs.len() - 1] != ks[ks.len() - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: qs,
            rhs: ks,
        }
        .into());
    }
    if ks[ks.len() - 2] != vs[vs.len() - 2] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: ks,
            rhs: vs,
        }
        .into());
    }
    let logits = tape.matmul_t(q, k)?;
    let logits = tape.scale(logits, 1.0 / (scale_dim as f64).sqrt());
    let last = tape.shape(logits).len() - 1;
    let weights = tape.softmax(logits, last)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Projections of one multi-head layer. `w_q`, `w_k`, `w_v`: `[C, d]`; `w_map`: `[d, C]`.
#[derive(Debug, Clone)]
pub struct MultiHeadWeights {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_map: Linear,
    pub heads: usize,
    pub inner: usize,
    pub channels: usize,
    pub scale: ScaleMode,
}

/// Output of [`MultiHeadWeights::forward_traced`].
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadTrace {
    pub out: Var,
    /// `[..., heads, N_Q, N_K]`.
    pub weights: Var,
}

impl MultiHeadWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        inner: usize,
        heads: usize,
        bias: bool,
        scale: ScaleMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !inner.is_multiple_of(heads) {
            return Err(TensorError::NotDivisible {
                op: "multi_head",
                what: "inner width d",
                size: inner,
                by: heads,
            }
            .into());
        }
        Ok(Self {
            w_q: Linear::new(store, &format!("{name}.w_q"), channels, inner, bias, rng)?,
            w_k: Linear::new(store, &format!("{name}.w_k"), channels, inner, bias, rng)?,
            w_v: Linear::new(store, &format!("{name}.w_v"), channels, inner, bias, rng)?,
            w_map: Linear::new(store, &format!("{name}.w_map"), inner, channels, bias, rng)?,
            heads,
            inner,
            channels,
            scale,
        })
    }

    pub fn head_width(&self) -> usize {
        self.inner / self.heads
    }

    fn scale_dim(&self) -> usize {
        match self.scale {
            ScaleMode::FullWidth => self.inner,
            ScaleMode::PerHead => self.head_width(),
        }
    }

    /// `[..., N, d]` → `[..., n, N, d/n]` using contiguous channel chunks.
    fn split_heads<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let r = s.len();
        let mut shape = s[..r - 1].to_vec();
        shape.extend([self.heads, self.head_width()]);
        let x = tape.reshape(x, shape)?;
        let mut perm: Vec<usize> = (0..r + 1).collect();
        perm.swap(r - 2, r - 1);
        Ok(tape.permute(x, &perm)?)
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    fn merge_heads<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let r = tape.shape(x).len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 3, r - 2);
        let x = tape.permute(x, &perm)?;
        let s = tape.shape(x).to_vec();
        let mut shape = s[..r - 2].to_vec();
        shape.push(self.inner);
        Ok(tape.reshape(x, shape)?)
    }

    fn check_channels<T: Element>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() < 2 || s[s.len() - 1] != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head",
                lhs: s.to_vec(),
                rhs: vec![self.channels, self.inner],
            }
            .into());
        }
        Ok(())
    }

    /// Queries from `x_q [..., N_Q, C]`, keys and values from `x_kv [..., N_K, C]`.
    pub fn forward_traced<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x_q: Var, x_kv: Var) -> Result<MultiHeadTrace> {
        self.check_channels(tape, x_q)?;
        self.check_channels(tape, x_kv)?;
        let q = self.w_q.forward(tape, p, x_q)?;
        let k = self.w_k.forward(tape, p, x_kv)?;
        let v = self.w_v.forward(tape, p, x_kv)?;
        let (q, k, v) = if self.heads == 1 {
            (q, k, v)
        } else {
            (self.split_heads(tape, q)?, self.split_heads(tape, k)?, self.split_heads(tape, v)?)
        };
        let (o, weights) = attention(tape, q, k, v, self.scale_dim())?;
        let (o, weights) = if self.heads == 1 {
            // keep the head axis in the trace so its layout does not depend on n
            let ws = tape.shape(weights).to_vec();
            let mut shape = ws[..ws.len() - 2].to_vec();
            shape.extend([1, ws[ws.len() - 2], ws[ws.len() - 1]]);
            (o, tape.reshape(weights, shape)?)
        } else {
            (self.merge_heads(tape, o)?, weights)
        };
        let out = self.w_map.forward(tape, p, o)?;
        Ok(MultiHeadTrace { out, weights })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x_q: Var, x_kv: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, x_q, x_kv)?.out)
    }
}
