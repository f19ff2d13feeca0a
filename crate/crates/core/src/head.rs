//! Depth-wise correlation matching and the classification / regression MLPs.

use inbn_tensor::{Bound, Element, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layers::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Correlation channels (the fused width).
    pub in_channels: usize,
    /// Width of the adapter and both MLPs.
    pub hidden: usize,
    pub bias: bool,
    /// Divide the correlation by the kernel area so its scale does not depend on the reference size.
    pub normalize_xcorr: bool,
    /// Append each cell's normalized `(x, y)` to the correlation before the
    /// adapter. Correlation features are translation-equivariant, so without
    /// this a per-position head cannot regress crop-absolute coordinates.
    #[serde(default)]
    pub coord_channels: bool,
}

impl HeadConfig {
    pub fn adapter_width(&self) -> usize {
        self.in_channels + if self.coord_channels { 2 } else { 0 }
    }

    pub fn new(in_channels: usize, hidden: usize) -> Self {
        Self {
            in_channels,
            hidden,
            bias: false,
            normalize_xcorr: true,
            coord_channels: true,
        }
    }
}

/// Per-channel valid cross-correlation of `fx [B,Hx,Wx,C]` with kernel `fz [B,Hz,Wz,C]`.
pub fn depthwise_xcorr<T: Element>(tape: &mut Tape<T>, fx: Var, fz: Var) -> Result<Var> {
    Ok(tape.depthwise_xcorr(fx, fz)?)
}

/// `[B, H, W, 2]` cell centers `((j + 0.5)/W − 0.5, (i + 0.5)/H − 0.5)`.
pub fn coord_grid<T: Element>(b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    Ok(Tensor::from_fn([b, h, w, 2], |ix| {
        let v = if ix[3] == 0 {
            (ix[2] as f64 + 0.5) / w as f64
        } else {
            (ix[1] as f64 + 0.5) / h as f64
        };
        T::of(v - 0.5)
    })?)
}

/// Three linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            layers: [
                Linear::new(store, &format!("{name}.fc0"), c, c, bias, rng)?,
                Linear::new(store, &format!("{name}.fc1"), c, c, bias, rng)?,
                Linear::new(store, &format!("{name}.fc2"), c, out, bias, rng)?,
            ],
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, p, h)?;
        let h = tape.relu(h);
        self.layers[2].forward(tape, p, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// Logits `[B, H', W']`.
    pub cls: Var,
    /// `(cx, cy, w, h)` in `(0, 1)` relative to the candidate crop, `[B, H', W', 4]`.
    pub reg: Var,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub cfg: HeadConfig,
    pub adapter: Linear,
    pub cls: Mlp3,
    pub reg: Mlp3,
}

impl Head {
    pub fn new<T: Element>(store: &mut ParamStore<T>, cfg: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            cfg,
            adapter: Linear::new(store, "head.adapter", cfg.adapter_width(), cfg.hidden, cfg.bias, rng)?,
            cls: Mlp3::new(store, "head.cls", cfg.hidden, 1, cfg.bias, rng)?,
            reg: Mlp3::new(store, "head.reg", cfg.hidden, 4, cfg.bias, rng)?,
        })
    }

    pub fn correlate<T: Element>(&self, tape: &mut Tape<T>, fx: Var, fz: Var) -> Result<Var> {
        let c = depthwise_xcorr(tape, fx, fz)?;
        if !self.cfg.normalize_xcorr {
            return Ok(c);
        }
        let s = tape.shape(fz);
        let area = (s[1] * s[2]) as f64;
        Ok(tape.scale(c, 1.0 / area))
    }

    pub fn predict<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, corr: Var) -> Result<HeadOutput> {
        let s = tape.shape(corr).to_vec();
        if s.len() != 4 || s[3] != self.cfg.in_channels {
            return Err(CoreError::contract(
                "predict",
                format!("correlation {s:?} does not end in {} channels", self.cfg.in_channels),
            ));
        }
        let corr = if self.cfg.coord_channels {
            let coords = coord_grid::<T>(s[0], s[1], s[2])?;
            let coords = tape.constant(coords);
            tape.concat(&[corr, coords], 3)?
        } else {
            corr
        };
        let a = self.adapter.forward(tape, p, corr)?;
        let cls = self.cls.forward(tape, p, a)?;
        let cls = tape.reshape(cls, [s[0], s[1], s[2]])?;
        let reg = self.reg.forward(tape, p, a)?;
        let reg = tape.sigmoid(reg);
        Ok(HeadOutput { cls, reg })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, fx: Var, fz: Var) -> Result<HeadOutput> {
        let c = self.correlate(tape, fx, fz)?;
        self.predict(tape, p, c)
    }
}
