//! Parameterized building blocks shared by the attention, backbone and head modules.

use inbn_tensor::{Bound, Element, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// `x · W (+ b)` over the last axis. Weights are `[C_in, C_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    /// Weights drawn from N(0, 1/C_in); bias starts at zero.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = (1.0 / cin as f64).sqrt();
        Self::with_std(store, name, cin, cout, bias, std, rng)
    }

    pub fn with_std<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), Tensor::randn([cin, cout], std, rng)?)?;
        let b = if bias {
            Some(store.insert(format!("{name}.b"), Tensor::zeros([cout])?)?)
        } else {
            None
        };
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.linear(x, p.var(self.w))?;
        Ok(match self.b {
            Some(b) => tape.add_bias(y, p.var(b))?,
            None => y,
        })
    }
}

/// Layer normalization over channels with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones([c])?)?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros([c])?)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), Self::EPS)?)
    }
}

/// Two linear layers with GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        hidden: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, bias, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c, bias, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}
