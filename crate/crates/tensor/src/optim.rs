use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    lr_default: f64,
    lr_prefix: Vec<(String, f64)>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_default: lr,
            lr_prefix: Vec::new(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Parameters whose name starts with `prefix` use `lr` instead of the default.
    pub fn with_prefix_lr(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.lr_prefix.push((prefix.into(), lr));
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.lr_prefix
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.lr_default, |&(_, lr)| lr)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(TensorError::contract(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, _, p)| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let eps = T::of(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = T::of(self.lr_for(store.name(id)));
            let decay = lr * T::of(self.weight_decay);
            let g: &Tensor<T> = &grads[i];
            let p = store.get_mut(id);
            p.expect_same_shape(g, "adamw")?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w = *w - decay * *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
