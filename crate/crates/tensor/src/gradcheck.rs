//! Central finite-difference verification of tape gradients.
//!
//! Meaningful tolerances need 64-bit elements; the 32-bit instantiation exists
//! only for coarse smoke checks.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Options for [`FiniteDiff::check`].
#[derive(Debug, Clone)]
pub struct FiniteDiff {
    pub h: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: Option<usize>,
    /// Op whose backward is deliberately corrupted on the analytic pass.
    pub fault: Option<String>,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            h: DEFAULT_STEP,
            max_coords: None,
            fault: None,
        }
    }
}

impl FiniteDiff {
    /// `f` records a scalar function of the leaf vars onto a fresh tape.
    /// Generic over the closure's error type so callers can record ops from other crates.
    pub fn check<T, F, E>(&self, xs: &[Tensor<T>], mut f: F) -> std::result::Result<CheckReport, E>
    where
        T: Element,
        F: FnMut(&mut Tape<T>, &[Var]) -> std::result::Result<Var, E>,
        E: From<TensorError>,
    {
        let mut tape = Tape::new();
        tape.inject_fault(self.fault.as_deref());
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;

        let mut eval = |inputs: &[Tensor<T>]| -> std::result::Result<f64, E> {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let l = f(&mut t, &vs)?;
            Ok(t.value(l).item().as_f64())
        };

        let mut report = CheckReport {
            max_rel_err: 0.0,
            worst: (0, 0),
            coords_checked: 0,
        };
        let mut work: Vec<Tensor<T>> = xs.to_vec();
        let h = T::of(self.h);
        for (i, x) in xs.iter().enumerate() {
            let analytic = grads.get(vars[i]);
            let n = x.numel();
            let stride = self.max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
            for j in (0..n).step_by(stride) {
                let orig = x.data()[j];
                work[i].data_mut()[j] = orig + h;
                let fp = eval(&work)?;
                work[i].data_mut()[j] = orig - h;
                let fm = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * h.as_f64());
                let a = analytic.map_or(0.0, |g| g.data()[j].as_f64());
                let err = (a - numeric).abs() / numeric.abs().max(1.0);
                report.coords_checked += 1;
                if err > report.max_rel_err || err.is_nan() {
                    report.max_rel_err = err;
                    report.worst = (i, j);
                }
            }
        }
        Ok(report)
    }
}

/// Single-input convenience wrapper with the default step; returns the max relative error.
pub fn finite_diff_check<F>(x: &Tensor<f64>, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let fd = FiniteDiff {
        h,
        ..FiniteDiff::default()
    };
    Ok(fd.check(std::slice::from_ref(x), |t, v| f(t, v[0]))?.max_rel_err)
}
