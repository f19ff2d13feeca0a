//! Attention cost measurements: analytic MAC counts next to wall-clock timings.

use std::time::Instant;

use inbn_tensor::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gim::{count_macs_csa, csa, window_partition, GimConfig, GimWeights};

/// Widths of the benchmarked attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchShape {
    pub channels: usize,
    pub inner: usize,
    pub heads: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self {
            channels: 32,
            inner: 32,
            heads: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub h: usize,
    pub w: usize,
    pub win: usize,
    pub k1: usize,
    pub k2: usize,
    pub macs_attention: u64,
    pub macs_total: u64,
    pub wall_ms: f64,
}

fn block(shape: BenchShape, win: usize, tca: bool) -> Result<(ParamStore<f32>, GimWeights)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = GimConfig::new(shape.channels, shape.inner, shape.heads, win, tca);
    let g = GimWeights::new(&mut store, "bench", cfg, &mut rng)?;
    Ok((store, g))
}

fn best_of(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    // untimed warm-up: first-touch page faults and allocator growth
    f()?;
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Fastest of `reps` CSA forward passes (after one warm-up pass) on an `h × w` map, in milliseconds.
pub fn time_csa(h: usize, w: usize, win: usize, shape: BenchShape, reps: usize) -> Result<f64> {
    let (store, g) = block(shape, win, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::uniform([1, h, w, shape.channels], -1.0, 1.0, &mut rng)?;
    best_of(reps, || {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let fw = window_partition(&mut tape, xv, win)?;
        csa(&mut tape, &p, &fw, &g.csa)?;
        Ok(())
    })
}

/// Fastest of `reps` forward + backward passes of one CSA + TCA block with an
/// `h × h` candidate and an `h/2 × h/2` reference, in milliseconds.
pub fn time_gim_step(h: usize, win: usize, shape: BenchShape, reps: usize) -> Result<f64> {
    let (store, g) = block(shape, win, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::uniform([1, h, h, shape.channels], -1.0, 1.0, &mut rng)?;
    let z = Tensor::<f32>::uniform([1, h / 2, h / 2, shape.channels], -1.0, 1.0, &mut rng)?;
    best_of(reps, || {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let (xv, zv) = (tape.constant(x.clone()), tape.constant(z.clone()));
        let (out, _) = g.forward(&mut tape, &p, xv, Some(zv))?;
        let loss = tape.mean(out);
        tape.backward(loss)?;
        Ok(())
    })
}

/// One row per square `(size, win)` pair; indivisible pairs are skipped and reported as notes.
pub fn bench_attn(sizes: &[usize], wins: &[usize], shape: BenchShape, reps: usize) -> Result<(Vec<BenchRow>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for &h in sizes {
        for &win in wins {
            if win == 0 || h % win != 0 {
                notes.push(format!("skipped H={h} win={win}: {h} is not divisible by {win}"));
                continue;
            }
            let m = count_macs_csa(h, h, shape.channels, shape.inner, win)?;
            rows.push(BenchRow {
                h,
                w: h,
                win,
                k1: h / win,
                k2: h / win,
                macs_attention: m.attention,
                macs_total: m.total(),
                wall_ms: time_csa(h, h, win, shape, reps)?,
            });
        }
    }
    Ok((rows, notes))
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("H,W,win,k1,k2,macs_attention,macs_total,wall_ms\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.4}\n",
            r.h, r.w, r.win, r.k1, r.k2, r.macs_attention, r.macs_total, r.wall_ms
        ));
    }
    s
}
