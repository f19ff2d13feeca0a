//! Slow, literal nested-loop reference implementations shared by the test targets.
#![allow(dead_code, clippy::too_many_arguments)]

use inbn_tensor::{ParamStore, Tensor};
use rand::Rng;

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng).unwrap()
}

/// Max over elements of `|a − b| / max(1, |b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get_by_name(name).unwrap_or_else(|| panic!("no param {name}")).data().to_vec()
}

/// `x [n, cin] · w [cin, cout]`.
pub fn matmul(x: &[f64], w: &[f64], n: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * cout];
    for i in 0..n {
        for o in 0..cout {
            let mut s = 0.0;
            for c in 0..cin {
                s += x[i * cin + c] * w[c * cout + o];
            }
            y[i * cout + o] = s;
        }
    }
    y
}

/// Single attention instance: `q [nq, dk]`, `k [nk, dk]`, `v [nk, dv]`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, dk: usize, dv: usize, scale_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let mut logits = vec![0.0; nk];
        for j in 0..nk {
            let mut s = 0.0;
            for c in 0..dk {
                s += q[i * dk + c] * k[j * dk + c];
            }
            logits[j] = s / (scale_dim as f64).sqrt();
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..dv {
            let mut s = 0.0;
            for j in 0..nk {
                s += e[j] / z * v[j * dv + c];
            }
            out[i * dv + c] = s;
        }
    }
    out
}

/// Weights of one multi-head layer read out of a store (no biases).
pub struct MhWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wmap: Vec<f64>,
    pub c: usize,
    pub d: usize,
    pub heads: usize,
    pub scale_dim: usize,
}

impl MhWeights {
    pub fn read(store: &ParamStore<f64>, name: &str, c: usize, d: usize, heads: usize, scale_dim: usize) -> Self {
        Self {
            wq: param(store, &format!("{name}.w_q.w")),
            wk: param(store, &format!("{name}.w_k.w")),
            wv: param(store, &format!("{name}.w_v.w")),
            wmap: param(store, &format!("{name}.w_map.w")),
            c,
            d,
            heads,
            scale_dim,
        }
    }

    /// One instance: `xq [nq, C]`, `xkv [nk, C]` → `[nq, C]`, materializing per-head slices.
    pub fn apply(&self, xq: &[f64], xkv: &[f64], nq: usize, nk: usize) -> Vec<f64> {
        let (c, d) = (self.c, self.d);
        let q = matmul(xq, &self.wq, nq, c, d);
        let k = matmul(xkv, &self.wk, nk, c, d);
        let v = matmul(xkv, &self.wv, nk, c, d);
        let dh = d / self.heads;
        let mut cat = vec![0.0; nq * d];
        for h in 0..self.heads {
            let slice = |m: &[f64], n: usize| -> Vec<f64> {
                let mut s = Vec::with_capacity(n * dh);
                for i in 0..n {
                    s.extend_from_slice(&m[i * d + h * dh..i * d + (h + 1) * dh]);
                }
                s
            };
            let o = attention(&slice(&q, nq), &slice(&k, nk), &slice(&v, nk), nq, nk, dh, dh, self.scale_dim);
            for i in 0..nq {
                cat[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
            }
        }
        matmul(&cat, &self.wmap, nq, d, c)
    }
}

/// Sequence at in-window offset `(pr, pc)` of a `[H, W, C]` map: one pixel per window, windows row-major.
pub fn window_sequence(f: &[f64], h: usize, w: usize, c: usize, win: usize, pr: usize, pc: usize) -> Vec<f64> {
    let mut s = Vec::new();
    for gr in 0..h / win {
        for gc in 0..w / win {
            let (r, col) = (gr * win + pr, gc * win + pc);
            s.extend_from_slice(&f[(r * w + col) * c..(r * w + col + 1) * c]);
        }
    }
    s
}

fn scatter_sequence(out: &mut [f64], seq: &[f64], h: usize, w: usize, c: usize, win: usize, pr: usize, pc: usize) {
    let mut l = 0;
    for gr in 0..h / win {
        for gc in 0..w / win {
            let (r, col) = (gr * win + pr, gc * win + pc);
            out[(r * w + col) * c..(r * w + col + 1) * c].copy_from_slice(&seq[l * c..(l + 1) * c]);
            l += 1;
        }
    }
}

/// Residual windowed attention on one `[H, W, C]` image; queries from `fx`, keys/values from `fz`.
pub fn windowed_attention(
    fx: &[f64],
    (hx, wx): (usize, usize),
    fz: &[f64],
    (hz, wz): (usize, usize),
    win: usize,
    mh: &MhWeights,
) -> Vec<f64> {
    let c = mh.c;
    let mut out = vec![0.0; fx.len()];
    for pr in 0..win {
        for pc in 0..win {
            let sq = window_sequence(fx, hx, wx, c, win, pr, pc);
            let sk = window_sequence(fz, hz, wz, c, win, pr, pc);
            let nq = sq.len() / c;
            let nk = sk.len() / c;
            let m = mh.apply(&sq, &sk, nq, nk);
            let res: Vec<f64> = sq.iter().zip(&m).map(|(a, b)| a + b).collect();
            scatter_sequence(&mut out, &res, hx, wx, c, win, pr, pc);
        }
    }
    out
}

/// Valid per-channel cross-correlation of `x [Hx, Wx, C]` with `z [Hz, Wz, C]`.
pub fn xcorr(x: &[f64], (hx, wx): (usize, usize), z: &[f64], (hz, wz): (usize, usize), c: usize) -> Vec<f64> {
    let (ho, wo) = (hx - hz + 1, wx - wz + 1);
    let mut out = vec![0.0; ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c {
                let mut s = 0.0;
                for u in 0..hz {
                    for v in 0..wz {
                        s += x[((i + u) * wx + j + v) * c + ch] * z[(u * wz + v) * c + ch];
                    }
                }
                out[(i * wo + j) * c + ch] = s;
            }
        }
    }
    out
}

/// Patch embedding of `x [H, W, Cin]` with `w [(r·P + s)·Cin + c, Cout]`.
pub fn patch_embed(x: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], p: usize, cout: usize) -> Vec<f64> {
    let (ho, wo) = (h / p, w / p);
    let mut out = vec![0.0; ho * wo * cout];
    for i in 0..ho {
        for j in 0..wo {
            for o in 0..cout {
                let mut s = 0.0;
                for r in 0..p {
                    for q in 0..p {
                        for c in 0..cin {
                            s += x[((i * p + r) * w + j * p + q) * cin + c] * wt[((r * p + q) * cin + c) * cout + o];
                        }
                    }
                }
                out[(i * wo + j) * cout + o] = s;
            }
        }
    }
    out
}

/// 3×3 convolution, zero padding 1, `w [3, 3, Cin, Cout]`.
pub fn conv3x3(x: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], cout: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
    let mut out = vec![0.0; ho * wo * cout];
    for i in 0..ho {
        for j in 0..wo {
            for o in 0..cout {
                let mut s = 0.0;
                for u in 0..3 {
                    for v in 0..3 {
                        let (y, xx) = ((i * stride + u) as isize - 1, (j * stride + v) as isize - 1);
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            s += x[((y as usize) * w + xx as usize) * cin + c] * wt[((u * 3 + v) * cin + c) * cout + o];
                        }
                    }
                }
                out[(i * wo + j) * cout + o] = s;
            }
        }
    }
    (out, ho, wo)
}

/// Nearest-neighbour upsampling or block averaging of `[H, W, C]` to `[t, t, C]`.
pub fn resample(x: &[f64], h: usize, c: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t * c];
    if t >= h {
        let f = t / h;
        for i in 0..t {
            for j in 0..t {
                for ch in 0..c {
                    out[(i * t + j) * c + ch] = x[((i / f) * h + j / f) * c + ch];
                }
            }
        }
    } else {
        let f = h / t;
        for i in 0..t {
            for j in 0..t {
                for ch in 0..c {
                    let mut s = 0.0;
                    for u in 0..f {
                        for v in 0..f {
                            s += x[((i * f + u) * h + j * f + v) * c + ch];
                        }
                    }
                    out[(i * t + j) * c + ch] = s / (f * f) as f64;
                }
            }
        }
    }
    out
}

pub fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GIoU straight from the definition, boxes in corner form.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
    inter / union - (area(hull) - union) / area(hull)
}
