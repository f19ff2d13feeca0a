//! Acceptance run: one PASS/FAIL line per criterion, executed sequentially so the
//! wall-clock measurements do not compete for the CPU. Built without the libtest
//! harness so the report always reaches the log; exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{rel_err, MhWeights};
use inbn_core::attention::{attention, MultiHeadWeights, ScaleMode};
use inbn_core::backbone::{conv_block, patch_embed};
use inbn_core::bbox::{BBox, BoxFrame};
use inbn_core::bench::{time_csa, time_gim_step, BenchShape};
use inbn_core::checkpoint::Checkpoint;
use inbn_core::gim::{count_macs_csa, csa, tca, tca_traced, window_merge, window_partition, GimConfig, GimWeights};
use inbn_core::gradcheck::{run_suite, CHECK_NAMES};
use inbn_core::harness::{evaluate, mean, median, train_toy, ToyTaskConfig, TrainConfig, TrainResult};
use inbn_core::head::{depthwise_xcorr, Head, HeadConfig};
use inbn_core::loss::giou;
use inbn_core::model::{Model, ModelConfig};
use inbn_core::tracker::{hanning2d, postprocess};
use inbn_tensor::{FiniteDiff, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// The system allocator unmaps large tensor buffers on free, so every pass pays
// for fresh page faults and the timings swing by 2x between runs.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, ok: bool, detail: String) {
        println!("{} criterion {n} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(n);
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let results = run_suite::<f64>("toy", 0, &FiniteDiff::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = results.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let bad: Vec<&str> = results.iter().filter(|c| c.report.max_rel_err > 1e-4).map(|c| c.name).collect();
    for c in &results {
        println!("    {:<16} {:.2e}", c.name, c.report.max_rel_err);
    }
    let ok = bad.is_empty() && results.len() == CHECK_NAMES.len() && elapsed <= Duration::from_secs(120);
    r.line(1, "gradients", ok, format!("{} checks, worst rel err {worst:.2e}, failing {bad:?}, {}", results.len(), secs(elapsed)));
}

fn block(c: usize, d: usize, heads: usize, win: usize, seed: u64) -> (ParamStore<f64>, GimWeights) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GimWeights::new(&mut store, "g", GimConfig::new(c, d, heads, win, true), &mut rng).unwrap();
    (store, g)
}

fn identities(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;

    let cls: Vec<f64> = (0..225).map(|_| rng.random::<f64>()).collect();
    let pen: Vec<f64> = (0..225).map(|_| rng.random_range(0.5..1.0)).collect();
    let han = hanning2d(15, 15);
    let w0 = postprocess(&cls, &pen, &han, 0.0).unwrap();
    let w1 = postprocess(&cls, &pen, &han, 1.0).unwrap();
    let blend = (0..225).all(|k| w0[k].to_bits() == (cls[k] * pen[k]).to_bits() && w1[k].to_bits() == han[k].to_bits());
    ok &= blend;

    let (store, g) = block(4, 4, 2, 2, 1);
    let w = g.tca.as_ref().unwrap();
    let f = common::randn(&[1, 6, 4, 4], &mut rng);
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let fv = t.constant(f);
    let fw = window_partition(&mut t, fv, 2).unwrap();
    let zv = t.constant(Tensor::zeros([1, 4, 4, 4]).unwrap());
    let zw = window_partition(&mut t, zv, 2).unwrap();
    let zero_ref = tca(&mut t, &p, &fw, &zw, w).unwrap();
    let tca_zero = t.value(zero_ref.data) == t.value(fw.data);
    let a = tca(&mut t, &p, &fw, &fw, w).unwrap();
    let b = csa(&mut t, &p, &fw, w).unwrap();
    let tca_self = t.value(a.data) == t.value(b.data);
    ok &= tca_zero && tca_self;

    let vt = common::randn(&[4, 1, 3], &mut rng);
    let q = t.constant(common::randn(&[4, 1, 5], &mut rng));
    let k = t.constant(common::randn(&[4, 1, 5], &mut rng));
    let v = t.constant(vt.clone());
    let (o, _) = attention(&mut t, q, k, v, 5).unwrap();
    let singleton = t.value(o) == &vt;
    ok &= singleton;

    r.line(
        2,
        "identities",
        ok,
        format!("blend w=0/w=1 {blend}, tca(f,0)=f {tca_zero}, tca(f,f)=self {tca_self}, singleton=V {singleton}"),
    );
}

fn window_process(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut shapes = 0;
    let mut exact = true;
    for b in 1..3 {
        for win in 1..6 {
            for (gh, gw) in [(1, 1), (1, 3), (2, 2), (3, 1), (2, 4)] {
                let c = 1 + (gh + win) % 3;
                let f = common::randn(&[b, gh * win, gw * win, c], &mut rng);
                let mut t = Tape::new();
                let v = t.constant(f.clone());
                let fw = window_partition(&mut t, v, win).unwrap();
                let back = window_merge(&mut t, &fw).unwrap();
                exact &= t.value(back) == &f;
                shapes += 1;
            }
        }
    }
    let (store, g) = block(8, 8, 1, 7, 4);
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let xv = t.constant(common::randn(&[1, 14, 14, 8], &mut rng));
    let zv = t.constant(common::randn(&[1, 7, 7, 8], &mut rng));
    let xw = window_partition(&mut t, xv, 7).unwrap();
    let zw = window_partition(&mut t, zv, 7).unwrap();
    let (_, wts) = tca_traced(&mut t, &p, &xw, &zw, g.tca.as_ref().unwrap()).unwrap();
    // single head: drop the head axis
    let s = t.shape(wts).to_vec();
    let shape: Vec<usize> = [s[0], s[1], s[3], s[4]].to_vec();
    let ok = exact && shapes >= 50 && s[2] == 1 && shape == [1, 49, 4, 1];
    r.line(3, "window process", ok, format!("merge(partition) exact on {shapes} shapes: {exact}; cross-attn weights {shape:?}"));
}

fn complexity(r: &mut Report) {
    let start = Instant::now();
    let base = count_macs_csa(56, 56, 32, 32, 7).unwrap().attention as f64;
    let doubled = count_macs_csa(112, 112, 32, 32, 14).unwrap().attention as f64 / base;
    let fixed = count_macs_csa(112, 112, 32, 32, 7).unwrap().attention as f64 / base;
    let shape = BenchShape::default();
    let (mut t1, mut t2) = (f64::INFINITY, f64::INFINITY);
    // interleaved rounds so a slow spell hits both sizes alike
    for _ in 0..3 {
        t1 = t1.min(time_csa(56, 56, 7, shape, 3).unwrap());
        t2 = t2.min(time_csa(112, 112, 14, shape, 3).unwrap());
    }
    let measured = t2 / t1;
    let elapsed = start.elapsed();
    let ok = doubled == 4.0 && fixed == 16.0 && (3.0..=6.0).contains(&measured) && elapsed <= Duration::from_secs(60);
    r.line(
        4,
        "complexity",
        ok,
        format!(
            "analytic (H,win)->(2H,2win) {doubled}, fixed win {fixed}, measured {measured:.2} ({t1:.2} -> {t2:.2} ms), {}",
            secs(elapsed)
        ),
    );
}

fn oracles(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut track = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for case in 0..100u64 {
        // attention
        let (nq, nk, dk, dv) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
        let (qt, kt, vt) = (common::randn(&[nq, dk], &mut rng), common::randn(&[nk, dk], &mut rng), common::randn(&[nk, dv], &mut rng));
        let mut t = Tape::<f64>::new();
        let (q, k, v) = (t.constant(qt.clone()), t.constant(kt.clone()), t.constant(vt.clone()));
        let (o, _) = attention(&mut t, q, k, v, dk).unwrap();
        track("attention", rel_err(t.value(o).data(), &common::attention(qt.data(), kt.data(), vt.data(), nq, nk, dk, dv, dk)));

        // multi-head attention
        let heads = [1, 2, 4][case as usize % 3];
        let (c, d) = (rng.random_range(1..6), heads * rng.random_range(1..3));
        let mut store = ParamStore::new();
        let mh = MultiHeadWeights::new(&mut store, "mh", c, d, heads, false, ScaleMode::FullWidth, &mut rng).unwrap();
        let (xq, xkv) = (common::randn(&[nq, c], &mut rng), common::randn(&[nk, c], &mut rng));
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let (a, b) = (t.constant(xq.clone()), t.constant(xkv.clone()));
        let o = mh.forward(&mut t, &p, a, b).unwrap();
        let want = MhWeights::read(&store, "mh", c, d, heads, d).apply(xq.data(), xkv.data(), nq, nk);
        track("multi_head", rel_err(t.value(o).data(), &want));

        // csa and tca
        let win = rng.random_range(1..4);
        let heads = [1, 2][case as usize % 2];
        let (c, d) = (rng.random_range(1..5), heads * rng.random_range(1..3));
        let (hx, wx) = (rng.random_range(1..4) * win, rng.random_range(1..4) * win);
        let (hz, wz) = (rng.random_range(1..3) * win, rng.random_range(1..3) * win);
        let (store, g) = block(c, d, heads, win, case);
        let fx = common::randn(&[1, hx, wx, c], &mut rng);
        let fz = common::randn(&[1, hz, wz, c], &mut rng);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let (xv, zv) = (t.constant(fx.clone()), t.constant(fz.clone()));
        let xw = window_partition(&mut t, xv, win).unwrap();
        let zw = window_partition(&mut t, zv, win).unwrap();
        let so = csa(&mut t, &p, &xw, &g.csa).unwrap();
        let so = window_merge(&mut t, &so).unwrap();
        let to = tca(&mut t, &p, &xw, &zw, g.tca.as_ref().unwrap()).unwrap();
        let to = window_merge(&mut t, &to).unwrap();
        let csa_w = MhWeights::read(&store, "g.csa", c, d, heads, d);
        let tca_w = MhWeights::read(&store, "g.tca", c, d, heads, d);
        let want = common::windowed_attention(fx.data(), (hx, wx), fx.data(), (hx, wx), win, &csa_w);
        track("csa", rel_err(t.value(so).data(), &want));
        let want = common::windowed_attention(fx.data(), (hx, wx), fz.data(), (hz, wz), win, &tca_w);
        track("tca", rel_err(t.value(to).data(), &want));

        // patch embedding and conv block
        let pch = rng.random_range(1..4);
        let (h, w) = (pch * rng.random_range(1..4), pch * rng.random_range(1..4));
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..5));
        let x = common::randn(&[1, h, w, cin], &mut rng);
        let wt = common::randn(&[pch * pch * cin, cout], &mut rng);
        let w1 = common::randn(&[3, 3, cin, cout], &mut rng);
        let w2 = common::randn(&[3, 3, cout, cout], &mut rng);
        let mut t = Tape::new();
        let (xv, wv, a, b) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(w1.clone()), t.constant(w2.clone()));
        let y = patch_embed(&mut t, xv, wv, pch).unwrap();
        track("patch_embed", rel_err(t.value(y).data(), &common::patch_embed(x.data(), h, w, cin, wt.data(), pch, cout)));
        let s = if case % 2 == 1 && h % 2 == 0 && w % 2 == 0 { 2 } else { 1 };
        let y = conv_block(&mut t, xv, a, b, s).unwrap();
        let (mut y1, ho, wo) = common::conv3x3(x.data(), h, w, cin, w1.data(), cout, s);
        common::relu(&mut y1);
        let (mut y2, _, _) = common::conv3x3(&y1, ho, wo, cout, w2.data(), cout, 1);
        common::relu(&mut y2);
        track("conv_block", rel_err(t.value(y).data(), &y2));

        // depthwise cross-correlation
        let (hz, wz) = (rng.random_range(1..4), rng.random_range(1..4));
        let (hx, wx) = (hz + rng.random_range(0..4), wz + rng.random_range(0..4));
        let c = rng.random_range(1..4);
        let x = common::randn(&[1, hx, wx, c], &mut rng);
        let z = common::randn(&[1, hz, wz, c], &mut rng);
        let mut t = Tape::new();
        let (xv, zv) = (t.constant(x.clone()), t.constant(z.clone()));
        let y = depthwise_xcorr(&mut t, xv, zv).unwrap();
        track("depthwise_xcorr", rel_err(t.value(y).data(), &common::xcorr(x.data(), (hx, wx), z.data(), (hz, wz), c)));

        // prediction heads
        let (c, hid) = (rng.random_range(1..5), rng.random_range(1..6));
        let mut cfg = HeadConfig::new(c, hid);
        cfg.coord_channels = case % 2 == 0;
        let mut store = ParamStore::<f64>::new();
        let head = Head::new(&mut store, cfg, &mut rng).unwrap();
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        let corr = common::randn(&[1, h, w, c], &mut rng);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let cv = t.constant(corr.clone());
        let out = head.predict(&mut t, &p, cv).unwrap();
        let n = h * w;
        let cin = cfg.adapter_width();
        let mut input = Vec::with_capacity(n * cin);
        for i in 0..h {
            for j in 0..w {
                input.extend_from_slice(&corr.data()[(i * w + j) * c..(i * w + j + 1) * c]);
                if cfg.coord_channels {
                    input.push((j as f64 + 0.5) / w as f64 - 0.5);
                    input.push((i as f64 + 0.5) / h as f64 - 0.5);
                }
            }
        }
        let a = common::matmul(&input, &common::param(&store, "head.adapter.w"), n, cin, hid);
        let mlp = |name: &str, out: usize| {
            let mut x = common::matmul(&a, &common::param(&store, &format!("{name}.fc0.w")), n, hid, hid);
            common::relu(&mut x);
            let mut x = common::matmul(&x, &common::param(&store, &format!("{name}.fc1.w")), n, hid, hid);
            common::relu(&mut x);
            common::matmul(&x, &common::param(&store, &format!("{name}.fc2.w")), n, hid, out)
        };
        track("cls_head", rel_err(t.value(out.cls).data(), &mlp("head.cls", 1)));
        let reg: Vec<f64> = mlp("head.reg", 4).into_iter().map(common::sigmoid).collect();
        track("reg_head", rel_err(t.value(out.reg).data(), &reg));
    }
    let forward_ok = worst.iter().all(|w| w.1 <= 1e-10);

    let mut giou_err: f64 = 0.0;
    for _ in 0..1000 {
        let mut bx = || {
            let (x0, y0) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            [x0, y0, x0 + rng.random_range(0.05..2.0), y0 + rng.random_range(0.05..2.0)]
        };
        let (a, b) = (bx(), bx());
        let g = giou(&BBox::from_corners(a, BoxFrame::Image), &BBox::from_corners(b, BoxFrame::Image)).unwrap();
        giou_err = giou_err.max((g - common::giou_corners(a, b)).abs());
    }
    let disjoint = 1.0
        - giou(
            &BBox::from_corners([0.0, 0.0, 1.0, 1.0], BoxFrame::Image),
            &BBox::from_corners([2.0, 2.0, 3.0, 3.0], BoxFrame::Image),
        )
        .unwrap();
    let giou_ok = giou_err <= 1e-9 && (disjoint - 16.0 / 9.0).abs() <= 1e-9;
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    r.line(
        5,
        "oracle equivalence",
        forward_ok && giou_ok,
        format!("100 instances each: {}; giou 1000 pairs max err {giou_err:.1e}, disjoint loss {disjoint:.6}", summary.join(", ")),
    );
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ablation_task() -> ToyTaskConfig {
    ToyTaskConfig { distractors: 3, ..ToyTaskConfig::default() }
}

fn train_config(seed: u64, tca: bool) -> TrainConfig {
    TrainConfig { seed, steps: 2000, batch: 16, tca_enabled: tca, ..TrainConfig::default() }
}

/// Trains the five seeds of one configuration; returns the models, per-seed
/// center accuracy and the elapsed time.
fn ablation_arm(tca: bool) -> (Vec<TrainResult>, Vec<f64>, Duration) {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let task = ablation_task();
    let mut runs = Vec::new();
    let mut acc = Vec::new();
    for seed in SEEDS {
        let run = train_toy(seed, &cfg, &task, &train_config(seed, tca)).unwrap();
        let ev = evaluate(&run.model, &task, &run.model.cfg.tracker, 10, 1000).unwrap();
        let a = mean(&ev.iter().map(|e| e.center_accuracy).collect::<Vec<_>>());
        println!(
            "    tca={tca} seed {seed}: loss {:.3} -> {:.3}, center accuracy {a:.3}",
            run.losses[9],
            mean(&run.losses[run.losses.len() - 20..])
        );
        acc.push(a);
        runs.push(run);
    }
    (runs, acc, start.elapsed())
}

fn ablation(r: &mut Report) -> Model<f32> {
    let (with_runs, with, t_with) = ablation_arm(true);
    let (_, without, t_without) = ablation_arm(false);
    let (m_with, m_without) = (median(&with), median(&without));

    let shape = BenchShape::default();
    let wp = time_gim_step(56, 7, shape, 3).unwrap();
    let dense = time_gim_step(56, 1, shape, 3).unwrap();

    let limit = Duration::from_secs(30 * 60);
    let ok = m_with >= m_without && wp <= dense && t_with <= limit && t_without <= limit;
    r.line(
        6,
        "toy ablation",
        ok,
        format!(
            "median center accuracy tca {m_with:.3} vs none {m_without:.3}; step at 56x56 wp {wp:.1} ms vs dense {dense:.1} ms; arms {} / {}",
            secs(t_with),
            secs(t_without)
        ),
    );
    with_runs.into_iter().next().unwrap().model
}

fn determinism(r: &mut Report) {
    let cfg = ModelConfig::toy();
    let task = ToyTaskConfig::default();
    let train = TrainConfig { steps: 25, batch: 4, seed: 7, ..TrainConfig::default() };
    let a = train_toy(7, &cfg, &task, &train).unwrap();
    let b = train_toy(7, &cfg, &task, &train).unwrap();
    let trace = a.losses.len() == b.losses.len() && a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits());
    let bytes_a = Checkpoint::from_model(&a.model).to_bytes().unwrap();
    let bytes_b = Checkpoint::from_model(&b.model).to_bytes().unwrap();
    let ckpt = bytes_a == bytes_b;
    let back = Checkpoint::from_bytes(&bytes_a).unwrap().into_model().unwrap();
    let round_trip = Checkpoint::from_model(&back).to_bytes().unwrap() == bytes_a;
    let golden_path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/full_tiny_seed0.hex");
    let golden = std::fs::read_to_string(golden_path).unwrap();
    let tiny = Model::<f32>::new(ModelConfig::full_tiny(), 0).unwrap();
    let golden_ok = hex::encode(Checkpoint::from_model(&tiny).to_bytes().unwrap()) == golden.trim_end();
    r.line(
        7,
        "determinism",
        trace && ckpt && round_trip && golden_ok,
        format!("loss trace {trace}, checkpoint bytes {ckpt}, round trip {round_trip}, golden hex {golden_ok}"),
    );
}

fn tracking_smoke(r: &mut Report, model: &Model<f32>) {
    let start = Instant::now();
    let task = ToyTaskConfig { distractors: 0, sigma: 0.0, ..ToyTaskConfig::default() };
    let ev = evaluate(model, &task, &model.cfg.tracker, 5, 1).unwrap();
    let ious: Vec<f64> = ev.iter().map(|e| e.mean_iou).collect();
    let frames = ev[0].gt.len();
    let m = mean(&ious);
    let elapsed = start.elapsed();
    let ok = m >= 0.5 && frames == 50 && elapsed <= Duration::from_secs(60);
    let per: Vec<String> = ious.iter().map(|v| format!("{v:.2}")).collect();
    r.line(
        8,
        "tracking smoke",
        ok,
        format!("mean IoU {m:.3} over 5 static sequences of {frames} frames [{}], {}", per.join(" "), secs(elapsed)),
    );
}

fn main() {
    let mut r = Report { failed: Vec::new() };
    gradient_suite(&mut r);
    identities(&mut r);
    window_process(&mut r);
    complexity(&mut r);
    oracles(&mut r);
    let trained = ablation(&mut r);
    determinism(&mut r);
    tracking_smoke(&mut r, &trained);
    if !r.failed.is_empty() {
        eprintln!("failing criteria: {:?}", r.failed);
        std::process::exit(1);
    }
    println!("all 8 acceptance criteria passed");
}
