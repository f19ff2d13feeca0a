use inbn_core::bbox::{format_box_line, parse_box_line, BBox, BoxFrame};
use inbn_core::harness::{Sequence, ToyTaskConfig};
use inbn_core::image::{context_side, crop_region, CropMap, Image};
use inbn_core::model::{Model, ModelConfig};
use inbn_core::tracker::{argmax, hanning, hanning2d, postprocess, scale_penalty, Tracker};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn img_box(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h, BoxFrame::Image)
}

#[test]
fn window_blend_degenerate_cases_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 25;
    let cls: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
    let h = hanning2d(5, 5);
    let w0 = postprocess(&cls, &p, &h, 0.0).unwrap();
    let w1 = postprocess(&cls, &p, &h, 1.0).unwrap();
    for k in 0..n {
        assert_eq!(w0[k].to_bits(), (cls[k] * p[k]).to_bits());
        assert_eq!(w1[k].to_bits(), h[k].to_bits());
    }
    let v = postprocess(&[0.5], &[1.0], &[1.0], 0.3).unwrap();
    assert!((v[0] - 0.65).abs() < 1e-15);
    assert!(postprocess(&cls, &p[..3], &h, 0.3).is_err());
}

#[test]
fn hanning_shape() {
    let h = hanning(15);
    assert_eq!(h[0], 0.0);
    assert_eq!(h[14], 0.0);
    assert_eq!(h[7], 1.0);
    let m = hanning2d(15, 15);
    assert_eq!(m.len(), 225);
    assert_eq!(argmax(&m), 7 * 15 + 7);
    assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(hanning(1), [1.0]);
}

#[test]
fn scale_penalty_examples() {
    let prev = img_box(10.0, 10.0, 8.0, 4.0);
    assert_eq!(scale_penalty(&prev, &prev, 0.04), 1.0);
    let doubled = img_box(10.0, 10.0, 16.0, 8.0);
    assert!((scale_penalty(&doubled, &prev, 0.04) - (-0.04f64).exp()).abs() < 1e-15);
    let mut last = 1.0;
    for g in [1.1, 1.3, 1.7, 2.5] {
        let p = scale_penalty(&img_box(10.0, 10.0, 8.0 * g, 4.0), &prev, 0.04);
        assert!(p < last && p > 0.0);
        last = p;
    }
}

#[test]
fn crop_geometry() {
    let img = Image::filled(40, 30, 1, 0.25);
    let b = img_box(20.0, 15.0, 6.0, 4.0);
    let (r, rm) = crop_region(&img, &b, 16, 1.0).unwrap();
    let (_, cm) = crop_region(&img, &b, 32, 2.0).unwrap();
    assert!((cm.side - 2.0 * rm.side).abs() < 1e-12);
    assert!((rm.side - context_side(6.0, 4.0, 1.0)).abs() < 1e-12);
    assert!(r.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    assert!(crop_region(&img, &img_box(1.0, 1.0, 0.0, 2.0), 16, 1.0).is_err());

    // a bright pixel at the box center lands on the crop center
    let mut data = vec![0.0f32; 41 * 41];
    data[20 * 41 + 20] = 1.0;
    let img = Image::new(41, 41, 1, data).unwrap();
    let (c, _) = crop_region(&img, &img_box(20.5, 20.5, 3.0, 3.0), 3, 1.0).unwrap();
    let side = context_side(3.0, 3.0, 1.0);
    assert!(side > 3.0);
    assert!(c.at(1, 1, 0) > c.at(0, 0, 0));
}

#[test]
fn crop_map_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let map = CropMap::centered(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(1.0..100.0));
        let b = img_box(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0), rng.random_range(1.0..20.0), rng.random_range(1.0..20.0));
        let back = map.to_image(&map.to_crop(&b));
        for (a, e) in [back.cx, back.cy, back.w, back.h].iter().zip([b.cx, b.cy, b.w, b.h]) {
            assert!((a - e).abs() < 1e-9);
        }
    }
}

#[test]
fn box_lines_round_trip() {
    let b = parse_box_line("1.5,2,10,4.25").unwrap();
    assert_eq!(b.to_xywh(), [1.5, 2.0, 10.0, 4.25]);
    assert_eq!(parse_box_line(&format_box_line(&b)).unwrap(), b);
    for bad in ["1,2,3", "1,2,x,4", "1,2,0,4", "1,2,3,-1"] {
        assert!(parse_box_line(bad).is_err(), "{bad}");
    }
}

#[test]
fn tracker_is_deterministic_and_well_formed() {
    let model = Model::<f32>::new(ModelConfig::toy(), 3).unwrap();
    let task = ToyTaskConfig { length: 6, ..Default::default() };
    let seq = Sequence::generate(&task, 4).unwrap();
    let frames: Vec<Image> = (0..seq.len()).map(|t| seq.frame(t)).collect();
    let tr = Tracker::new(&model);
    let s1 = tr.init(&frames[0], &seq.gt(0)).unwrap();
    let s2 = tr.init(&frames[0], &seq.gt(0)).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.map_size, 5);
    assert_eq!(s1.hanning.len(), 25);
    let a = tr.run(&frames, &seq.gt(0)).unwrap();
    let b = tr.run(&frames, &seq.gt(0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|bx| bx.w > 0.0 && bx.h > 0.0));
}

#[test]
fn full_window_weight_recenters() {
    // with w = 1 the blend is the Hanning map, so the center cell is always picked
    let model = Model::<f32>::new(ModelConfig::toy(), 5).unwrap();
    let mut params = model.cfg.tracker;
    params.window_weight = 1.0;
    let tr = Tracker::with_params(&model, params);
    let seq = Sequence::generate(&ToyTaskConfig { length: 4, ..Default::default() }, 6).unwrap();
    let mut st = tr.init(&seq.frame(0), &seq.gt(0)).unwrap();
    for t in 1..4 {
        let (_, d) = tr.step(&mut st, &seq.frame(t)).unwrap();
        assert_eq!(d.best, 12);
        assert_eq!(d.adjusted, st.hanning);
    }
}

proptest! {
    #[test]
    fn argmax_ignores_common_positive_scale(seed in 0u64..1000, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cls: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        let p: Vec<f64> = (0..25).map(|_| rng.random_range(0.1..1.0)).collect();
        let h = hanning2d(5, 5);
        let base = argmax(&postprocess(&cls, &p, &h, 0.0).unwrap());
        let scaled: Vec<f64> = cls.iter().map(|v| v * c).collect();
        prop_assert_eq!(base, argmax(&postprocess(&scaled, &p, &h, 0.0).unwrap()));
    }

    #[test]
    fn blend_is_monotone_in_cls(seed in 0u64..1000, w in 0.0f64..0.99, bump in 1e-6f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cls: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
        let p: Vec<f64> = (0..9).map(|_| rng.random_range(0.1..1.0)).collect();
        let h = hanning2d(3, 3);
        let a = postprocess(&cls, &p, &h, w).unwrap();
        let mut up = cls.clone();
        up[4] += bump;
        let b = postprocess(&up, &p, &h, w).unwrap();
        prop_assert!(b[4] > a[4]);
    }
}

#[test]
fn boxes_stay_within_frame_bounds() {
    // an untrained model has no size sense; the clamp keeps it from compounding
    let model = Model::<f32>::new(ModelConfig::toy(), 3).unwrap();
    let seq = Sequence::generate(&ToyTaskConfig { length: 30, ..ToyTaskConfig::default() }, 5).unwrap();
    let frames: Vec<Image> = (0..seq.len()).map(|t| seq.frame(t)).collect();
    let boxes = Tracker::new(&model).run(&frames, &seq.gt(0)).unwrap();
    let (fw, fh) = (frames[0].width as f64, frames[0].height as f64);
    for b in &boxes[1..] {
        assert!((1.0..=fw).contains(&b.w) && (1.0..=fh).contains(&b.h), "{b:?}");
        assert!((0.0..=fw).contains(&b.cx) && (0.0..=fh).contains(&b.cy), "{b:?}");
    }
}
