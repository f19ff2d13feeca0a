mod common;

use inbn_core::bbox::{BBox, BoxFrame};
use inbn_core::loss::{
    assign_labels, bce_loss, bce_loss_probs, giou, giou_rows, reg_loss, CropGeometry, LabelAssignment, LossConfig,
};
use inbn_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn crop(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h, BoxFrame::CropNormalized)
}

fn single(y: f64, target: BBox) -> LabelAssignment {
    LabelAssignment {
        map_h: 1,
        map_w: 1,
        labels: vec![y],
        target,
        positives: (y > 0.5) as usize,
        warning: y < 0.5,
    }
}

fn bce_at_zero_logit(y: f64) -> f64 {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::zeros([1, 1, 1]).unwrap());
    let v = bce_loss(&mut t, l, &[single(y, crop(0.5, 0.5, 0.1, 0.1))], &LossConfig::default()).unwrap();
    t.value(v).item()
}

#[test]
fn bce_closed_forms() {
    assert!((bce_at_zero_logit(1.0) - LN2).abs() < 1e-15);
    assert!((bce_at_zero_logit(0.0) - LN2 / 16.0).abs() < 1e-15);
    assert!((bce_loss_probs(&[0.5], &[1.0], 1.0 / 16.0) - LN2).abs() < 1e-15);
    assert!(bce_loss_probs(&[1.0 - 1e-15], &[1.0], 1.0 / 16.0) < 1e-14);
}

#[test]
fn bce_matches_probability_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let logits = common::randn(&[1, h, w], &mut rng).map(|v| v * 4.0);
        let labels: Vec<f64> = (0..h * w).map(|_| rng.random_range(0..2) as f64).collect();
        let a = LabelAssignment {
            map_h: h,
            map_w: w,
            labels: labels.clone(),
            target: crop(0.5, 0.5, 0.2, 0.2),
            positives: labels.iter().filter(|&&y| y > 0.5).count(),
            warning: false,
        };
        let mut cfg = LossConfig::default();
        cfg.normalize = false;
        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let v = bce_loss(&mut t, l, &[a], &cfg).unwrap();
        let p: Vec<f64> = logits.data().iter().map(|&x| common::sigmoid(x)).collect();
        let want = bce_loss_probs(&p, &labels, 1.0 / 16.0);
        assert!((t.value(v).item() - want).abs() / want.max(1.0) < 1e-10);
        assert!(t.value(v).item() >= 0.0);
    }
}

#[test]
fn giou_disjoint_pair() {
    let a = BBox::from_corners([0.0, 0.0, 1.0, 1.0], BoxFrame::Image);
    let b = BBox::from_corners([2.0, 2.0, 3.0, 3.0], BoxFrame::Image);
    let g = giou(&a, &b).unwrap();
    assert!((g + 7.0 / 9.0).abs() < 1e-15);
    assert!((1.0 - g - 16.0 / 9.0).abs() < 1e-15);
    assert_eq!(giou(&a, &a).unwrap(), 1.0);
    assert!(giou(&a, &BBox::new(0.0, 0.0, 0.0, 1.0, BoxFrame::Image)).is_err());
}

fn random_box(rng: &mut impl Rng) -> BBox {
    crop(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.01..1.0), rng.random_range(0.01..1.0))
}

#[test]
fn giou_matches_definition_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs: Vec<(BBox, BBox)> = (0..1000).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect();
    let rows = |sel: fn(&(BBox, BBox)) -> BBox| {
        let v: Vec<f64> = pairs.iter().flat_map(|p| {
            let b = sel(p);
            [b.cx, b.cy, b.w, b.h]
        }).collect();
        Tensor::from_f64([pairs.len(), 4], &v).unwrap()
    };
    let mut t = Tape::<f64>::new();
    let a = t.constant(rows(|p| p.0));
    let b = t.constant(rows(|p| p.1));
    let g = giou_rows(&mut t, a, b).unwrap();
    for (k, (pa, pb)) in pairs.iter().enumerate() {
        let want = common::giou_corners(pa.corners(), pb.corners());
        assert!((giou(pa, pb).unwrap() - want).abs() < 1e-9);
        assert!((t.value(g).data()[k] - want).abs() < 1e-9);
    }
}

#[test]
fn reg_loss_worked_example() {
    // same size, shifted by a third of the side: IoU = giou = 0.5, L1 = 0.1
    let gt = crop(0.5, 0.5, 0.3, 0.3);
    let mut t = Tape::<f64>::new();
    let pred = t.constant(Tensor::from_f64([1, 1, 1, 4], &[0.6, 0.5, 0.3, 0.3]).unwrap());
    let (l, n) = reg_loss(&mut t, pred, &[single(1.0, gt)], &LossConfig::default()).unwrap();
    assert_eq!(n, 1);
    assert!((t.value(l).item() - 1.6).abs() < 1e-12);

    let exact = t.constant(Tensor::from_f64([1, 1, 1, 4], &[0.5, 0.5, 0.3, 0.3]).unwrap());
    let (l, _) = reg_loss(&mut t, exact, &[single(1.0, gt)], &LossConfig::default()).unwrap();
    assert_eq!(t.value(l).item(), 0.0);

    let (l, n) = reg_loss(&mut t, pred, &[single(0.0, gt)], &LossConfig::default()).unwrap();
    assert_eq!((t.value(l).item(), n), (0.0, 0));
}

#[test]
fn reg_loss_matches_explicit_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        let gt = crop(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
        let labels: Vec<f64> = (0..h * w).map(|_| rng.random_range(0..2) as f64).collect();
        let positives = labels.iter().filter(|&&y| y > 0.5).count();
        let pred = Tensor::uniform([1, h, w, 4], 0.05, 0.95, &mut rng).unwrap();
        let a = LabelAssignment { map_h: h, map_w: w, labels: labels.clone(), target: gt, positives, warning: positives == 0 };
        let mut cfg = LossConfig::default();
        cfg.normalize = false;
        let mut t = Tape::new();
        let pv = t.constant(pred.clone());
        let (l, _) = reg_loss(&mut t, pv, &[a], &cfg).unwrap();
        let mut want = 0.0;
        for (k, &y) in labels.iter().enumerate() {
            if y < 0.5 {
                continue;
            }
            let b = &pred.data()[k * 4..k * 4 + 4];
            let pb = crop(b[0], b[1], b[2], b[3]);
            let l1: f64 = [gt.cx, gt.cy, gt.w, gt.h].iter().zip(b).map(|(g, p)| (g - p).abs()).sum();
            want += 2.0 * (1.0 - common::giou_corners(pb.corners(), gt.corners())) + 6.0 * l1;
        }
        assert!((t.value(l).item() - want).abs() / want.max(1.0) < 1e-9);
    }
}

#[test]
fn labels_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let geom = CropGeometry { crop_size: 64.0, stride: 8.0, offset: 0.0 };
    for _ in 0..200 {
        let gt = crop(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.01..0.8), rng.random_range(0.01..0.8));
        let a = assign_labels(&gt, 8, 8, &geom);
        let [x1, y1, x2, y2] = gt.corners().map(|v| v * 64.0);
        let mut n = 0;
        for i in 0..8 {
            for j in 0..8 {
                let (x, y) = ((j as f64 + 0.5) * 8.0, (i as f64 + 0.5) * 8.0);
                let inside = x > x1 && x < x2 && y > y1 && y < y2;
                assert_eq!(a.labels[i * 8 + j], inside as u8 as f64);
                n += inside as usize;
            }
        }
        assert_eq!((a.positives, a.warning), (n, n == 0));
    }
    let full = assign_labels(&crop(0.5, 0.5, 1.0, 1.0), 8, 8, &geom);
    assert_eq!(full.positives, 64);
    let tiny = assign_labels(&crop(0.5, 0.5, 0.01, 0.01), 8, 8, &geom);
    assert!(tiny.warning && tiny.positives == 0);
    let outside = assign_labels(&crop(2.0, 2.0, 0.3, 0.3), 8, 8, &geom);
    assert!(outside.warning);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn giou_is_symmetric_and_bounded(ax in -1.0f64..1.0, ay in -1.0f64..1.0, aw in 0.01f64..1.0, ah in 0.01f64..1.0,
                                     bx in -1.0f64..1.0, by in -1.0f64..1.0, bw in 0.01f64..1.0, bh in 0.01f64..1.0) {
        let (a, b) = (crop(ax, ay, aw, ah), crop(bx, by, bw, bh));
        let g = giou(&a, &b).unwrap();
        prop_assert_eq!(g, giou(&b, &a).unwrap());
        prop_assert!(g > -1.0 && g <= 1.0);
    }

    #[test]
    fn giou_is_iou_under_containment(cx in 0.3f64..0.7, cy in 0.3f64..0.7, w in 0.05f64..0.2, h in 0.05f64..0.2, grow in 1.0f64..2.0) {
        let inner = crop(cx, cy, w, h);
        let outer = crop(cx, cy, w * grow, h * grow);
        prop_assert!((giou(&inner, &outer).unwrap() - inner.iou(&outer)).abs() < 1e-12);
    }

    #[test]
    fn reg_loss_is_translation_invariant(seed in 0u64..1000, dx in -0.25f64..0.25, dy in -0.25f64..0.25) {
        // power-of-two translations keep every coordinate exact
        let (dx, dy) = ((dx * 64.0).round() / 64.0, (dy * 64.0).round() / 64.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = |v: f64| (v * 64.0).round() / 64.0;
        let gt = crop(0.5, 0.5, q(rng.random_range(0.1..0.4)), q(rng.random_range(0.1..0.4)));
        let pred: Vec<f64> = vec![q(rng.random_range(0.3..0.7)), q(rng.random_range(0.3..0.7)), q(rng.random_range(0.1..0.4)), q(rng.random_range(0.1..0.4))];
        let run = |gt: BBox, pred: &[f64]| {
            let mut t = Tape::<f64>::new();
            let p = t.constant(Tensor::from_f64([1, 1, 1, 4], pred).unwrap());
            let (l, _) = reg_loss(&mut t, p, &[single(1.0, gt)], &LossConfig::default()).unwrap();
            t.value(l).item()
        };
        let moved = crop(gt.cx + dx, gt.cy + dy, gt.w, gt.h);
        let pm = [pred[0] + dx, pred[1] + dy, pred[2], pred[3]];
        prop_assert_eq!(run(gt, &pred), run(moved, &pm));
    }
}
