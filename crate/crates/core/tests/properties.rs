use proptest::prelude::*;

use smalldet_core::boxes::{
    focaler_map, focaler_siou_loss, giou_loss, iou, siou_loss, BBox, FocalerParams,
};
use smalldet_core::fft::{fft2, ifft2};
use smalldet_core::metrics::{
    average_precision, map_50_95, map_at, match_detections, Detection, GroundTruth,
};
use smalldet_core::pool::{global_pool, PoolKind};
use smalldet_core::tape::{depth_to_space_values, space_to_depth_values};
use smalldet_core::{Precision, Tape, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn even_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..5)
        .prop_flat_map(|(n, c, h, w)| tensor(vec![n, c, 2 * h, 2 * w]))
}

fn any_box() -> impl Strategy<Value = BBox> {
    (-20.0f64..20.0, -20.0f64..20.0, 0.1f64..15.0, 0.1f64..15.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn spd_round_trip_and_multiset(x in even_tensor()) {
        let s = space_to_depth_values(&x).unwrap();
        let back = depth_to_space_values(&s).unwrap();
        prop_assert_eq!(&back, &x);
        let mut a = x.data().to_vec();
        let mut b = s.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fft_round_trip_and_parseval(x in (1usize..4, 0u32..4, 0u32..4).prop_flat_map(|(c, a, b)| tensor(vec![1, c, 1 << a, 1 << b]))) {
        let z = fft2(&x).unwrap();
        let y = ifft2(&z).unwrap();
        let scale = x.max_abs().max(1e-300);
        prop_assert!(y.real.max_abs_diff(&x) / scale < 1e-10);
        prop_assert!(y.imag.max_abs() / scale < 1e-10);
        let hw = (x.shape()[2] * x.shape()[3]) as f64;
        let e: f64 = x.data().iter().map(|v| v * v).sum();
        prop_assert!((e - z.energy() / hw).abs() <= 1e-10 * e.max(1e-300));
    }

    #[test]
    fn median_matches_sort(plane in prop::collection::vec(-5.0f64..5.0, 1..65)) {
        let n = plane.len();
        let t = Tensor::new([1, 1, 1, n], plane.clone()).unwrap();
        let got = global_pool(&t, PoolKind::Median).unwrap().data()[0];
        let mut s = plane;
        s.sort_by(f64::total_cmp);
        let want = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        prop_assert_eq!(got, want);
    }

    #[test]
    fn concat_slice_round_trip(a in tensor(vec![2, 3, 3, 2]), b in tensor(vec![2, 2, 3, 2])) {
        let mut t = Tape::new(Precision::Single);
        let (va, vb) = (t.constant(a), t.constant(b));
        let c = t.concat_channels(&[va, vb]).unwrap();
        let sa = t.slice_channels(c, 0, 3).unwrap();
        let sb = t.slice_channels(c, 3, 5).unwrap();
        prop_assert_eq!(t.value(sa), t.value(va));
        prop_assert_eq!(t.value(sb), t.value(vb));
    }

    #[test]
    fn iou_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!(giou_loss(&a, &b) >= 0.0 && giou_loss(&a, &b) <= 2.0);
    }

    #[test]
    fn losses_scale_invariant(a in any_box(), b in any_box(), k in 0.1f64..20.0) {
        let (ka, kb) = (a.scaled(k).unwrap(), b.scaled(k).unwrap());
        let p = FocalerParams::default();
        prop_assert!((iou(&a, &b) - iou(&ka, &kb)).abs() < 1e-12);
        prop_assert!((focaler_map(iou(&a, &b), p) - focaler_map(iou(&ka, &kb), p)).abs() < 1e-11);
        prop_assert!((giou_loss(&a, &b) - giou_loss(&ka, &kb)).abs() < 1e-12);
        prop_assert!((siou_loss(&a, &b).unwrap().0 - siou_loss(&ka, &kb).unwrap().0).abs() < 1e-11);
        prop_assert!((focaler_siou_loss(&a, &b, p).unwrap() - focaler_siou_loss(&ka, &kb, p).unwrap()).abs() < 1e-11);
    }

    #[test]
    fn identity_box_has_zero_losses(a in any_box()) {
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert!(siou_loss(&a, &a).unwrap().0.abs() < 1e-15);
        prop_assert!(giou_loss(&a, &a).abs() < 1e-15);
    }

    #[test]
    fn focaler_monotone(d in 0.0f64..0.5, w in 0.01f64..0.5, x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let p = FocalerParams::new(d, d + w).unwrap();
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(focaler_map(lo, p) <= focaler_map(hi, p));
        prop_assert!((0.0..=1.0).contains(&focaler_map(x, p)));
    }

    #[test]
    fn ap_depends_only_on_rank(labels in prop::collection::vec(any::<bool>(), 1..12), extra in 0usize..4) {
        let total = labels.iter().filter(|&&t| t).count() + extra;
        prop_assume!(total > 0);
        let gts: Vec<GroundTruth> = (0..total).map(|i| GroundTruth {
            bbox: BBox::new(10.0 * i as f64, 0.0, 10.0 * i as f64 + 4.0, 4.0).unwrap(),
            class_id: 0,
            image_id: 0,
        }).collect();
        // the k-th detection hits the next unused gt when labeled TP
        let mut next = 0;
        let dets: Vec<Detection> = labels.iter().enumerate().map(|(k, &tp)| {
            let bbox = if tp { next += 1; gts[next - 1].bbox } else { BBox::new(-50.0, -50.0, -46.0, -46.0).unwrap() };
            Detection { bbox, class_id: 0, confidence: 0.9 - 0.05 * k as f64, image_id: 0 }
        }).collect();
        let base = map_at(&dets, &gts, 0.5).unwrap().map_value;
        prop_assert!((base - average_precision(&labels, total)).abs() < 1e-15);
        // strictly monotone transform of confidences
        let squashed: Vec<Detection> = dets.iter().map(|d| Detection { confidence: d.confidence.powi(3), ..*d }).collect();
        prop_assert_eq!(map_at(&squashed, &gts, 0.5).unwrap().map_value, base);
        // trailing FP never increases AP
        let mut more = dets.clone();
        more.push(Detection { bbox: BBox::new(-90.0, -90.0, -80.0, -80.0).unwrap(), class_id: 0, confidence: 0.01, image_id: 0 });
        prop_assert!(map_at(&more, &gts, 0.5).unwrap().map_value <= base);
    }

    #[test]
    fn counts_and_threshold_monotonicity(
        raw_gts in prop::collection::vec((0usize..2, 0usize..3, any_box()), 1..6),
        raw_dets in prop::collection::vec((0usize..2, 0usize..3, any_box(), 0.0f64..1.0), 0..10),
    ) {
        let gts: Vec<GroundTruth> = raw_gts.iter().map(|&(image_id, class_id, bbox)| GroundTruth { bbox, class_id, image_id }).collect();
        let mut dets: Vec<Detection> = raw_dets.iter().map(|&(image_id, class_id, bbox, confidence)| Detection { bbox, class_id, confidence, image_id }).collect();
        // jittered copies of gts make matches likely
        for g in &gts {
            dets.push(Detection { bbox: g.bbox.translated(0.3, -0.2).unwrap(), class_id: g.class_id, confidence: 0.5, image_id: g.image_id });
        }
        for c in 0..3 {
            let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            let cg: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).copied().collect();
            let m = match_detections(&cd, &cg, 0.5);
            prop_assert_eq!(m.counts.tp + m.counts.fn_, cg.len());
            prop_assert_eq!(m.counts.tp + m.counts.fp, cd.len());
        }
        let m50 = map_at(&dets, &gts, 0.5).unwrap().map_value;
        let m5095 = map_50_95(&dets, &gts).unwrap();
        prop_assert!(m5095 <= m50 + 1e-15);
        prop_assert!((0.0..=1.0).contains(&m50));
        prop_assert_eq!(map_50_95(&dets, &gts).unwrap(), m5095);
    }
}

#[test]
fn conv_single_precision_close_to_double() {
    let x = Tensor::from_fn([2, 3, 7, 7], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
    let w = Tensor::from_fn([4, 3, 3, 3], |i| ((i * 53 % 89) as f64 / 44.0) - 1.0);
    let exact = smalldet_core::conv::conv2d(&x, &w, None, 1, 1).unwrap();
    let mut t = Tape::new(Precision::Single);
    let (vx, vw) = (t.constant(x), t.constant(w));
    let y = t.conv2d(vx, vw, None, 1, 1).unwrap();
    for (&a, &b) in t.value(y).data().iter().zip(exact.data()) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn fft_single_precision_round_trip() {
    let x = Tensor::from_fn([1, 2, 8, 8], |i| ((i * 29 % 97) as f64 / 48.0) - 1.0);
    let mut t = Tape::new(Precision::Single);
    let v = t.constant(x);
    let z = t.fft2(v).unwrap();
    let y = t.ifft2(z).unwrap();
    assert!(t.value(y.real).max_abs_diff(t.value(v)) < 1e-5);
}
