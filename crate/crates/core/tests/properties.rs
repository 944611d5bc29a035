use genrep::dataio::{format_g6, read_tensor, write_tensor};
use genrep::generators::{Latent, LATENT_DIM};
use genrep::layermatch::match_loss;
use genrep::metrics::SegMetrics;
use genrep::optim::cosine_lr;
use genrep::segmentation::label_fraction_split;
use genrep::{LabelMap, Tensor};
use proptest::prelude::*;

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn g6_keeps_six_digits(v in -1e12f64..1e12) {
        let back: f64 = format_g6(v).parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-6 * v.abs());
    }

    #[test]
    fn tensor_bytes_roundtrip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) ^ i as u64)).collect();
        let t = Tensor::new(shape, data).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&buf).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn splits_are_nested_partitions(n in 1usize..400, a in 1u32..64, b in 1u32..64, seed in any::<u64>()) {
        let (small, large) = (1.0 / f64::from(a.max(b)), 1.0 / f64::from(a.min(b)));
        let (ls, us) = label_fraction_split(n, small, seed).unwrap();
        let (ll, _) = label_fraction_split(n, large, seed).unwrap();
        prop_assert_eq!(ls.len() + us.len(), n);
        prop_assert_eq!(ls.len(), ((small * n as f64).floor() as usize).max(1));
        prop_assert!(ls.iter().all(|i| ll.contains(i)));
    }

    #[test]
    fn metrics_are_bounded(classes in 2usize..5, pixels in prop::collection::vec((0u8..5, 0u8..5), 1..200)) {
        let pred: Vec<u8> = pixels.iter().map(|p| p.0 % classes as u8).collect();
        let truth: Vec<u8> = pixels.iter().map(|p| p.1 % classes as u8).collect();
        let n = pred.len();
        let p = LabelMap::new(1, n, classes, pred).unwrap();
        let t = LabelMap::new(1, n, classes, truth).unwrap();
        let m = SegMetrics::from_pairs(classes, [(&p, &t)]).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.pixel_accuracy) && (0.0..=1.0).contains(&m.mean_iou));
        prop_assert!(m.iou.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(m.confusion.total(), n as u64);
    }

    #[test]
    fn cosine_schedule_decays(total in 1usize..500, base in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, base).unwrap();
            prop_assert!(lr >= 0.0 && lr <= base && lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn match_loss_symmetric_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8)) {
        let ta = [Tensor::from_vec(a[..4].to_vec()), Tensor::from_vec(a[4..].to_vec())];
        let tb = [Tensor::from_vec(b[..4].to_vec()), Tensor::from_vec(b[4..].to_vec())];
        let ab = match_loss(&ta, &tb).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - match_loss(&tb, &ta).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scene_parameters_stay_in_range(l in prop::collection::vec(-50.0f64..50.0, LATENT_DIM)) {
        use genrep::generators::scene::*;
        let s = latent_to_scene(&Latent::new(l)).unwrap();
        prop_assert!(s.circle_center.iter().chain(&s.rect_center).all(|&v| in_range(v, CENTER_RANGE)));
        prop_assert!(in_range(s.circle_radius, RADIUS_RANGE));
        prop_assert!(s.rect_half.iter().all(|&v| in_range(v, HALF_EXTENT_RANGE)));
        prop_assert!(s.background.iter().chain(&s.circle_color).chain(&s.rect_color).all(|&v| in_range(v, COLOR_RANGE)));
    }
}
