mod common;

use common::per_pixel_metrics;
use genrep::metrics::{ConfusionMatrix, SegMetrics};
use genrep::{LabelMap, SeededRng};

fn random_map(rng: &mut SeededRng, h: usize, w: usize, classes: usize) -> Vec<u8> {
    (0..h * w).map(|_| rng.below(classes) as u8).collect()
}

#[test]
fn agrees_with_per_pixel_counting_on_100_pairs() {
    let mut rng = SeededRng::new(2024);
    for trial in 0..100 {
        let classes = 2 + rng.below(4);
        let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
        let k = 1 + rng.below(3);
        let raw: Vec<(Vec<u8>, Vec<u8>)> = (0..k)
            .map(|_| {
                // Occasionally restrict truth to fewer classes so absent classes occur.
                let tc = if rng.below(3) == 0 { 1 + rng.below(classes) } else { classes };
                (random_map(&mut rng, h, w, classes), random_map(&mut rng, h, w, tc))
            })
            .collect();
        let maps: Vec<(LabelMap, LabelMap)> = raw
            .iter()
            .map(|(p, t)| (LabelMap::new(h, w, classes, p.clone()).unwrap(), LabelMap::new(h, w, classes, t.clone()).unwrap()))
            .collect();
        let m = SegMetrics::from_pairs(classes, maps.iter().map(|(p, t)| (p, t))).unwrap();
        let (acc, iou, miou) = per_pixel_metrics(classes, &raw);
        assert!((m.pixel_accuracy - acc).abs() < 1e-12, "trial {trial}");
        assert!((m.mean_iou - miou).abs() < 1e-12, "trial {trial}");
        for (a, b) in m.iou.iter().zip(&iou) {
            assert!((a - b).abs() < 1e-12, "trial {trial}");
        }
    }
}

#[test]
fn half_overlap_iou_is_exactly_one_third() {
    // Each region covers 4 pixels and they share 2.
    let pred = LabelMap::new(1, 6, 2, vec![1, 1, 1, 1, 0, 0]).unwrap();
    let truth = LabelMap::new(1, 6, 2, vec![0, 0, 1, 1, 1, 1]).unwrap();
    let m = SegMetrics::from_pairs(2, [(&pred, &truth)]).unwrap();
    assert_eq!(m.iou[1], 1.0 / 3.0);
}

#[test]
fn confusion_orientation() {
    let pred = LabelMap::new(1, 3, 3, vec![2, 2, 0]).unwrap();
    let truth = LabelMap::new(1, 3, 3, vec![1, 2, 0]).unwrap();
    let mut c = ConfusionMatrix::new(3);
    c.add(&pred, &truth).unwrap();
    assert_eq!(c.get(1, 2), 1);
    assert_eq!(c.get(2, 1), 0);
    assert_eq!(c.row_sum(2), 1);
    assert_eq!(c.col_sum(2), 2);
    assert_eq!(c.total(), 3);
}

#[test]
fn empty_and_mismatched_inputs_rejected() {
    assert!(SegMetrics::from_pairs(3, std::iter::empty()).is_err());
    let a = LabelMap::new(2, 2, 3, vec![0; 4]).unwrap();
    let b = LabelMap::new(1, 4, 3, vec![0; 4]).unwrap();
    let mut c = ConfusionMatrix::new(3);
    assert!(c.add(&a, &b).is_err());
}
