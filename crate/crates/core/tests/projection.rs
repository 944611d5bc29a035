mod common;

use common::latents;
use genrep::generators::{Generator, HeadMode, NeuralGenerator, ProceduralGenerator};
use genrep::projection::{
    annotate, evaluate_projection, evaluate_projection_curve, projection_config, train_projection, ProjectionDecoder,
};
use genrep::SeededRng;

#[test]
fn single_annotation_is_memorized() {
    let g = ProceduralGenerator::default();
    let train = annotate(&g, &latents(1, 1)).unwrap();
    let (p, _) = train_projection(&train, &projection_config(500), &mut SeededRng::new(2)).unwrap();
    let m = evaluate_projection(&p, &train).unwrap();
    assert!(m.pixel_accuracy >= 0.99, "{}", m.pixel_accuracy);
}

#[test]
fn loss_falls_within_200_steps() {
    let g = ProceduralGenerator::default();
    for seed in 0..3 {
        let train = annotate(&g, &latents(10 + seed, 10)).unwrap();
        let (_, log) = train_projection(&train, &projection_config(201), &mut SeededRng::new(seed)).unwrap();
        assert!(log.losses[200] < log.losses[0], "seed {seed}");
    }
}

#[test]
fn empty_annotation_set_rejected() {
    assert!(train_projection(&[], &projection_config(10), &mut SeededRng::new(0)).is_err());
}

#[test]
fn fresh_decoder_probabilities() {
    let g = ProceduralGenerator::new(HeadMode::Nonlinear);
    let data = annotate(&g, &latents(3, 3)).unwrap();
    let p = ProjectionDecoder::standard(&mut SeededRng::new(4));
    let sets: Vec<_> = data.iter().map(|(s, _)| s).collect();
    let probs = p.probabilities(&sets).unwrap();
    let plane = 32 * 32;
    let mut ce = 0.0;
    for b in 0..3 {
        for i in 0..plane {
            let q: Vec<f64> = (0..3).map(|c| probs.data()[(b * 3 + c) * plane + i]).collect();
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            ce -= q.iter().map(|v| v.ln()).sum::<f64>() / 3.0;
        }
    }
    ce /= (3 * plane) as f64;
    assert!((ce - 3f64.ln()).abs() < 0.2, "{ce}");
    assert_eq!(p.probabilities(&sets).unwrap(), probs);
}

#[test]
fn curve_rows_are_bounded_and_generator_frozen() {
    let g = NeuralGenerator::new(HeadMode::Linear, &mut SeededRng::new(5));
    let before = g.parameter_bytes();
    let rows = evaluate_projection_curve(&g, &[1, 2], 4, &[0, 1], &projection_config(5)).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.mean_iou) && (0.0..=1.0).contains(&r.accuracy));
    }
    assert_eq!(before, g.parameter_bytes());
    assert!(evaluate_projection_curve(&g, &[], 4, &[0], &projection_config(5)).is_err());
}
