mod common;

use common::{closed_form_gap, latents, substitution_identity_worst};
use genrep::generators::{
    distill_neural_generator, generate_with_activations, ground_truth_labels, latent_to_scene, neural_image_mse,
    resume_forward, DistillConfig, Generator, HeadMode, NeuralGenerator, ProceduralGenerator, CLASS_BACKGROUND,
    CLASS_CIRCLE, CLASS_RECTANGLE,
};
use genrep::SeededRng;

#[test]
fn closed_form_reconstruction_on_50_triples() {
    let gap = closed_form_gap(11, 50);
    assert!(gap < 1e-9, "gap {gap:e}");
}

#[test]
fn substitution_identity_on_20_latents() {
    let worst = substitution_identity_worst(12, 20);
    assert!(worst < 1e-10, "worst {worst:e}");
}

#[test]
fn last_stage_substitution_is_the_head() {
    let g = ProceduralGenerator::default();
    let l = &latents(13, 1)[0];
    let (_, phi) = generate_with_activations(&g, l).unwrap();
    let mut hat = phi.stage(4).clone();
    hat.data_mut().iter_mut().for_each(|v| *v *= -0.5);
    let img = resume_forward(&g, l, 4, &hat).unwrap();
    assert_eq!(img.data(), &hat.data()[..3 * 32 * 32]);
}

#[test]
fn labels_agree_with_occupancy_channels() {
    let g = ProceduralGenerator::default();
    for l in latents(14, 40) {
        let labels = ground_truth_labels(&latent_to_scene(&l).unwrap(), 32).unwrap();
        let (_, phi) = generate_with_activations(&g, &l).unwrap();
        let last = phi.stage(4).data();
        let plane = 32 * 32;
        for p in 0..plane {
            let (circle, rect) = (last[4 * plane + p], last[5 * plane + p]);
            let want = if rect > 0.5 {
                CLASS_RECTANGLE
            } else if circle > 0.5 {
                CLASS_CIRCLE
            } else {
                CLASS_BACKGROUND
            };
            assert_eq!(labels.data()[p], want);
        }
    }
}

#[test]
fn neural_identity_substitution_all_stages() {
    let g = NeuralGenerator::new(HeadMode::Nonlinear, &mut SeededRng::new(3));
    for l in latents(15, 3) {
        let (img, phi) = generate_with_activations(&g, &l).unwrap();
        for m in 1..=4 {
            let rec = resume_forward(&g, &l, m, phi.stage(m)).unwrap();
            assert!(rec.max_abs_diff(&img) < 1e-10);
        }
    }
}

#[test]
fn neural_loss_descends_by_step_500() {
    let target = ProceduralGenerator::default();
    for seed in 0..3 {
        let cfg = DistillConfig {
            steps: 501,
            ..DistillConfig::default()
        };
        let (_, log) = distill_neural_generator(&target, &cfg, &mut SeededRng::new(seed)).unwrap();
        assert!(log.losses[500] < log.losses[0], "seed {seed}: {} vs {}", log.losses[500], log.losses[0]);
    }
}

#[test]
fn neural_generator_default_training_reaches_mse_threshold() {
    let target = ProceduralGenerator::default();
    let (g, log) = distill_neural_generator(&target, &DistillConfig::default(), &mut SeededRng::new(1)).unwrap();
    assert_eq!(log.losses.len(), 5000);
    let mse = neural_image_mse(&g, &target, &latents(99, 64)).unwrap();
    assert!(mse < 0.01, "held-out image mse {mse}");
    assert_eq!(g.num_stages(), 4);
}
