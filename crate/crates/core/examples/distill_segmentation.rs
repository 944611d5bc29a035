//! Labels generated images with a projection decoder trained on a handful
//! of annotations, trains a segmentation network on them and compares it
//! with direct training on the same number of noisy "real" images.
//!
//!     cargo run --release --example distill_segmentation -- [n_annotated] [synthetic] [steps] [seed]

use genrep::generators::ProceduralGenerator;
use genrep::projection::{annotate, projection_config, sample_latents, train_projection, DEFAULT_PROJECTION_STEPS};
use genrep::segmentation::{
    distill_from_projection, evaluate, finetune_from_backbone, real_samples, segmentation_config, DEFAULT_DISTILL_STEPS,
};
use genrep::SeededRng;

fn main() -> genrep::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut arg = |d: usize| args.next().map_or(d, |s| s.parse().expect("integer argument"));
    let (n, synthetic, steps, seed) = (arg(20), arg(2000), arg(DEFAULT_DISTILL_STEPS), arg(0) as u64);

    let g = ProceduralGenerator::default();
    let mut rng = SeededRng::new(seed);
    let annotated_latents = sample_latents(&mut rng, n)?;
    let (decoder, _) = train_projection(&annotate(&g, &annotated_latents)?, &projection_config(DEFAULT_PROJECTION_STEPS), &mut rng)?;
    let test = real_samples(&sample_latents(&mut rng, 128)?, &mut rng)?;

    let synth = sample_latents(&mut rng, synthetic)?;
    let (distilled, log) = distill_from_projection(&g, &decoder, &synth, &segmentation_config(steps), &mut rng.fork())?;
    println!("distillation loss {:.4} -> {:.4}", log.losses[0], log.losses[log.losses.len() - 1]);

    let labeled = real_samples(&annotated_latents, &mut rng)?;
    let (direct, _) = finetune_from_backbone(None, &labeled, &segmentation_config(300), &mut rng.fork())?;

    for (name, model) in [("distilled", &distilled), ("direct", &direct)] {
        let m = evaluate(model, &test)?;
        println!("{name:<10} mIoU {:.4}  pixel acc {:.4}  per-class {:.3?}", m.mean_iou, m.pixel_accuracy, m.iou);
    }
    Ok(())
}
