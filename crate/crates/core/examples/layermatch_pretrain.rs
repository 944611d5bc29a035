//! LayerMatch pretraining: an encoder learns to predict the generator's
//! stage activations from its images. Prints the loss curve and the k-means
//! purity of backbone features before and after.
//!
//!     cargo run --release --example layermatch_pretrain -- [steps] [seed]

use genrep::generators::ProceduralGenerator;
use genrep::layermatch::{feature_cluster_purity, pretrain_layermatch, Encoder, LayerMatchConfig};
use genrep::projection::sample_latents;
use genrep::segmentation::synthetic_samples;
use genrep::SeededRng;

fn main() -> genrep::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(LayerMatchConfig::default().steps, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let g = ProceduralGenerator::default();
    let mut rng = SeededRng::new(seed);
    let encoder = Encoder::new(&mut rng);
    let random = encoder.clone().into_backbone()?;
    let cfg = LayerMatchConfig { steps, ..LayerMatchConfig::default() };
    let (backbone, log) = pretrain_layermatch(&g, encoder, &cfg, &mut rng)?;
    let window = (steps / 10).max(1);
    for start in (0..steps).step_by(window) {
        let end = (start + window).min(steps);
        let s = &log.steps[start..end];
        let avg = |f: fn(&genrep::layermatch::LayerMatchStep) -> f64| s.iter().map(f).sum::<f64>() / s.len() as f64;
        println!("steps {start:>5}..{end:<5} match {:>9.4}  rec {:>9.4}", avg(|x| x.match_loss), avg(|x| x.rec_loss));
    }

    let held_out = synthetic_samples(&sample_latents(&mut SeededRng::new(seed + 1000), 10)?)?;
    let images: Vec<_> = held_out.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = held_out.iter().map(|s| s.labels.clone()).collect();
    for (name, b) in [("random init", &random), ("pretrained", &backbone)] {
        let p = feature_cluster_purity(b, &images, &labels, 3, 200, &mut SeededRng::new(7))?;
        println!("{name:<12} k-means purity {p:.4}");
    }
    Ok(())
}
