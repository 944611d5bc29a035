//! Distills the neural generator from the procedural one and reports the
//! held-out image error.
//!
//!     cargo run --release --example train_generator -- [steps] [seed] [lr]

use genrep::generators::{distill_neural_generator, sample_latent, DistillConfig, ProceduralGenerator, LATENT_DIM};
use genrep::generators::neural_image_mse;
use genrep::SeededRng;

fn main() -> genrep::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(Ok(5000), |s| s.parse()).expect("steps");
    let seed = args.next().map_or(Ok(1), |s| s.parse()).expect("seed");
    let lr = args.next().map_or(Ok(DistillConfig::default().lr), |s| s.parse()).expect("lr");

    let procedural = ProceduralGenerator::default();
    let cfg = DistillConfig { steps, lr, ..DistillConfig::default() };
    let t0 = std::time::Instant::now();
    let (neural, log) = distill_neural_generator(&procedural, &cfg, &mut SeededRng::new(seed))?;
    for (i, chunk) in log.losses.chunks((steps / 10).max(1)).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}..  loss {mean:.4}", i * chunk.len());
    }

    let mut rng = SeededRng::derive(seed, "held-out");
    let held_out: Vec<_> = (0..64).map(|_| sample_latent(&mut rng, LATENT_DIM, 1.0)).collect::<Result<_, _>>()?;
    let mse = neural_image_mse(&neural, &procedural, &held_out)?;
    println!("held-out image mse {mse:.5} after {steps} steps ({:.1}s)", t0.elapsed().as_secs_f64());
    Ok(())
}
