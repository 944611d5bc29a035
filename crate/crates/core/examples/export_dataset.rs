//! Writes a small pool and test splits to disk (PPM images, PGM labels,
//! GRT1 latents and activations) and reads one sample back.
//!
//!     cargo run --release --example export_dataset -- [out_dir] [pool]

use std::path::PathBuf;

use genrep::dataio::{import_pgm, import_ppm, load_tensor, RunConfig, Split};
use genrep::experiments::gen_data;

fn main() -> genrep::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "genrep-out/example-data".into()));
    let mut cfg = RunConfig::default();
    cfg.pool = args.next().map_or(16, |s| s.parse().expect("pool"));
    cfg.real_test = 4;
    cfg.synthetic_test = 4;

    let manifest = gen_data(&cfg, &out)?;
    for split in [Split::Train, Split::RealTest, Split::SyntheticTest] {
        println!("{:<15} {} samples", split.name(), manifest.entries_in(split).count());
    }
    let first = &manifest.entries[0];
    let dir = out.join(&first.path);
    let image = import_ppm(dir.join("image.ppm"))?;
    let labels = import_pgm(dir.join("label.pgm"), 3)?;
    let latent = load_tensor(dir.join("latent.grt"))?;
    println!(
        "{}: image {:?}, class counts {:?}, latent of {} values",
        first.path.display(),
        image.shape(),
        labels.class_counts(),
        latent.numel()
    );
    for m in 1..=4 {
        println!("  act_{m} {:?}", load_tensor(dir.join(format!("act_{m}.grt")))?.shape());
    }
    Ok(())
}
