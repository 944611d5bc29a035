//! Runs one named pipeline end to end and lists what it wrote.
//!
//!     cargo run --release --example run_pipeline -- fig4-purity [out_dir] [key=value ...]

use std::path::PathBuf;

use genrep::dataio::RunConfig;
use genrep::experiments::{run, ExperimentPlan, Pipeline};

fn main() -> genrep::Result<()> {
    let mut args = std::env::args().skip(1);
    let pipeline: Pipeline = args.next().as_deref().unwrap_or("fig3a-curve").parse()?;
    let out = PathBuf::from(args.next().unwrap_or_else(|| format!("genrep-out/{}", pipeline.name())));
    let mut config = RunConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        config.set(k, v)?;
    }
    let t0 = std::time::Instant::now();
    for file in run(&ExperimentPlan { pipeline, config, out })? {
        println!("{}", file.display());
    }
    println!("{:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
