//! Renders a metrics CSV as an SVG chart. Without arguments it writes a
//! small demo CSV first.
//!
//!     cargo run --release --example plot_results -- [csv] [curve|bars] [out.svg]

use std::path::PathBuf;

use genrep::experiments::plot::{plot_csv, PlotKind};

fn main() -> genrep::Result<()> {
    let mut args = std::env::args().skip(1);
    let csv = match args.next() {
        Some(p) => PathBuf::from(p),
        None => {
            let p = PathBuf::from("genrep-out/demo_metrics.csv");
            std::fs::create_dir_all("genrep-out")?;
            std::fs::write(
                &p,
                "method,seed,fraction,pixel_acc,miou\n\
                 scratch,0,1/64,0.81,0.52\nlayermatch,0,1/64,0.88,0.63\n\
                 scratch,0,1,0.95,0.86\nlayermatch,0,1,0.96,0.88\n",
            )?;
            p
        }
    };
    let kind: PlotKind = args.next().as_deref().unwrap_or("bars").parse()?;
    let out = PathBuf::from(args.next().unwrap_or_else(|| "genrep-out/plot.svg".into()));
    plot_csv(&csv, kind, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
