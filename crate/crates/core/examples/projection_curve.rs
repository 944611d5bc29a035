//! Semantic projection: decoder accuracy against the number of annotated
//! generated images.
//!
//!     cargo run --release --example projection_curve -- [steps] [sizes] [seeds] [lr]

use genrep::generators::ProceduralGenerator;
use genrep::projection::{evaluate_projection_curve, projection_config, DEFAULT_PROJECTION_STEPS};

fn main() -> genrep::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(DEFAULT_PROJECTION_STEPS, |s| s.parse().expect("steps"));
    let sizes: Vec<usize> = args
        .next()
        .map_or("1,2,5,10,15,20".into(), |s| s)
        .split(',')
        .map(|s| s.parse().expect("size"))
        .collect();
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seeds"));
    let mut cfg = projection_config(steps);
    if let Some(lr) = args.next() {
        cfg.lr = lr.parse().expect("lr");
    }
    if let Some(b) = args.next() {
        cfg.batch = b.parse().expect("batch");
    }

    let g = ProceduralGenerator::default();
    let t0 = std::time::Instant::now();
    let rows = evaluate_projection_curve(&g, &sizes, 30, &(0..seeds).collect::<Vec<_>>(), &cfg)?;
    println!("{:>3} {:>4} {:>8} {:>8}", "n", "seed", "acc", "mIoU");
    for r in &rows {
        println!("{:>3} {:>4} {:>8.4} {:>8.4}", r.n, r.seed, r.accuracy, r.mean_iou);
    }
    for &n in &sizes {
        let v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.mean_iou).collect();
        println!("n={n:<3} mean mIoU {:.4}", v.iter().sum::<f64>() / v.len() as f64);
    }
    println!("{:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
