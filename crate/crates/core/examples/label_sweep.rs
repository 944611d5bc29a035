//! Fine-tuning with few labels: random init, LayerMatch-pretrained backbone
//! and pseudo-labeling at one label fraction, sharing data and batch order.
//!
//!     cargo run --release --example label_sweep -- [fraction] [pretrain_steps] [finetune_steps] [seed]

use genrep::dataio::{parse_fraction, RunConfig};
use genrep::experiments::{build_datasets, layermatch_config, pretrain_backbone};
use genrep::generators::ProceduralGenerator;
use genrep::segmentation::{
    evaluate, finetune_from_backbone, label_fraction_split, segmentation_config, train_pseudo_label, Sample,
    DEFAULT_FINETUNE_STEPS, DEFAULT_ROUNDS, DEFAULT_TAU,
};
use genrep::SeededRng;

fn main() -> genrep::Result<()> {
    let mut args = std::env::args().skip(1);
    let fraction = args.next().unwrap_or_else(|| "1/64".into());
    let pretrain_steps = args.next().map_or(3000, |s| s.parse().expect("steps"));
    let finetune_steps = args.next().map_or(DEFAULT_FINETUNE_STEPS, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let cfg = RunConfig { seed, ..RunConfig::default() };
    let data = build_datasets(&cfg)?;
    let (labeled_idx, unlabeled_idx) = label_fraction_split(data.pool.len(), parse_fraction(&fraction)?, seed)?;
    let labeled: Vec<Sample> = labeled_idx.iter().map(|&i| data.pool[i].clone()).collect();
    let unlabeled: Vec<_> = unlabeled_idx.iter().map(|&i| data.pool[i].image.clone()).collect();
    println!("{} labeled, {} unlabeled", labeled.len(), unlabeled.len());

    let (backbone, _) = pretrain_backbone(&ProceduralGenerator::default(), &layermatch_config(&cfg, pretrain_steps), seed)?;
    let ft = segmentation_config(finetune_steps);
    let stream = || SeededRng::derive(seed, &format!("finetune-{fraction}"));
    let scratch = finetune_from_backbone(None, &labeled, &ft, &mut stream())?.0;
    let warm = finetune_from_backbone(Some(&backbone), &labeled, &ft, &mut stream())?.0;
    let (pseudo, log) = train_pseudo_label(&labeled, &unlabeled, DEFAULT_TAU, DEFAULT_ROUNDS, &ft, &mut stream())?;
    println!("pseudo-label retention per round {:.3?}", log.retained);
    for (name, model) in [("scratch", &scratch), ("layermatch", &warm), ("pseudo", &pseudo)] {
        println!("{name:<11} real-test mIoU {:.4}", evaluate(model, &data.real_test)?.mean_iou);
    }
    Ok(())
}
