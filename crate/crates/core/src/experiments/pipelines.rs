//! The four multi-stage experiments.

use std::path::{Path, PathBuf};

use super::plot::{plot_csv, PlotKind};
use super::{load_generator, par_map, run_seeds, threads, Outputs};
use crate::dataio::{parse_fraction, write_metrics_csv, Cell, RunConfig};
use crate::error::{Error, Result};
use crate::generators::{Generator, Latent};
use crate::layermatch::{
    feature_cluster_purity, pretrain_layermatch, Backbone, Encoder, LayerMatchConfig, LayerMatchLog,
    DEFAULT_LAYERMATCH_BATCH, DEFAULT_LAYERMATCH_LR, DEFAULT_LAYERMATCH_STEPS,
};
use crate::metrics::SegMetrics;
use crate::projection::{
    annotate, evaluate_projection_curve, projection_config, sample_latents, train_projection, CurveRow,
    DEFAULT_PROJECTION_STEPS,
};
use crate::rng::SeededRng;
use crate::segmentation::{
    distill_from_projection, evaluate, finetune_from_backbone, label_fraction_split, real_samples, segmentation_config,
    synthetic_samples, train_pseudo_label, Sample, DEFAULT_DISTILL_STEPS, DEFAULT_FINETUNE_STEPS,
};

pub const METRICS_HEADER: [&str; 8] = ["method", "seed", "fraction", "pixel_acc", "miou", "iou_class0", "iou_class1", "iou_class2"];
pub const LAYERMATCH_CURVE_HEADER: [&str; 4] = ["step", "match_loss", "rec_loss", "lr"];
pub const PROJECTION_CURVE_HEADER: [&str; 4] = ["n", "seed", "accuracy", "mean_iou"];
pub const PURITY_HEADER: [&str; 3] = ["seed", "random_init", "layermatch"];

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub fraction: String,
    pub metrics: SegMetrics,
}

impl MetricsRow {
    pub fn cells(&self) -> Vec<Cell> {
        let mut row = vec![
            Cell::from(self.method.as_str()),
            Cell::from(self.seed),
            Cell::from(self.fraction.as_str()),
            Cell::from(self.metrics.pixel_accuracy),
            Cell::from(self.metrics.mean_iou),
        ];
        row.extend(self.metrics.iou.iter().map(|&v| Cell::from(v)));
        row
    }
}

pub(crate) fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.metrics.iou.len() + 5 != METRICS_HEADER.len()) {
        return Err(Error::invalid(format!("metrics row with {} classes", r.metrics.iou.len())));
    }
    write_metrics_csv(path, &METRICS_HEADER, &rows.iter().map(MetricsRow::cells).collect::<Vec<_>>())
}

pub(crate) fn write_layermatch_curve(path: &Path, log: &LayerMatchLog) -> Result<()> {
    let rows: Vec<Vec<Cell>> = log
        .steps
        .iter()
        .map(|s| vec![s.step.into(), s.match_loss.into(), s.rec_loss.into(), s.lr.into()])
        .collect();
    write_metrics_csv(path, &LAYERMATCH_CURVE_HEADER, &rows)
}

/// Training pool and test sets of a run, all derived from `cfg.seed`.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub pool_latents: Vec<Latent>,
    /// Noisy "real" images with labels; the fraction splits index into it.
    pub pool: Vec<Sample>,
    pub real_test_latents: Vec<Latent>,
    pub real_test: Vec<Sample>,
    pub synthetic_test: Vec<Latent>,
}

pub fn build_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let mut r = SeededRng::derive(cfg.seed, "pool");
    let pool_latents = sample_latents(&mut r, cfg.pool)?;
    let pool = real_samples(&pool_latents, &mut r)?;
    let mut r = SeededRng::derive(cfg.seed, "real-test");
    let real_test_latents = sample_latents(&mut r, cfg.real_test)?;
    let real_test = real_samples(&real_test_latents, &mut r)?;
    let synthetic_test = sample_latents(&mut SeededRng::derive(cfg.seed, "synthetic-test"), cfg.synthetic_test)?;
    Ok(Datasets {
        pool_latents,
        pool,
        real_test_latents,
        real_test,
        synthetic_test,
    })
}

pub fn layermatch_config(cfg: &RunConfig, steps: usize) -> LayerMatchConfig {
    LayerMatchConfig {
        steps,
        batch: DEFAULT_LAYERMATCH_BATCH,
        lr: DEFAULT_LAYERMATCH_LR,
        match_weight: cfg.match_weight,
        rec_weight: cfg.rec_weight,
        per_sample_stage: cfg.per_sample_stage,
        normalize: cfg.normalize_losses,
    }
}

/// LayerMatch pretraining for one seed. The encoder is initialized from the
/// `layermatch` stream of `seed`; a random-init baseline built from the same
/// stream starts from identical backbone weights.
pub fn pretrain_backbone(g: &dyn Generator, lm: &LayerMatchConfig, seed: u64) -> Result<(Backbone, LayerMatchLog)> {
    let mut rng = SeededRng::derive(seed, "layermatch");
    let e = Encoder::new(&mut rng);
    pretrain_layermatch(g, e, lm, &mut rng)
}

fn random_backbone(seed: u64) -> Result<Backbone> {
    Encoder::new(&mut SeededRng::derive(seed, "layermatch")).into_backbone()
}

#[derive(Clone, Debug)]
pub struct CurveReport {
    pub rows: Vec<CurveRow>,
    pub files: Vec<PathBuf>,
}

/// Projection quality against the number of annotated images.
pub fn fig3a_curve(cfg: &RunConfig, out: &Path) -> Result<CurveReport> {
    cfg.validate()?;
    let g = load_generator(cfg)?;
    let mut o = Outputs::new(out)?;
    let steps = cfg.projection_steps.unwrap_or(DEFAULT_PROJECTION_STEPS);
    let rows = evaluate_projection_curve(g.as_ref(), &cfg.sizes, cfg.synthetic_test, &run_seeds(cfg), &projection_config(steps))?;
    let csv = o.fresh("projection_curve.csv")?;
    let cells: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| vec![r.n.into(), r.seed.into(), r.accuracy.into(), r.mean_iou.into()])
        .collect();
    write_metrics_csv(&csv, &PROJECTION_CURVE_HEADER, &cells)?;
    plot_csv(&csv, PlotKind::Curve, &o.fresh("projection_curve.svg")?)?;
    Ok(CurveReport { rows, files: o.finish(cfg)? })
}

#[derive(Clone, Debug)]
pub struct Table1Report {
    /// `distill` and `direct` rows per seed, sorted by method then seed.
    pub rows: Vec<MetricsRow>,
    pub files: Vec<PathBuf>,
}

/// Distillation from a projection decoder trained on `n_annotated`
/// generated images, against direct training on `n_annotated` real images.
pub fn table1_distill(cfg: &RunConfig, out: &Path) -> Result<Table1Report> {
    cfg.validate()?;
    let g = load_generator(cfg)?;
    let data = build_datasets(cfg)?;
    let mut o = Outputs::new(out)?;
    let proj_steps = cfg.projection_steps.unwrap_or(DEFAULT_PROJECTION_STEPS);
    let distill_steps = cfg.distill_steps.unwrap_or(DEFAULT_DISTILL_STEPS);
    let direct_steps = cfg.finetune_steps.unwrap_or(DEFAULT_FINETUNE_STEPS);
    let per_seed = par_map(&run_seeds(cfg), threads(), |&seed| {
        let mut rng = SeededRng::derive(seed, "table1");
        let latents = sample_latents(&mut rng, cfg.n_annotated)?;
        let (p, _) = train_projection(&annotate(g.as_ref(), &latents)?, &projection_config(proj_steps), &mut rng)?;
        let synthetic = sample_latents(&mut rng, cfg.distill_samples)?;
        let real_labeled = real_samples(&latents, &mut rng)?;
        let seg_rng = SeededRng::derive(seed, "table1-segmentation");
        let (distilled, _) =
            distill_from_projection(g.as_ref(), &p, &synthetic, &segmentation_config(distill_steps), &mut seg_rng.clone())?;
        let (direct, _) =
            finetune_from_backbone(None, &real_labeled, &segmentation_config(direct_steps), &mut seg_rng.clone())?;
        let row = |method: &str, metrics| MetricsRow {
            method: method.into(),
            seed,
            fraction: "-".into(),
            metrics,
        };
        Ok([
            row("direct", evaluate(&direct, &data.real_test)?),
            row("distill", evaluate(&distilled, &data.real_test)?),
        ])
    })?;
    let mut rows: Vec<MetricsRow> = per_seed.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.seed.cmp(&b.seed)));
    let csv = o.fresh("metrics.csv")?;
    write_metrics(&csv, &rows)?;
    plot_csv(&csv, PlotKind::Bars, &o.fresh("table1.svg")?)?;
    Ok(Table1Report { rows, files: o.finish(cfg)? })
}

pub const SWEEP_METHODS: [&str; 3] = ["scratch", "pseudo", "layermatch"];

#[derive(Clone, Debug)]
pub struct SweepReport {
    /// Sorted by (method, fraction, seed).
    pub rows: Vec<MetricsRow>,
    pub pretrain_logs: Vec<(u64, LayerMatchLog)>,
    pub files: Vec<PathBuf>,
}

impl SweepReport {
    /// Mean mIoU of `method` at fraction text `fraction`.
    pub fn mean_miou(&self, method: &str, fraction: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.fraction == fraction)
            .map(|r| r.metrics.mean_iou)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Label-efficiency sweep: every method at every label fraction and seed,
/// scored on the real test split. Methods sharing a (fraction, seed) cell
/// draw the same labeled subset, initialization and batch order.
pub fn fig5_sweep(cfg: &RunConfig, out: &Path) -> Result<SweepReport> {
    cfg.validate()?;
    if let Some(m) = cfg.methods.iter().find(|m| !SWEEP_METHODS.contains(&m.as_str())) {
        return Err(Error::Config(format!("unknown method {m:?}; expected one of {SWEEP_METHODS:?}")));
    }
    let g = load_generator(cfg)?;
    let data = build_datasets(cfg)?;
    let mut o = Outputs::new(out)?;
    let seeds = run_seeds(cfg);
    let workers = threads();
    let ft = segmentation_config(cfg.finetune_steps.unwrap_or(DEFAULT_FINETUNE_STEPS));

    let backbones: Vec<(u64, Backbone, LayerMatchLog)> = if cfg.methods.iter().any(|m| m == "layermatch") {
        let lm = layermatch_config(cfg, cfg.pretrain_steps.unwrap_or(DEFAULT_LAYERMATCH_STEPS));
        par_map(&seeds, workers, |&seed| {
            let (b, log) = pretrain_backbone(g.as_ref(), &lm, seed)?;
            Ok((seed, b, log))
        })?
    } else {
        Vec::new()
    };

    let mut cells = Vec::new();
    for m in &cfg.methods {
        for f in &cfg.fractions {
            for &s in &seeds {
                cells.push((m.as_str(), f.as_str(), parse_fraction(f)?, s));
            }
        }
    }
    let mut rows = par_map(&cells, workers, |&(method, frac_text, frac, seed)| {
        let (li, ui) = label_fraction_split(data.pool.len(), frac, seed)?;
        let labeled: Vec<Sample> = li.iter().map(|&i| data.pool[i].clone()).collect();
        let mut rng = SeededRng::derive(seed, &format!("finetune-{frac_text}"));
        let model = match method {
            "scratch" => finetune_from_backbone(None, &labeled, &ft, &mut rng)?.0,
            "layermatch" => {
                let b = backbones.iter().find(|(s, ..)| *s == seed).map(|(_, b, _)| b).expect("pretrained per seed");
                finetune_from_backbone(Some(b), &labeled, &ft, &mut rng)?.0
            }
            _ => {
                let unlabeled: Vec<_> = ui.iter().map(|&i| data.pool[i].image.clone()).collect();
                train_pseudo_label(&labeled, &unlabeled, cfg.tau, cfg.rounds, &ft, &mut rng)?.0
            }
        };
        Ok(MetricsRow {
            method: method.into(),
            seed,
            fraction: frac_text.into(),
            metrics: evaluate(&model, &data.real_test)?,
        })
    })?;
    rows.sort_by(|a, b| {
        let fa = parse_fraction(&a.fraction).unwrap_or(0.0);
        let fb = parse_fraction(&b.fraction).unwrap_or(0.0);
        a.method.cmp(&b.method).then(fa.total_cmp(&fb)).then(a.seed.cmp(&b.seed))
    });

    let csv = o.fresh("metrics.csv")?;
    write_metrics(&csv, &rows)?;
    plot_csv(&csv, PlotKind::Bars, &o.fresh("fig5.svg")?)?;
    let mut pretrain_logs = Vec::new();
    for (seed, _, log) in backbones {
        write_layermatch_curve(&o.fresh(&format!("layermatch_curve_seed{seed}.csv"))?, &log)?;
        pretrain_logs.push((seed, log));
    }
    Ok(SweepReport {
        rows,
        pretrain_logs,
        files: o.finish(cfg)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PurityRow {
    pub seed: u64,
    pub random_init: f64,
    pub layermatch: f64,
}

#[derive(Clone, Debug)]
pub struct PurityReport {
    pub rows: Vec<PurityRow>,
    pub files: Vec<PathBuf>,
}

/// k-means purity of finest-level backbone features on held-out synthetic
/// images, before and after LayerMatch pretraining of the same initial
/// weights. The same pixels are sampled for both backbones.
pub fn fig4_purity(cfg: &RunConfig, out: &Path) -> Result<PurityReport> {
    cfg.validate()?;
    let g = load_generator(cfg)?;
    let mut o = Outputs::new(out)?;
    let lm = layermatch_config(cfg, cfg.pretrain_steps.unwrap_or(DEFAULT_LAYERMATCH_STEPS));
    let rows = par_map(&run_seeds(cfg), threads(), |&seed| {
        let held_out = synthetic_samples(&sample_latents(&mut SeededRng::derive(seed, "purity-images"), cfg.purity_images)?)?;
        let images: Vec<_> = held_out.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<_> = held_out.iter().map(|s| s.labels.clone()).collect();
        let classes = labels.first().map_or(1, |l| l.num_classes());
        let score = |b: &Backbone| {
            feature_cluster_purity(b, &images, &labels, classes, cfg.purity_pixels, &mut SeededRng::derive(seed, "purity-kmeans"))
        };
        let random_init = score(&random_backbone(seed)?)?;
        let (trained, _) = pretrain_backbone(g.as_ref(), &lm, seed)?;
        Ok(PurityRow {
            seed,
            random_init,
            layermatch: score(&trained)?,
        })
    })?;
    let cells: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| vec![r.seed.into(), r.random_init.into(), r.layermatch.into()])
        .collect();
    write_metrics_csv(&o.fresh("purity.csv")?, &PURITY_HEADER, &cells)?;
    Ok(PurityReport { rows, files: o.finish(cfg)? })
}
