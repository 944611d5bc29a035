//! Single-stage commands. Each reads a [`RunConfig`], derives its random
//! streams from `cfg.seed` and writes its artifacts to the given path.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::pipelines::{build_datasets, layermatch_config, pretrain_backbone, write_layermatch_curve, write_metrics, MetricsRow};
use super::Outputs;
use crate::dataio::{
    export_pgm, export_ppm, load_tensor, parse_fraction, save_tensor, write_metrics_csv, Cell, DatasetManifest,
    GeneratorKind, ManifestEntry, RunConfig, Split,
};
use crate::error::{Error, Result};
use crate::generators::{
    distill_neural_generator, generate_many, neural_image_mse, DistillConfig, Generator, Latent, NeuralGenerator,
    ProceduralGenerator,
};
use crate::layermatch::{Backbone, DEFAULT_LAYERMATCH_STEPS};
use crate::nn::ParamStore;
use crate::projection::{
    annotate, evaluate_projection, projection_config, sample_latents, train_projection, ProjectionDecoder,
    DEFAULT_PROJECTION_STEPS,
};
use crate::rng::SeededRng;
use crate::segmentation::{
    distill_from_projection, evaluate, finetune_from_backbone, label_fraction_split, segmentation_config,
    synthetic_samples, train_pseudo_label, Sample, SegmentationModel, DEFAULT_DISTILL_STEPS, DEFAULT_FINETUNE_STEPS,
};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainLog};

fn required(path: &Path, what: &str) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{what} file {} not found", path.display())));
    }
    load_tensor(path)
}

fn parent_dir(file: &Path) -> Result<PathBuf> {
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&dir)?;
    }
    Ok(dir)
}

/// Writes every parameter of `store` (running statistics included) as one
/// flat tensor.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    parent_dir(path)?;
    save_tensor(path, &store.flatten())
}

/// The generator selected by `cfg`; a neural generator is loaded from
/// `cfg.generator_path`.
pub fn load_generator(cfg: &RunConfig) -> Result<Box<dyn Generator>> {
    match cfg.generator {
        GeneratorKind::Procedural => Ok(Box::new(ProceduralGenerator::new(cfg.head))),
        GeneratorKind::Neural => {
            let path = cfg
                .generator_path
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite("generator=neural needs generator_path".into()))?;
            let mut g = NeuralGenerator::new(cfg.head, &mut SeededRng::new(0));
            g.load_flat(&required(path, "generator")?)?;
            Ok(Box::new(g))
        }
    }
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let mut b = Backbone::new(&mut SeededRng::new(0));
    b.load_flat(&required(path, "backbone")?)?;
    Ok(b)
}

pub fn load_decoder(path: &Path) -> Result<ProjectionDecoder> {
    let mut p = ProjectionDecoder::standard(&mut SeededRng::new(0));
    p.store_mut().load_flat(&required(path, "projection")?)?;
    Ok(p)
}

pub fn load_segmentation(path: &Path) -> Result<SegmentationModel> {
    let mut m = SegmentationModel::standard(&mut SeededRng::new(0));
    m.store_mut().load_flat(&required(path, "model")?)?;
    Ok(m)
}

fn train_cfg(cfg: &RunConfig, default_steps: usize, default: TrainConfig) -> TrainConfig {
    TrainConfig {
        steps: cfg.steps.unwrap_or(default_steps),
        batch: cfg.batch.unwrap_or(default.batch),
        lr: cfg.lr.unwrap_or(default.lr),
    }
}

fn write_loss_curve(path: &Path, losses: &[f64], lrs: &[f64]) -> Result<()> {
    let rows: Vec<Vec<Cell>> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut r = vec![i.into(), l.into()];
            if let Some(&lr) = lrs.get(i) {
                r.push(lr.into());
            }
            r
        })
        .collect();
    if lrs.is_empty() {
        write_metrics_csv(path, &["step", "loss"], &rows)
    } else {
        write_metrics_csv(path, &["step", "loss", "lr"], &rows)
    }
}

fn fresh_file(path: &Path) -> Result<()> {
    parent_dir(path)?;
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    Ok(())
}

/// Side file next to `file`: same directory, name `<stem><suffix>`.
fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    file.with_file_name(format!("{stem}{suffix}"))
}

fn write_resolved(file: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let p = sibling(file, ".cfg");
    std::fs::write(&p, cfg.to_text())?;
    Ok(p)
}

/// Exports the training pool and both test splits: per sample `image.ppm`,
/// `image.grt`, `label.pgm`, `latent.grt` and `act_1.grt..act_n.grt`
/// (activations of the configured generator at that latent), plus
/// `manifest.csv` and `dataset.cfg`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let g = load_generator(cfg)?;
    let data = build_datasets(cfg)?;
    let mut o = Outputs::new(out)?;
    let synthetic = synthetic_samples(&data.synthetic_test)?;
    let synthetic_images: Vec<Sample> = generate_many(g.as_ref(), &data.synthetic_test, 32)?
        .into_iter()
        .zip(synthetic)
        .map(|((image, _), s)| Sample { image, labels: s.labels })
        .collect();
    let splits: [(Split, &[Latent], &[Sample]); 3] = [
        (Split::Train, &data.pool_latents, &data.pool),
        (Split::RealTest, &data.real_test_latents, &data.real_test),
        (Split::SyntheticTest, &data.synthetic_test, &synthetic_images),
    ];
    let mut entries = Vec::new();
    for (split, latents, samples) in splits {
        let acts = generate_many(g.as_ref(), latents, 32)?;
        for (i, ((latent, sample), (_, phi))) in latents.iter().zip(samples).zip(acts).enumerate() {
            let id = format!("{}-{i:04}", split.name());
            let rel = PathBuf::from(split.name()).join(format!("{i:04}"));
            let dir = out.join(&rel);
            std::fs::create_dir_all(&dir)?;
            export_ppm(dir.join("image.ppm"), &sample.image)?;
            save_tensor(dir.join("image.grt"), &sample.image)?;
            export_pgm(dir.join("label.pgm"), &sample.labels)?;
            save_tensor(dir.join("latent.grt"), &latent.to_tensor())?;
            for (m, a) in phi.stages().iter().enumerate() {
                save_tensor(dir.join(format!("act_{}.grt", m + 1)), a)?;
            }
            entries.push(ManifestEntry { id, split, path: rel });
        }
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        generator: g.descriptor(),
        entries,
    };
    manifest.save(out)?;
    o.files.extend(["manifest.csv".to_owned(), "dataset.cfg".to_owned()]);
    o.finish(cfg)?;
    Ok(manifest)
}

/// Distills a neural generator from the procedural one; writes its weights
/// to `out`, the loss curve to `<stem>_curve.csv` and returns the held-out
/// image MSE on the synthetic test latents.
pub fn train_generator(cfg: &RunConfig, out: &Path) -> Result<f64> {
    cfg.validate()?;
    let d = DistillConfig::default();
    let dcfg = DistillConfig {
        steps: cfg.steps.unwrap_or(d.steps),
        batch: cfg.batch.unwrap_or(d.batch),
        lr: cfg.lr.unwrap_or(d.lr),
        mode: cfg.head,
    };
    let target = ProceduralGenerator::new(cfg.head);
    let (g, log) = distill_neural_generator(&target, &dcfg, &mut SeededRng::derive(cfg.seed, "generator"))?;
    fresh_file(out)?;
    save_params(g.store(), out)?;
    let curve = sibling(out, "_curve.csv");
    fresh_file(&curve)?;
    write_loss_curve(&curve, &log.losses, &[])?;
    write_resolved(out, cfg)?;
    let held_out = sample_latents(&mut SeededRng::derive(cfg.seed, "synthetic-test"), cfg.synthetic_test)?;
    neural_image_mse(&g, &target, &held_out)
}

fn fit_decoder(cfg: &RunConfig, g: &dyn Generator, tcfg: &TrainConfig) -> Result<(ProjectionDecoder, TrainLog)> {
    let mut rng = SeededRng::derive(cfg.seed, "projection");
    let latents = sample_latents(&mut rng, cfg.n_annotated)?;
    train_projection(&annotate(g, &latents)?, tcfg, &mut rng)
}

/// Trains a projection decoder on `n_annotated` generated images and
/// scores it on the synthetic test latents. Writes `projection.grt`,
/// `projection_loss.csv` and `metrics.csv` into `out`.
pub fn train_proj(cfg: &RunConfig, out: &Path) -> Result<MetricsRow> {
    cfg.validate()?;
    let g = load_generator(cfg)?;
    let mut o = Outputs::new(out)?;
    let tcfg = train_cfg(cfg, DEFAULT_PROJECTION_STEPS, projection_config(DEFAULT_PROJECTION_STEPS));
    let (p, log) = fit_decoder(cfg, g.as_ref(), &tcfg)?;
    save_params(p.store(), &o.fresh("projection.grt")?)?;
    write_loss_curve(&o.fresh("projection_loss.csv")?, &log.losses, &log.lrs)?;
    let test = sample_latents(&mut SeededRng::derive(cfg.seed, "synthetic-test"), cfg.synthetic_test)?;
    let row = MetricsRow {
        method: "projection".into(),
        seed: cfg.seed,
        fraction: format!("n{}", cfg.n_annotated),
        metrics: evaluate_projection(&p, &annotate(g.as_ref(), &test)?)?,
    };
    write_metrics(&o.fresh("metrics.csv")?, std::slice::from_ref(&row))?;
    o.finish(cfg)?;
    Ok(row)
}

/// Trains a segmentation model on `distill_samples` generated images labeled
/// by a projection decoder, loaded from `projection` or trained first.
pub fn distill(cfg: &RunConfig, projection: Option<&Path>, out: &Path) -> Result<SegmentationModel> {
    cfg.validate()?;
    let g = load_generator(cfg)?;
    let p = match projection {
        Some(path) => load_decoder(path)?,
        None => fit_decoder(cfg, g.as_ref(), &projection_config(cfg.projection_steps.unwrap_or(DEFAULT_PROJECTION_STEPS)))?.0,
    };
    let latents = sample_latents(&mut SeededRng::derive(cfg.seed, "distill-latents"), cfg.distill_samples)?;
    let tcfg = train_cfg(cfg, DEFAULT_DISTILL_STEPS, segmentation_config(DEFAULT_DISTILL_STEPS));
    let (model, log) = distill_from_projection(g.as_ref(), &p, &latents, &tcfg, &mut SeededRng::derive(cfg.seed, "distill"))?;
    fresh_file(out)?;
    save_params(model.store(), out)?;
    let curve = sibling(out, "_loss.csv");
    fresh_file(&curve)?;
    write_loss_curve(&curve, &log.losses, &log.lrs)?;
    write_resolved(out, cfg)?;
    Ok(model)
}

/// LayerMatch pretraining; writes the backbone to `out` and the training
/// curve to `layermatch_curve.csv` in the same directory.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<Backbone> {
    cfg.validate()?;
    let g = load_generator(cfg)?;
    let mut lm = layermatch_config(cfg, cfg.steps.unwrap_or(DEFAULT_LAYERMATCH_STEPS));
    lm.batch = cfg.batch.unwrap_or(lm.batch);
    lm.lr = cfg.lr.unwrap_or(lm.lr);
    let (b, log) = pretrain_backbone(g.as_ref(), &lm, cfg.seed)?;
    fresh_file(out)?;
    save_params(b.store(), out)?;
    let curve = parent_dir(out)?.join("layermatch_curve.csv");
    fresh_file(&curve)?;
    write_layermatch_curve(&curve, &log)?;
    write_resolved(out, cfg)?;
    Ok(b)
}

fn labeled_split(cfg: &RunConfig, fraction: &str) -> Result<(Vec<Sample>, Vec<Tensor>, f64)> {
    let f = parse_fraction(fraction)?;
    let data = build_datasets(cfg)?;
    let (li, ui) = label_fraction_split(data.pool.len(), f, cfg.seed)?;
    Ok((
        li.iter().map(|&i| data.pool[i].clone()).collect(),
        ui.iter().map(|&i| data.pool[i].image.clone()).collect(),
        f,
    ))
}

/// Fine-tunes a fresh segmentation model whose backbone is loaded from
/// `backbone` on the labeled `fraction` of the pool.
pub fn finetune(cfg: &RunConfig, backbone: &Path, fraction: &str, out: &Path) -> Result<SegmentationModel> {
    cfg.validate()?;
    let b = load_backbone(backbone)?;
    let (labeled, _, _) = labeled_split(cfg, fraction)?;
    let tcfg = train_cfg(cfg, DEFAULT_FINETUNE_STEPS, segmentation_config(DEFAULT_FINETUNE_STEPS));
    let mut rng = SeededRng::derive(cfg.seed, &format!("finetune-{fraction}"));
    let (model, log) = finetune_from_backbone(Some(&b), &labeled, &tcfg, &mut rng)?;
    fresh_file(out)?;
    save_params(model.store(), out)?;
    let curve = sibling(out, "_loss.csv");
    fresh_file(&curve)?;
    write_loss_curve(&curve, &log.losses, &log.lrs)?;
    write_resolved(out, cfg)?;
    Ok(model)
}

/// Pseudo-labeling baseline on the `fraction` split of the pool; returns the
/// model and the retained-pixel fraction of each round.
pub fn pseudo_label(cfg: &RunConfig, fraction: &str, out: &Path) -> Result<(SegmentationModel, Vec<f64>)> {
    cfg.validate()?;
    let (labeled, unlabeled, _) = labeled_split(cfg, fraction)?;
    let tcfg = train_cfg(cfg, DEFAULT_FINETUNE_STEPS, segmentation_config(DEFAULT_FINETUNE_STEPS));
    let mut rng = SeededRng::derive(cfg.seed, &format!("finetune-{fraction}"));
    let (model, log) = train_pseudo_label(&labeled, &unlabeled, cfg.tau, cfg.rounds, &tcfg, &mut rng)?;
    fresh_file(out)?;
    save_params(model.store(), out)?;
    let retained = sibling(out, "_retained.csv");
    fresh_file(&retained)?;
    let rows: Vec<Vec<Cell>> = log.retained.iter().enumerate().map(|(i, &r)| vec![(i + 1).into(), r.into()]).collect();
    write_metrics_csv(&retained, &["round", "retained"], &rows)?;
    write_resolved(out, cfg)?;
    Ok((model, log.retained))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    RealTest,
    SyntheticTest,
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" | "real-test" => Ok(EvalSplit::RealTest),
            "synthetic-test" => Ok(EvalSplit::SyntheticTest),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected test, real-test or synthetic-test"))),
        }
    }
}

/// Scores a saved segmentation model and appends one row to the metrics
/// CSV at `out` (header written once).
pub fn eval(cfg: &RunConfig, model: &Path, split: EvalSplit, fraction: &str, out: &Path) -> Result<MetricsRow> {
    cfg.validate()?;
    let m = load_segmentation(model)?;
    let data = build_datasets(cfg)?;
    let test = match split {
        EvalSplit::RealTest => data.real_test,
        EvalSplit::SyntheticTest => synthetic_samples(&data.synthetic_test)?,
    };
    let row = MetricsRow {
        method: cfg.method.clone(),
        seed: cfg.seed,
        fraction: fraction.into(),
        metrics: evaluate(&m, &test)?,
    };
    parent_dir(out)?;
    write_metrics(out, std::slice::from_ref(&row))?;
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_files_are_prerequisite_errors() {
        let dir = tempfile::tempdir().unwrap();
        let nope = dir.path().join("nope.grt");
        assert!(matches!(load_backbone(&nope), Err(Error::MissingPrerequisite(_))));
        assert!(matches!(load_segmentation(&nope), Err(Error::MissingPrerequisite(_))));
        let cfg = RunConfig {
            generator: GeneratorKind::Neural,
            ..RunConfig::default()
        };
        assert!(matches!(load_generator(&cfg), Err(Error::MissingPrerequisite(_))));
        let e = finetune(&RunConfig::default(), &nope, "1/64", &dir.path().join("m.grt")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn saved_models_reload_identically() {
        let dir = tempfile::tempdir().unwrap();
        let m = SegmentationModel::standard(&mut SeededRng::new(4));
        let p = dir.path().join("sub/m.grt");
        save_params(m.store(), &p).unwrap();
        assert_eq!(load_segmentation(&p).unwrap().store().to_bytes(), m.store().to_bytes());
        let b = Backbone::new(&mut SeededRng::new(5));
        save_params(b.store(), &p).unwrap();
        assert_eq!(load_backbone(&p).unwrap().store().to_bytes(), b.store().to_bytes());
        let wrong = dir.path().join("w.grt");
        save_tensor(&wrong, &Tensor::from_vec(vec![1.0; 3])).unwrap();
        assert!(matches!(load_backbone(&wrong), Err(Error::Format(_))));
    }

    #[test]
    fn split_names() {
        assert_eq!("test".parse::<EvalSplit>().unwrap(), EvalSplit::RealTest);
        assert_eq!("synthetic-test".parse::<EvalSplit>().unwrap(), EvalSplit::SyntheticTest);
        assert!("train".parse::<EvalSplit>().is_err());
    }

    #[test]
    fn gen_data_writes_reloadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            pool: 3,
            real_test: 2,
            synthetic_test: 2,
            ..RunConfig::default()
        };
        let m = gen_data(&cfg, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 7);
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let s = dir.path().join(&m.entries[0].path);
        for f in ["image.ppm", "image.grt", "label.pgm", "latent.grt", "act_1.grt", "act_4.grt"] {
            assert!(s.join(f).exists(), "{f}");
        }
        assert_eq!(load_tensor(s.join("act_2.grt")).unwrap().shape(), &[8, 8, 8]);
    }
}
