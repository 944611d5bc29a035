//! The segmentation network shared by every method, its trainers and the
//! synthetic and noisy "real" datasets it is scored on.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::generators::{
    generate_many, ground_truth_labels, latent_to_scene, Generator, HeadMode, Latent, ProceduralGenerator,
    IMAGE_SIZE, NUM_CLASSES,
};
use crate::labels::LabelMap;
use crate::layermatch::{Backbone, BackboneNet, BACKBONE_CHANNELS};
use crate::metrics::SegMetrics;
use crate::nn::{Conv2d, Fwd, Mode, ParamStore, LEAKY_SLOPE};
use crate::projection::{argmax_labels, ProjectionDecoder};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::train::{train_store, TrainConfig, TrainLog};

pub const HEAD_WIDTH: usize = 32;
pub const REAL_NOISE_STD: f64 = 0.02;
pub const REAL_BRIGHTNESS_JITTER: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_ROUNDS: usize = 2;
pub const DEFAULT_SEG_BATCH: usize = 4;
pub const DEFAULT_SEG_LR: f64 = 1e-3;
/// Steps for training on a labeled subset (scratch, fine-tune and each
/// pseudo-label round).
pub const DEFAULT_FINETUNE_STEPS: usize = 300;
pub const DEFAULT_DISTILL_STEPS: usize = 1500;

pub fn segmentation_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: DEFAULT_SEG_BATCH,
        lr: DEFAULT_SEG_LR,
    }
}

/// An image `[3, 32, 32]` with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

/// Backbone followed by a head that upsamples every level to 32 pixels,
/// concatenates them and applies `conv3 (32) -> leaky -> conv1 (C)`.
#[derive(Clone, Debug)]
pub struct SegmentationModel {
    store: ParamStore,
    net: BackboneNet,
    fuse: Conv2d,
    out: Conv2d,
    classes: usize,
}

impl SegmentationModel {
    pub fn new(classes: usize, rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new();
        let net = BackboneNet::new(&mut store, rng);
        let concat: usize = BACKBONE_CHANNELS.iter().sum();
        let fuse = Conv2d::new(&mut store, "seghead.fuse", concat, HEAD_WIDTH, 1, rng);
        let out = Conv2d::with_gain(&mut store, "seghead.out", HEAD_WIDTH, classes, 3, 0.1, rng);
        Self {
            store,
            net,
            fuse,
            out,
            classes,
        }
    }

    pub fn standard(rng: &mut SeededRng) -> Self {
        Self::new(NUM_CLASSES, rng)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Replaces the backbone weights.
    pub fn load_backbone(&mut self, backbone: &Backbone) -> Result<()> {
        self.store.copy_prefixed_from(backbone.store(), "backbone.")?;
        Ok(())
    }

    pub fn backbone(&self) -> Result<Backbone> {
        Backbone::from_store(&self.store)
    }

    fn logits(&self, f: &mut Fwd<'_>, images: Var) -> Result<Var> {
        let feats = self.net.forward(f, images)?;
        let mut up = Vec::with_capacity(feats.len());
        for mut x in feats {
            while f.tape.value(x).shape()[2] < IMAGE_SIZE {
                x = f.tape.upsample_bilinear(x)?;
            }
            up.push(x);
        }
        let x = f.tape.concat_channels(&up)?;
        let x = self.fuse.forward(f, x)?;
        let x = f.tape.leaky_relu(x, LEAKY_SLOPE)?;
        self.out.forward(f, x)
    }

    /// Class probabilities `[B, C, 32, 32]`.
    pub fn probabilities(&self, images: &[&Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::invalid("no images"));
        }
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &self.store, false, Mode::Eval);
        let x = f.tape.constant(Tensor::stack(images)?);
        let logits = self.logits(&mut f, x)?;
        let p = tape.softmax_channels(logits)?;
        Ok(tape.value(p).clone())
    }

    /// Per-image `[C, 32, 32]` probabilities, evaluated in chunks.
    pub fn probabilities_many(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            out.extend(self.probabilities(chunk)?.unstack());
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<LabelMap>> {
        self.probabilities_many(images)?.iter().map(argmax_labels).collect()
    }

    /// Mean cross-entropy on `samples` in eval mode.
    pub fn loss(&self, samples: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in samples.chunks(16) {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &self.store, false, Mode::Eval);
            let x = f.tape.constant(Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?);
            let logits = self.logits(&mut f, x)?;
            let targets: Vec<usize> = chunk.iter().flat_map(|s| s.labels.targets()).collect();
            let l = tape.cross_entropy(logits, &targets, None)?;
            total += tape.value(l).item() * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }
}

/// Pooled metrics over a test set.
pub fn evaluate(model: &SegmentationModel, test: &[Sample]) -> Result<SegMetrics> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let preds = model.predict(&test.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    SegMetrics::from_pairs(model.classes(), preds.iter().zip(test.iter().map(|s| &s.labels)))
}

/// Cross-entropy training in place. `weights`, when given, holds one
/// per-pixel weight vector per sample; zero-weight pixels are ignored.
fn fit(
    model: &mut SegmentationModel,
    samples: &[Sample],
    weights: Option<&[Vec<f64>]>,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainLog> {
    let arch = model.clone();
    train_store(&mut model.store, cfg, samples.len(), rng, |f, batch| {
        let x = f.tape.constant(Tensor::stack(&batch.iter().map(|&i| &samples[i].image).collect::<Vec<_>>())?);
        let logits = arch.logits(f, x)?;
        let targets: Vec<usize> = batch.iter().flat_map(|&i| samples[i].labels.targets()).collect();
        match weights {
            Some(w) => {
                let w: Vec<f64> = batch.iter().flat_map(|&i| w[i].iter().copied()).collect();
                f.tape.cross_entropy(logits, &targets, Some(&w))
            }
            None => f.tape.cross_entropy(logits, &targets, None),
        }
    })
}

pub fn train_segmentation(
    model: &mut SegmentationModel,
    samples: &[Sample],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::invalid("segmentation training needs at least one sample"));
    }
    fit(model, samples, None, cfg, rng)
}

/// Fresh model with its backbone replaced by `backbone` (if any), then
/// trained end to end. The model is always initialized from `rng` first, so
/// runs with and without a backbone consume the same stream afterwards.
pub fn finetune_from_backbone(
    backbone: Option<&Backbone>,
    labeled: &[Sample],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(SegmentationModel, TrainLog)> {
    if labeled.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one labeled sample"));
    }
    let mut model = SegmentationModel::standard(rng);
    if let Some(b) = backbone {
        model.load_backbone(b)?;
    }
    let log = fit(&mut model, labeled, None, cfg, rng)?;
    Ok((model, log))
}

/// Distillation training pairs: generated images labeled by the decoder.
pub fn projected_dataset(g: &dyn Generator, p: &ProjectionDecoder, latents: &[Latent]) -> Result<Vec<Sample>> {
    if latents.is_empty() {
        return Err(Error::invalid("distillation needs at least one latent"));
    }
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(64) {
        let generated = generate_many(g, chunk, 32)?;
        let sets: Vec<_> = generated.iter().map(|(_, s)| s).collect();
        let labels = p.project_many(&sets)?;
        out.extend(generated.into_iter().zip(labels).map(|((image, _), labels)| Sample { image, labels }));
    }
    Ok(out)
}

/// Trains a fresh model on `latents.len()` generated images labeled by `p`.
pub fn distill_from_projection(
    g: &dyn Generator,
    p: &ProjectionDecoder,
    latents: &[Latent],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(SegmentationModel, TrainLog)> {
    let data = projected_dataset(g, p, latents)?;
    let mut model = SegmentationModel::standard(rng);
    let log = fit(&mut model, &data, None, cfg, rng)?;
    Ok((model, log))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelLog {
    pub initial: TrainLog,
    /// Fraction of unlabeled pixels kept as targets in each round.
    pub retained: Vec<f64>,
    pub rounds: Vec<TrainLog>,
}

/// Per-pixel argmax targets and `{0, 1}` weights (max probability >= tau).
pub fn pseudo_labels(model: &SegmentationModel, images: &[Tensor], tau: f64) -> Result<(Vec<Sample>, Vec<Vec<f64>>, f64)> {
    let probs = model.probabilities_many(&images.iter().collect::<Vec<_>>())?;
    let mut samples = Vec::with_capacity(images.len());
    let mut weights = Vec::with_capacity(images.len());
    let (mut kept, mut total) = (0usize, 0usize);
    for (img, p) in images.iter().zip(&probs) {
        let labels = argmax_labels(p)?;
        let plane = p.shape()[1] * p.shape()[2];
        let w: Vec<f64> = (0..plane)
            .map(|i| {
                let best = p.data()[usize::from(labels.data()[i]) * plane + i];
                if best >= tau { 1.0 } else { 0.0 }
            })
            .collect();
        kept += w.iter().filter(|&&v| v > 0.0).count();
        total += plane;
        samples.push(Sample { image: img.clone(), labels });
        weights.push(w);
    }
    let frac = if total == 0 { 0.0 } else { kept as f64 / total as f64 };
    Ok((samples, weights, frac))
}

/// Self-training baseline: train on `labeled`, then for each round
/// pseudo-label `unlabeled` at confidence `tau` and continue training on the
/// union, pseudo-labeled pixels below `tau` being excluded from the loss.
pub fn train_pseudo_label(
    labeled: &[Sample],
    unlabeled: &[Tensor],
    tau: f64,
    rounds: usize,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(SegmentationModel, PseudoLabelLog)> {
    if labeled.is_empty() {
        return Err(Error::invalid("pseudo-labeling needs labeled data"));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("confidence threshold {tau} outside (0, 1]")));
    }
    let mut model = SegmentationModel::standard(rng);
    let mut log = PseudoLabelLog {
        initial: train_segmentation(&mut model, labeled, cfg, rng)?,
        ..PseudoLabelLog::default()
    };
    if unlabeled.is_empty() {
        return Ok((model, log));
    }
    for _ in 0..rounds {
        let (pseudo, pseudo_w, frac) = pseudo_labels(&model, unlabeled, tau)?;
        log.retained.push(frac);
        let mut data = labeled.to_vec();
        let mut weights: Vec<Vec<f64>> = labeled.iter().map(|s| vec![1.0; s.labels.len()]).collect();
        data.extend(pseudo);
        weights.extend(pseudo_w);
        log.rounds.push(fit(&mut model, &data, Some(&weights), cfg, rng)?);
    }
    Ok((model, log))
}

/// Labeled and unlabeled index sets. The labeled set is the first
/// `max(1, floor(fraction * n))` entries of a seeded permutation, so for one
/// seed smaller fractions give subsets of larger ones.
pub fn label_fraction_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("label fraction {fraction} outside (0, 1]")));
    }
    let perm = SeededRng::derive(seed, "label-split").permutation(n);
    let k = ((fraction * n as f64).floor() as usize).max(1);
    Ok((perm[..k].to_vec(), perm[k..].to_vec()))
}

/// Noise-free procedural samples for `latents`.
pub fn synthetic_samples(latents: &[Latent]) -> Result<Vec<Sample>> {
    let g = ProceduralGenerator::new(HeadMode::Linear);
    let generated = generate_many(&g, latents, 32)?;
    generated
        .into_iter()
        .zip(latents)
        .map(|((image, _), l)| {
            Ok(Sample {
                image,
                labels: ground_truth_labels(&latent_to_scene(l)?, IMAGE_SIZE)?,
            })
        })
        .collect()
}

/// The "real" domain: procedural renders with per-pixel Gaussian noise and a
/// global brightness offset drawn uniformly from `[-0.05, 0.05]`.
pub fn real_samples(latents: &[Latent], rng: &mut SeededRng) -> Result<Vec<Sample>> {
    let mut samples = synthetic_samples(latents)?;
    for s in &mut samples {
        let shift = rng.uniform_range(-REAL_BRIGHTNESS_JITTER, REAL_BRIGHTNESS_JITTER);
        for v in s.image.data_mut() {
            *v += shift + REAL_NOISE_STD * rng.normal();
        }
    }
    Ok(samples)
}
