//! The lightweight decoder from generator activations to label maps.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::generators::{
    generate_many, latent_to_scene, sample_latent, ground_truth_labels, ActivationSet, Generator, Latent, IMAGE_SIZE,
    LATENT_DIM, LATENT_SIGMA, NUM_CLASSES, NUM_STAGES, STAGE_CHANNELS,
};
use crate::labels::LabelMap;
use crate::metrics::SegMetrics;
use crate::nn::{dropout, BatchNorm, Conv2d, Fwd, Mode, ParamStore, LEAKY_SLOPE};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::train::{train_store, TrainConfig, TrainLog};

pub const DECODER_WIDTH: usize = 32;
pub const CBLOCK_DROPOUT: f64 = 0.5;
pub const DEFAULT_PROJECTION_STEPS: usize = 500;
pub const DEFAULT_PROJECTION_BATCH: usize = 4;
pub const DEFAULT_PROJECTION_LR: f64 = 5e-3;

#[derive(Clone, Debug)]
struct CBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct RBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// One CBlock per stage (dropout, 1x1 conv to 32 maps, batch norm). The
/// trunk starts from the first CBlock; at every later stage it is upsampled,
/// summed with that stage's CBlock and passed through a residual block of two
/// 3x3 convs. A 1x1 conv gives the class logits.
#[derive(Clone, Debug)]
pub struct ProjectionDecoder {
    store: ParamStore,
    cblocks: Vec<CBlock>,
    rblocks: Vec<RBlock>,
    out: Conv2d,
    classes: usize,
}

impl ProjectionDecoder {
    pub fn new(stages: usize, in_channels: usize, classes: usize, rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new();
        let w = DECODER_WIDTH;
        let cblocks = (1..=stages)
            .map(|i| CBlock {
                conv: Conv2d::new(&mut store, &format!("cblock{i}.conv"), in_channels, w, 1, rng),
                bn: BatchNorm::new(&mut store, &format!("cblock{i}.bn"), w),
            })
            .collect();
        let rblocks = (2..=stages)
            .map(|i| RBlock {
                conv1: Conv2d::new(&mut store, &format!("rblock{i}.conv1"), w, w, 3, rng),
                conv2: Conv2d::with_gain(&mut store, &format!("rblock{i}.conv2"), w, w, 3, 0.5, rng),
            })
            .collect();
        let out = Conv2d::with_gain(&mut store, "out", w, classes, 1, 0.1, rng);
        Self {
            store,
            cblocks,
            rblocks,
            out,
            classes,
        }
    }

    /// Decoder for the default four 8-channel stages and three classes.
    pub fn standard(rng: &mut SeededRng) -> Self {
        Self::new(NUM_STAGES, STAGE_CHANNELS, NUM_CLASSES, rng)
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

    /// Logits `[B, C, 32, 32]` from batched stage features.
    fn logits(&self, f: &mut Fwd<'_>, stages: &[Var]) -> Result<Var> {
        if stages.len() != self.cblocks.len() {
            return Err(Error::shape("project", format!("{} stages for {} CBlocks", stages.len(), self.cblocks.len())));
        }
        let mut trunk = None;
        for (i, (&phi, cb)) in stages.iter().zip(&self.cblocks).enumerate() {
            let x = dropout(f, phi, CBLOCK_DROPOUT)?;
            let x = cb.conv.forward(f, x)?;
            let c = cb.bn.forward(f, x)?;
            trunk = Some(match trunk {
                None => c,
                Some(t) => {
                    let up = f.tape.upsample_nearest(t)?;
                    let t = f.tape.add(up, c)?;
                    let rb = &self.rblocks[i - 1];
                    let h = rb.conv1.forward(f, t)?;
                    let h = f.tape.leaky_relu(h, LEAKY_SLOPE)?;
                    let h = rb.conv2.forward(f, h)?;
                    f.tape.add(t, h)?
                }
            });
        }
        let t = f.tape.leaky_relu(trunk.expect("at least one stage"), LEAKY_SLOPE)?;
        self.out.forward(f, t)
    }

    fn stage_batch(tape: &mut Tape, sets: &[&ActivationSet]) -> Result<Vec<Var>> {
        let n = sets[0].len();
        (1..=n)
            .map(|m| {
                let parts: Vec<&Tensor> = sets.iter().map(|s| s.stage(m)).collect();
                Ok(tape.constant(Tensor::stack(&parts)?))
            })
            .collect()
    }

    /// Eval-mode class probabilities `[B, C, 32, 32]`.
    pub fn probabilities(&self, sets: &[&ActivationSet]) -> Result<Tensor> {
        if sets.is_empty() {
            return Err(Error::invalid("no activation sets"));
        }
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &self.store, false, Mode::Eval);
        let stages = Self::stage_batch(f.tape, sets)?;
        let logits = self.logits(&mut f, &stages)?;
        let p = tape.softmax_channels(logits)?;
        Ok(tape.value(p).clone())
    }

    /// Per-pixel argmax labels and `[C, 32, 32]` probabilities.
    pub fn project(&self, phi: &ActivationSet) -> Result<(LabelMap, Tensor)> {
        let probs = self.probabilities(&[phi])?.unstack().remove(0);
        Ok((argmax_labels(&probs)?, probs))
    }

    /// Labels for many activation sets, evaluated in chunks.
    pub fn project_many(&self, sets: &[&ActivationSet]) -> Result<Vec<LabelMap>> {
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(16) {
            for p in self.probabilities(chunk)?.unstack() {
                out.push(argmax_labels(&p)?);
            }
        }
        Ok(out)
    }
}

/// Argmax over the channel axis of `[C, H, W]`; ties go to the lowest class.
pub fn argmax_labels(probs: &Tensor) -> Result<LabelMap> {
    if probs.rank() != 3 {
        return Err(Error::shape("argmax", format!("{:?}", probs.shape())));
    }
    let [c, h, w] = [probs.shape()[0], probs.shape()[1], probs.shape()[2]];
    let d = probs.data();
    let labels = (0..h * w)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * h * w + i] > d[best * h * w + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, c, labels)
}

/// Generator activations paired with ground-truth labels of the same latents.
/// Labels always come from the analytic scene, whatever the generator.
pub fn annotate(g: &dyn Generator, latents: &[Latent]) -> Result<Vec<(ActivationSet, LabelMap)>> {
    let generated = generate_many(g, latents, 32)?;
    generated
        .into_iter()
        .zip(latents)
        .map(|((_, phi), l)| Ok((phi, ground_truth_labels(&latent_to_scene(l)?, IMAGE_SIZE)?)))
        .collect()
}

pub fn projection_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: DEFAULT_PROJECTION_BATCH,
        lr: DEFAULT_PROJECTION_LR,
    }
}

/// Trains a fresh decoder with cross-entropy on the annotated pairs.
pub fn train_projection(
    annotated: &[(ActivationSet, LabelMap)],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(ProjectionDecoder, TrainLog)> {
    if annotated.is_empty() {
        return Err(Error::invalid("projection training needs at least one annotated sample"));
    }
    let mut p = ProjectionDecoder::new(annotated[0].0.len(), annotated[0].0.stage(1).shape()[0], NUM_CLASSES, rng);
    let log = fit_projection(&mut p, annotated, cfg, rng)?;
    Ok((p, log))
}

/// Continues training `p` on the annotated pairs.
pub fn fit_projection(
    p: &mut ProjectionDecoder,
    annotated: &[(ActivationSet, LabelMap)],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainLog> {
    let arch = p.clone();
    let log = train_store(&mut p.store, cfg, annotated.len(), rng, |f, batch| {
        let sets: Vec<&ActivationSet> = batch.iter().map(|&i| &annotated[i].0).collect();
        let stages = ProjectionDecoder::stage_batch(f.tape, &sets)?;
        let logits = arch.logits(f, &stages)?;
        let targets: Vec<usize> = batch.iter().flat_map(|&i| annotated[i].1.targets()).collect();
        f.tape.cross_entropy(logits, &targets, None)
    })?;
    Ok(log)
}

/// Pooled metrics of `p` on annotated pairs.
pub fn evaluate_projection(p: &ProjectionDecoder, test: &[(ActivationSet, LabelMap)]) -> Result<SegMetrics> {
    let sets: Vec<&ActivationSet> = test.iter().map(|(s, _)| s).collect();
    let preds = p.project_many(&sets)?;
    SegMetrics::from_pairs(p.classes(), preds.iter().zip(test.iter().map(|(_, l)| l)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub n: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_iou: f64,
}

pub fn sample_latents(rng: &mut SeededRng, count: usize) -> Result<Vec<Latent>> {
    (0..count).map(|_| sample_latent(rng, LATENT_DIM, LATENT_SIGMA)).collect()
}

/// Trains one decoder per `(n, seed)` and scores it on `test_size` held-out
/// latents shared by all runs (drawn from the first seed).
pub fn evaluate_projection_curve(
    g: &dyn Generator,
    sizes: &[usize],
    test_size: usize,
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<Vec<CurveRow>> {
    if sizes.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("no annotated-set sizes or seeds"));
    }
    let test_latents = sample_latents(&mut SeededRng::derive(seeds[0], "projection-test"), test_size)?;
    let test = annotate(g, &test_latents)?;
    let mut rows = Vec::new();
    for &n in sizes {
        for &seed in seeds {
            let mut rng = SeededRng::derive(seed, &format!("projection-n{n}"));
            let train = annotate(g, &sample_latents(&mut rng, n)?)?;
            let (p, _) = train_projection(&train, cfg, &mut rng)?;
            let m = evaluate_projection(&p, &test)?;
            rows.push(CurveRow {
                n,
                seed,
                accuracy: m.pixel_accuracy,
                mean_iou: m.mean_iou,
            });
        }
    }
    Ok(rows)
}
