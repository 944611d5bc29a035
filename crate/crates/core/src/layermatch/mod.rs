//! Encoder pretraining by predicting a fixed generator's activations.
//!
//! The encoder sees a generated image and predicts every stage feature
//! through per-stage heads. The loss is
//! `L = w_match * (1/n) sum_i ||phi_i - phi_hat_i||^2 + w_rec * ||I_rec - I_gen||^2`
//! where `I_rec` regenerates the image after substituting the prediction of
//! one stage `m`. Squared norms are element sums; batches average per sample.

mod encoder;
mod kmeans;

pub use encoder::{encode, Backbone, BackboneNet, Encoder, BACKBONE_CHANNELS};
pub use kmeans::{cluster_purity, feature_cluster_purity, kmeans, purity, KMEANS_ITERATIONS};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::generators::{sample_latent, Generator, Latent, LATENT_DIM, LATENT_SIGMA};
use crate::nn::{Fwd, Mode};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_LAYERMATCH_STEPS: usize = 3000;
pub const DEFAULT_LAYERMATCH_BATCH: usize = 8;
pub const DEFAULT_LAYERMATCH_LR: f64 = 3e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMatchConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub match_weight: f64,
    pub rec_weight: f64,
    /// Draw the substituted stage per sample instead of once per batch.
    pub per_sample_stage: bool,
    /// Divide each squared norm by its element count.
    pub normalize: bool,
}

impl Default for LayerMatchConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_LAYERMATCH_STEPS,
            batch: DEFAULT_LAYERMATCH_BATCH,
            lr: DEFAULT_LAYERMATCH_LR,
            match_weight: 1.0,
            rec_weight: 1.0,
            per_sample_stage: false,
            normalize: false,
        }
    }
}

impl LayerMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("layermatch steps and batch must be positive".into()));
        }
        if !(self.match_weight >= 0.0 && self.rec_weight >= 0.0) {
            return Err(Error::Config("layermatch loss weights must be nonnegative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("layermatch lr must be positive".into()));
        }
        Ok(())
    }
}

fn sq_norm(tape: &mut Tape, a: Var, b: Var, normalize: bool) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let s = tape.squared_norm(d)?;
    if normalize {
        let n = tape.value(d).numel() as f64;
        tape.scale(s, 1.0 / n)
    } else {
        Ok(s)
    }
}

/// `(1/n) sum_i ||phi_i - phi_hat_i||^2`, summed over the batch.
pub fn match_loss_on_tape(tape: &mut Tape, phi: &[Var], phi_hat: &[Var], normalize: bool) -> Result<Var> {
    if phi.len() != phi_hat.len() || phi.is_empty() {
        return Err(Error::shape("match_loss", format!("{} targets, {} predictions", phi.len(), phi_hat.len())));
    }
    let mut total = sq_norm(tape, phi[0], phi_hat[0], normalize)?;
    for (&a, &b) in phi.iter().zip(phi_hat).skip(1) {
        let t = sq_norm(tape, a, b, normalize)?;
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / phi.len() as f64)
}

/// `||I_rec - I_gen||^2` summed over the batch, with `I_rec` resumed from the
/// stage-`m` prediction.
pub fn rec_loss_on_tape(
    tape: &mut Tape,
    g: &dyn Generator,
    latents: &[Latent],
    m: usize,
    phi_hat_m: Var,
    i_gen: Var,
    normalize: bool,
) -> Result<Var> {
    let rec = g.resume_on_tape(tape, latents, m, phi_hat_m)?;
    sq_norm(tape, rec, i_gen, normalize)
}

/// Matching loss between two activation lists of equal shapes.
pub fn match_loss(phi: &[Tensor], phi_hat: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let a: Vec<Var> = phi.iter().map(|t| tape.constant(t.clone())).collect();
    let b: Vec<Var> = phi_hat.iter().map(|t| tape.constant(t.clone())).collect();
    let l = match_loss_on_tape(&mut tape, &a, &b, false)?;
    Ok(tape.value(l).item())
}

/// Reconstruction loss for one latent and a substituted stage-`m` feature.
pub fn rec_loss(g: &dyn Generator, latent: &Latent, m: usize, phi_hat_m: &Tensor) -> Result<f64> {
    let (image, _) = g.generate_batch(std::slice::from_ref(latent))?;
    let mut tape = Tape::new();
    let mut shape = vec![1];
    shape.extend_from_slice(phi_hat_m.shape());
    let f = tape.constant(phi_hat_m.clone().reshape(shape)?);
    let i_gen = tape.constant(image);
    let l = rec_loss_on_tape(&mut tape, g, std::slice::from_ref(latent), m, f, i_gen, false)?;
    Ok(tape.value(l).item())
}

/// Batch-mean loss terms recorded on `f.tape`.
pub(crate) struct LossTerms {
    pub matching: Var,
    pub rec: Var,
    pub total: Var,
}

fn select(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let items = t.unstack();
    Tensor::stack(&idx.iter().map(|&i| &items[i]).collect::<Vec<_>>())
}

/// Builds the weighted LayerMatch loss for `latents` with stage `stages[b]`
/// substituted for sample `b`. A term with zero weight stays off the graph.
pub(crate) fn layermatch_terms(
    f: &mut Fwd<'_>,
    e: &Encoder,
    g: &dyn Generator,
    latents: &[Latent],
    stages: &[usize],
    cfg: &LayerMatchConfig,
) -> Result<LossTerms> {
    let (images, phis) = g.generate_batch(latents)?;
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (b, &m) in stages.iter().enumerate() {
        match groups.iter_mut().find(|(gm, _)| *gm == m) {
            Some((_, idx)) => idx.push(b),
            None => groups.push((m, vec![b])),
        }
    }
    let mut match_sum: Option<Var> = None;
    let mut rec_sum: Option<Var> = None;
    let whole = groups.len() == 1;
    for (m, idx) in &groups {
        let (imgs, targets) = if whole {
            (images.clone(), phis.clone())
        } else {
            (select(&images, idx)?, phis.iter().map(|p| select(p, idx)).collect::<Result<Vec<_>>>()?)
        };
        let group_latents: Vec<Latent> = idx.iter().map(|&i| latents[i].clone()).collect();
        let x = f.tape.constant(imgs);
        let preds = e.forward(f, x)?;
        let targets: Vec<Var> = targets.into_iter().map(|t| f.tape.constant(t)).collect();
        let ml = match_loss_on_tape(f.tape, &targets, &preds, cfg.normalize)?;
        let rl = rec_loss_on_tape(f.tape, g, &group_latents, *m, preds[m - 1], x, cfg.normalize)?;
        match_sum = Some(match match_sum {
            Some(s) => f.tape.add(s, ml)?,
            None => ml,
        });
        rec_sum = Some(match rec_sum {
            Some(s) => f.tape.add(s, rl)?,
            None => rl,
        });
    }
    let inv_b = 1.0 / latents.len() as f64;
    let matching = f.tape.scale(match_sum.expect("nonempty batch"), inv_b)?;
    let rec = f.tape.scale(rec_sum.expect("nonempty batch"), inv_b)?;
    let total = match (cfg.match_weight > 0.0, cfg.rec_weight > 0.0) {
        (true, true) => {
            let a = f.tape.scale(matching, cfg.match_weight)?;
            let b = f.tape.scale(rec, cfg.rec_weight)?;
            f.tape.add(a, b)?
        }
        (true, false) => f.tape.scale(matching, cfg.match_weight)?,
        (false, true) => f.tape.scale(rec, cfg.rec_weight)?,
        (false, false) => f.tape.scale(matching, 0.0)?,
    };
    Ok(LossTerms { matching, rec, total })
}

/// One evaluation of the loss with gradients, for inspection.
#[derive(Clone, Debug)]
pub struct LossProbe {
    pub match_loss: f64,
    pub rec_loss: f64,
    pub total: f64,
    /// Gradient of the total for every encoder parameter, by name.
    pub grads: Vec<(String, Tensor)>,
}

/// Evaluates the weighted loss on `latents` with the given substituted
/// stages and returns its gradients without updating `e`.
pub fn probe_loss(
    e: &Encoder,
    g: &dyn Generator,
    latents: &[Latent],
    stages: &[usize],
    cfg: &LayerMatchConfig,
) -> Result<LossProbe> {
    if latents.is_empty() || latents.len() != stages.len() {
        return Err(Error::invalid(format!("{} latents with {} stage indices", latents.len(), stages.len())));
    }
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, e.store(), true, Mode::Eval);
    let terms = layermatch_terms(&mut f, e, g, latents, stages, cfg)?;
    let (bound, _) = f.into_updates();
    let (ml, rl, total) = (
        tape.value(terms.matching).item(),
        tape.value(terms.rec).item(),
        tape.value(terms.total).item(),
    );
    let mut grads = tape.backward(terms.total)?;
    let grads = e
        .store()
        .collect_grads(&bound, &mut grads)
        .into_iter()
        .zip(e.store().entries())
        .filter_map(|(g, entry)| g.map(|g| (entry.name.clone(), g)))
        .collect();
    Ok(LossProbe {
        match_loss: ml,
        rec_loss: rl,
        total,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerMatchStep {
    pub step: usize,
    pub match_loss: f64,
    pub rec_loss: f64,
    pub total: f64,
    pub lr: f64,
    /// Substituted stage of each sample.
    pub stages: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerMatchLog {
    pub steps: Vec<LayerMatchStep>,
}

impl LayerMatchLog {
    /// Mean total loss over steps `range`.
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|x| x.total).sum::<f64>() / s.len() as f64
    }
}

fn draw_stages(rng: &mut SeededRng, n: usize, batch: usize, per_sample: bool) -> Vec<usize> {
    if per_sample {
        (0..batch).map(|_| 1 + rng.below(n)).collect()
    } else {
        vec![1 + rng.below(n); batch]
    }
}

/// Trains `e` in place on freshly generated batches. Only encoder
/// parameters are updated; the generator is borrowed immutably.
pub fn train_encoder(e: &mut Encoder, g: &dyn Generator, cfg: &LayerMatchConfig, rng: &mut SeededRng) -> Result<LayerMatchLog> {
    cfg.validate()?;
    let mut adam = Adam::new(e.store(), AdamConfig::default());
    let mut log = LayerMatchLog::default();
    let arch = e.clone();
    for step in 0..cfg.steps {
        let latents = (0..cfg.batch)
            .map(|_| sample_latent(rng, LATENT_DIM, LATENT_SIGMA))
            .collect::<Result<Vec<_>>>()?;
        let stages = draw_stages(rng, g.num_stages(), cfg.batch, cfg.per_sample_stage);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, e.store(), true, Mode::Eval);
        let terms = layermatch_terms(&mut f, &arch, g, &latents, &stages, cfg)?;
        let (bound, _) = f.into_updates();
        let total = tape.value(terms.total).item();
        let (ml, rl) = (tape.value(terms.matching).item(), tape.value(terms.rec).item());
        if !total.is_finite() {
            return Err(Error::Divergence { step, loss: total });
        }
        let mut grads = tape.backward(terms.total)?;
        let grads = e.store().collect_grads(&bound, &mut grads);
        let lr = cosine_lr(step, cfg.steps, cfg.lr)?;
        adam.step(e.store_mut(), &grads, lr)?;
        log.steps.push(LayerMatchStep {
            step,
            match_loss: ml,
            rec_loss: rl,
            total,
            lr,
            stages,
        });
    }
    Ok(log)
}

/// Pretrains `e` against `g`, then discards the heads.
pub fn pretrain_layermatch(
    g: &dyn Generator,
    mut e: Encoder,
    cfg: &LayerMatchConfig,
    rng: &mut SeededRng,
) -> Result<(Backbone, LayerMatchLog)> {
    let log = train_encoder(&mut e, g, cfg, rng)?;
    Ok((e.into_backbone()?, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{generate_with_activations, ProceduralGenerator};

    #[test]
    fn match_loss_arithmetic() {
        let phi = vec![Tensor::from_vec(vec![1.0, 3.0]), Tensor::from_vec(vec![5.0])];
        let hat = vec![Tensor::from_vec(vec![1.0, 1.0]), Tensor::from_vec(vec![5.0])];
        assert_eq!(match_loss(&phi, &hat).unwrap(), 2.0);
        assert_eq!(match_loss(&hat, &phi).unwrap(), 2.0);
        assert_eq!(match_loss(&phi, &phi).unwrap(), 0.0);
        assert!(match_loss(&phi, &hat[..1]).is_err());
    }

    #[test]
    fn encoder_shapes_and_backbone_levels() {
        let mut rng = SeededRng::new(1);
        let e = Encoder::new(&mut rng);
        let img = Tensor::new(vec![3, 32, 32], (0..3072).map(|_| rng.uniform()).collect()).unwrap();
        let phi_hat = encode(&e, &img).unwrap();
        assert_eq!(phi_hat.shapes(), vec![vec![8, 4, 4], vec![8, 8, 8], vec![8, 16, 16], vec![8, 32, 32]]);
        assert_eq!(encode(&e, &img).unwrap(), phi_hat);
        let feats = e.backbone_features(&Tensor::stack(&[&img]).unwrap()).unwrap();
        let res: Vec<_> = feats.iter().map(|f| (f.shape()[1], f.shape()[2])).collect();
        assert_eq!(res, vec![(48, 4), (32, 8), (24, 16), (16, 32)]);
        assert!(encode(&e, &Tensor::zeros(&[3, 16, 16])).is_err());
    }

    #[test]
    fn removing_heads_keeps_backbone_outputs() {
        let mut rng = SeededRng::new(2);
        let e = Encoder::new(&mut rng);
        let imgs = Tensor::new(vec![2, 3, 32, 32], (0..6144).map(|_| rng.uniform()).collect()).unwrap();
        let before = e.backbone_features(&imgs).unwrap();
        let b = e.clone().into_backbone().unwrap();
        assert_eq!(b.features(&imgs).unwrap(), before);
        assert!(b.store().entries().iter().all(|p| p.name.starts_with("backbone.")));
        assert_eq!(e.num_heads(), 4);
    }

    #[test]
    fn rec_loss_zero_at_identity() {
        let g = ProceduralGenerator::default();
        let l = sample_latent(&mut SeededRng::new(3), LATENT_DIM, 1.0).unwrap();
        let (_, acts) = generate_with_activations(&g, &l).unwrap();
        for m in 1..=4 {
            assert!(rec_loss(&g, &l, m, acts.stage(m)).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let g = ProceduralGenerator::default();
        let mut rng = SeededRng::new(0);
        let mut e = Encoder::new(&mut rng);
        let cfg = LayerMatchConfig { rec_weight: -1.0, ..LayerMatchConfig::default() };
        assert!(train_encoder(&mut e, &g, &cfg, &mut rng).is_err());
        let cfg = LayerMatchConfig { steps: 0, ..LayerMatchConfig::default() };
        assert!(train_encoder(&mut e, &g, &cfg, &mut rng).is_err());
    }
}
