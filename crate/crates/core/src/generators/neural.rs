//! Small style-modulated convolutional generator, distilled from the
//! procedural one so that it reproduces its activations and images.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fwd, Linear, Mode, ParamStore, LEAKY_SLOPE};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::{
    apply_head_mode, check_resume_args, latent_batch, sample_latent, Generator, HeadMode, Latent, LATENT_DIM,
    LATENT_SIGMA, NUM_STAGES, STAGE_CHANNELS, STAGE_RESOLUTIONS,
};

pub const HIDDEN_CHANNELS: usize = 32;

#[derive(Clone, Debug)]
struct Stage {
    conv1: Conv2d,
    conv2: Conv2d,
    scale: Linear,
    shift: Linear,
}

/// Stage 1 is an affine map of the latent reshaped to `8x4x4`. Stages 2-4
/// add to the upsampled predecessor a residual `conv3 -> leaky -> conv3`
/// whose output channels are modulated by `1 + scale(l)` and `shift(l)`.
/// The head is a 1x1 convolution to RGB.
#[derive(Clone, Debug)]
pub struct NeuralGenerator {
    store: ParamStore,
    stem: Linear,
    stages: Vec<Stage>,
    head: Conv2d,
    mode: HeadMode,
}

impl NeuralGenerator {
    pub fn new(mode: HeadMode, rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new();
        let r0 = STAGE_RESOLUTIONS[0];
        let stem = Linear::new(&mut store, "stem", LATENT_DIM, STAGE_CHANNELS * r0 * r0, 1.0, rng);
        let stages = (2..=NUM_STAGES)
            .map(|j| Stage {
                conv1: Conv2d::new(&mut store, &format!("stage{j}.conv1"), STAGE_CHANNELS, HIDDEN_CHANNELS, 3, rng),
                conv2: Conv2d::with_gain(&mut store, &format!("stage{j}.conv2"), HIDDEN_CHANNELS, STAGE_CHANNELS, 3, 0.5, rng),
                scale: Linear::new(&mut store, &format!("stage{j}.scale"), LATENT_DIM, STAGE_CHANNELS, 0.1, rng),
                shift: Linear::new(&mut store, &format!("stage{j}.shift"), LATENT_DIM, STAGE_CHANNELS, 0.1, rng),
            })
            .collect();
        let head = Conv2d::new(&mut store, "head", STAGE_CHANNELS, 3, 1, rng);
        Self {
            store,
            stem,
            stages,
            head,
            mode,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Replaces all weights from a flattened parameter tensor.
    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        self.store.load_flat(flat)
    }

    fn stage_forward(&self, f: &mut Fwd<'_>, j: usize, z: Var, prev: Var) -> Result<Var> {
        let st = &self.stages[j - 2];
        let up = f.tape.upsample_nearest(prev)?;
        let h = st.conv1.forward(f, up)?;
        let h = f.tape.leaky_relu(h, LEAKY_SLOPE)?;
        let y = st.conv2.forward(f, h)?;
        let s = st.scale.forward(f, z)?;
        let ones = f.tape.constant(Tensor::full(f.tape.value(s).shape(), 1.0));
        let s = f.tape.add(s, ones)?;
        let t = st.shift.forward(f, z)?;
        let y = f.tape.channel_affine(y, s, t)?;
        f.tape.add(up, y)
    }

    fn image_head(&self, f: &mut Fwd<'_>, last: Var) -> Result<Var> {
        let x = self.head.forward(f, last)?;
        apply_head_mode(f.tape, self.mode, x)
    }

    /// Full pass on `f`: every stage and the image.
    fn forward(&self, f: &mut Fwd<'_>, latents: &[Latent]) -> Result<(Vec<Var>, Var)> {
        let z = f.tape.constant(latent_batch(latents)?);
        let r0 = STAGE_RESOLUTIONS[0];
        let flat = self.stem.forward(f, z)?;
        let mut cur = f.tape.reshape(flat, vec![latents.len(), STAGE_CHANNELS, r0, r0])?;
        let mut stages = vec![cur];
        for j in 2..=NUM_STAGES {
            cur = self.stage_forward(f, j, z, cur)?;
            stages.push(cur);
        }
        let image = self.image_head(f, cur)?;
        Ok((stages, image))
    }
}

impl Generator for NeuralGenerator {
    fn descriptor(&self) -> String {
        match self.mode {
            HeadMode::Linear => "neural/linear".into(),
            HeadMode::Nonlinear => "neural/nonlinear".into(),
        }
    }

    fn head_mode(&self) -> HeadMode {
        self.mode
    }

    fn generate_batch(&self, latents: &[Latent]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &self.store, false, Mode::Eval);
        let (stages, image) = self.forward(&mut f, latents)?;
        let stages = stages.into_iter().map(|v| tape.value(v).clone()).collect();
        Ok((tape.value(image).clone(), stages))
    }

    fn resume_on_tape(&self, tape: &mut Tape, latents: &[Latent], m: usize, feature: Var) -> Result<Var> {
        check_resume_args(self, tape, latents, m, feature)?;
        let mut f = Fwd::new(tape, &self.store, false, Mode::Eval);
        let z = f.tape.constant(latent_batch(latents)?);
        let mut cur = feature;
        for j in m + 1..=NUM_STAGES {
            cur = self.stage_forward(&mut f, j, z, cur)?;
        }
        self.image_head(&mut f, cur)
    }

    fn parameter_bytes(&self) -> Vec<u8> {
        let mut bytes = self.store.to_bytes();
        bytes.push(self.mode as u8);
        bytes
    }
}

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mode: HeadMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 8,
            lr: 3e-3,
            mode: HeadMode::Linear,
        }
    }
}

/// Per-step training loss (mean over the batch of the summed squared errors).
#[derive(Clone, Debug, Default)]
pub struct DistillLog {
    pub losses: Vec<f64>,
}

/// Mean per-element squared image error of `g` against `target` on `latents`.
pub fn image_mse(g: &dyn Generator, target: &dyn Generator, latents: &[Latent]) -> Result<f64> {
    let (a, _) = g.generate_batch(latents)?;
    let (b, _) = target.generate_batch(latents)?;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(sq / a.numel() as f64)
}

/// Fits a fresh [`NeuralGenerator`] to `target` on freshly sampled latents,
/// matching every stage and the image.
pub fn distill_neural_generator(
    target: &dyn Generator,
    cfg: &DistillConfig,
    rng: &mut SeededRng,
) -> Result<(NeuralGenerator, DistillLog)> {
    if cfg.batch == 0 {
        return Err(Error::invalid("distillation batch must be positive"));
    }
    let mut g = NeuralGenerator::new(cfg.mode, rng);
    let mut adam = Adam::new(&g.store, AdamConfig::default());
    let mut log = DistillLog::default();
    for step in 0..cfg.steps {
        let latents = (0..cfg.batch)
            .map(|_| sample_latent(rng, LATENT_DIM, LATENT_SIGMA))
            .collect::<Result<Vec<_>>>()?;
        let (want_img, want_stages) = target.generate_batch(&latents)?;
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &g.store, true, Mode::Eval);
        let (stages, image) = g.forward(&mut f, &latents)?;
        let (bound, _) = f.into_updates();
        let mut terms = Vec::with_capacity(NUM_STAGES + 1);
        for (v, want) in stages.iter().zip(want_stages).chain(std::iter::once((&image, want_img))) {
            let t = tape.constant(want);
            let d = tape.sub(*v, t)?;
            terms.push(tape.squared_norm(d)?);
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let loss = tape.scale(loss, 1.0 / cfg.batch as f64)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        log.losses.push(value);
        let mut grads = tape.backward(loss)?;
        let grads = g.store.collect_grads(&bound, &mut grads);
        adam.step(&mut g.store, &grads, cosine_lr(step, cfg.steps, cfg.lr)?)?;
    }
    Ok((g, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{generate_with_activations, resume_forward, ProceduralGenerator};

    #[test]
    fn shapes_and_identity_substitution() {
        let mut rng = SeededRng::new(3);
        let g = NeuralGenerator::new(HeadMode::Nonlinear, &mut rng);
        let l = sample_latent(&mut rng, LATENT_DIM, 1.0).unwrap();
        let (img, acts) = generate_with_activations(&g, &l).unwrap();
        assert_eq!(img.shape(), &[3, 32, 32]);
        assert_eq!(acts.shapes(), vec![vec![8, 4, 4], vec![8, 8, 8], vec![8, 16, 16], vec![8, 32, 32]]);
        for m in 1..=4 {
            let rec = resume_forward(&g, &l, m, acts.stage(m)).unwrap();
            assert!(rec.max_abs_diff(&img) < 1e-10);
        }
    }

    #[test]
    fn zero_steps_gives_random_init_error() {
        let p = ProceduralGenerator::default();
        let cfg = DistillConfig {
            steps: 0,
            ..DistillConfig::default()
        };
        let (g, log) = distill_neural_generator(&p, &cfg, &mut SeededRng::new(1)).unwrap();
        assert!(log.losses.is_empty());
        let fresh = NeuralGenerator::new(HeadMode::Linear, &mut SeededRng::new(1));
        assert_eq!(g.parameter_bytes(), fresh.parameter_bytes());
        let mut rng = SeededRng::new(2);
        let ls: Vec<_> = (0..8).map(|_| sample_latent(&mut rng, LATENT_DIM, 1.0).unwrap()).collect();
        let mse = image_mse(&g, &p, &ls).unwrap();
        assert!(mse.is_finite() && mse > 0.0);
    }

    #[test]
    fn short_distillation_descends() {
        let p = ProceduralGenerator::default();
        let cfg = DistillConfig {
            steps: 60,
            batch: 4,
            ..DistillConfig::default()
        };
        let (_, log) = distill_neural_generator(&p, &cfg, &mut SeededRng::new(5)).unwrap();
        let head: f64 = log.losses[..5].iter().sum();
        let tail: f64 = log.losses[55..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }
}
