//! Staged latent-to-image generators that expose their internal activations
//! and can resume generation from a substituted stage feature.
//!
//! Both generators emit four stages of 8 channels at 4, 8, 16 and 32 pixels
//! and a 3x32x32 image. Stage indices in the public API are 1-based.

mod neural;
mod procedural;
pub mod scene;

pub use neural::{distill_neural_generator, image_mse as neural_image_mse, DistillConfig, DistillLog, NeuralGenerator};
pub use procedural::ProceduralGenerator;
pub use scene::{ground_truth_labels, latent_to_scene, SceneParams, CLASS_BACKGROUND, CLASS_CIRCLE, CLASS_RECTANGLE};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 12;
pub const LATENT_SIGMA: f64 = 1.0;
pub const NUM_STAGES: usize = 4;
pub const STAGE_CHANNELS: usize = 8;
pub const STAGE_RESOLUTIONS: [usize; NUM_STAGES] = [4, 8, 16, 32];
pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    values: Vec<f64>,
}

impl Latent {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.values.clone())
    }
}

/// `k` independent draws from `N(0, sigma^2)`.
pub fn sample_latent(rng: &mut SeededRng, k: usize, sigma: f64) -> Result<Latent> {
    if k == 0 || !(sigma >= 0.0) {
        return Err(Error::invalid(format!("latent k={k}, sigma={sigma}")));
    }
    Ok(Latent::new((0..k).map(|_| sigma * rng.normal()).collect()))
}

/// Stacks latents into a `[B, k]` tensor.
pub(crate) fn latent_batch(latents: &[Latent]) -> Result<Tensor> {
    let k = latents.first().map(|l| l.values.len()).ok_or_else(|| Error::invalid("empty latent batch"))?;
    let mut data = Vec::with_capacity(latents.len() * k);
    for l in latents {
        if l.values.len() != k {
            return Err(Error::shape("latent_batch", "latents of different length"));
        }
        data.extend_from_slice(&l.values);
    }
    Tensor::new(vec![latents.len(), k], data)
}

/// Per-stage feature maps `phi_1..phi_n`, each `[C, r, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    stages: Vec<Tensor>,
}

impl ActivationSet {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::invalid("activation set without stages"));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.rank() != 3 || s.shape()[1] != s.shape()[2] {
                return Err(Error::shape("activation_set", format!("stage {} has shape {:?}", i + 1, s.shape())));
            }
            if i > 0 {
                let prev = stages[i - 1].shape();
                if s.shape()[1] != 2 * prev[1] || s.shape()[0] != prev[0] {
                    return Err(Error::shape(
                        "activation_set",
                        format!("stage {} {:?} does not double stage {} {:?}", i + 1, s.shape(), i, prev),
                    ));
                }
            }
        }
        Ok(Self { stages })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Stage `m`, 1-based.
    pub fn stage(&self, m: usize) -> &Tensor {
        &self.stages[m - 1]
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    pub fn into_stages(self) -> Vec<Tensor> {
        self.stages
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(|s| s.shape().to_vec()).collect()
    }
}

/// Image head applied to the last stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeadMode {
    /// Linear in the final feature.
    #[default]
    Linear,
    /// Smooth clamp `0.5 * (1 + tanh(2x - 1))` into (0, 1).
    Nonlinear,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "nonlinear" => Ok(Self::Nonlinear),
            _ => Err(Error::Config(format!("unknown head mode {s:?}"))),
        }
    }
}

pub(crate) fn apply_head_mode(tape: &mut Tape, mode: HeadMode, x: Var) -> Result<Var> {
    match mode {
        HeadMode::Linear => Ok(x),
        HeadMode::Nonlinear => {
            let shape = tape.value(x).shape().to_vec();
            let s = tape.scale(x, 2.0)?;
            let minus_one = tape.constant(Tensor::full(&shape, -1.0));
            let s = tape.add(s, minus_one)?;
            let t = tape.tanh(s)?;
            let one = tape.constant(Tensor::full(&shape, 1.0));
            let t = tape.add(t, one)?;
            tape.scale(t, 0.5)
        }
    }
}

/// A fixed staged generator. Implementations are immutable, so generation
/// may run from several threads at once.
pub trait Generator: Send + Sync {
    /// Short description used in manifests, e.g. `procedural/linear`.
    fn descriptor(&self) -> String;

    fn head_mode(&self) -> HeadMode;

    fn num_stages(&self) -> usize {
        NUM_STAGES
    }

    /// `[C, r, r]` of stage `m` (1-based).
    fn stage_shape(&self, m: usize) -> [usize; 3] {
        let r = STAGE_RESOLUTIONS[m - 1];
        [STAGE_CHANNELS, r, r]
    }

    /// Images `[B, 3, 32, 32]` and per-stage features `[B, C, r, r]`.
    fn generate_batch(&self, latents: &[Latent]) -> Result<(Tensor, Vec<Tensor>)>;

    /// Records stages `m+1..n` and the head on `tape`, starting from the
    /// batched feature `feature` of stage `m`. Generator parameters enter the
    /// tape as constants.
    fn resume_on_tape(&self, tape: &mut Tape, latents: &[Latent], m: usize, feature: Var) -> Result<Var>;

    /// Bytes of every value defining the generator.
    fn parameter_bytes(&self) -> Vec<u8>;
}

pub(crate) fn check_resume_args(g: &dyn Generator, tape: &Tape, latents: &[Latent], m: usize, feature: Var) -> Result<()> {
    if m == 0 || m > g.num_stages() {
        return Err(Error::invalid(format!("stage {m} outside 1..={}", g.num_stages())));
    }
    let [c, r, _] = g.stage_shape(m);
    let want = [latents.len(), c, r, r];
    if tape.value(feature).shape() != want {
        return Err(Error::shape(
            "resume_forward",
            format!("stage {m} feature {:?}, expected {want:?}", tape.value(feature).shape()),
        ));
    }
    Ok(())
}

pub fn generate_with_activations(g: &dyn Generator, latent: &Latent) -> Result<(Tensor, ActivationSet)> {
    let (images, stages) = g.generate_batch(std::slice::from_ref(latent))?;
    let image = images.unstack().remove(0);
    let stages = stages.into_iter().map(|s| s.unstack().remove(0)).collect();
    Ok((image, ActivationSet::new(stages)?))
}

/// Image obtained after replacing stage `m` (1-based) with `feature`.
pub fn resume_forward(g: &dyn Generator, latent: &Latent, m: usize, feature: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(feature.shape());
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone().reshape(shape)?);
    let out = g.resume_on_tape(&mut tape, std::slice::from_ref(latent), m, f)?;
    Ok(tape.value(out).unstack().remove(0))
}

/// Generates `latents` in chunks to bound memory.
pub fn generate_many(g: &dyn Generator, latents: &[Latent], chunk: usize) -> Result<Vec<(Tensor, ActivationSet)>> {
    let mut out = Vec::with_capacity(latents.len());
    for part in latents.chunks(chunk.max(1)) {
        let (images, stages) = g.generate_batch(part)?;
        let per_stage: Vec<Vec<Tensor>> = stages.iter().map(|s| s.unstack()).collect();
        for (i, image) in images.unstack().into_iter().enumerate() {
            let set = ActivationSet::new(per_stage.iter().map(|s| s[i].clone()).collect())?;
            out.push((image, set));
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling of a `[C, H, W]` tensor.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let mut out = vec![0.0; c * 4 * h * w];
    let src = x.data();
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![c, 2 * h, 2 * w], out).expect("upsample shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_latent_degenerate_and_repeatable() {
        let mut rng = SeededRng::new(4);
        assert_eq!(sample_latent(&mut rng, 12, 0.0).unwrap().values(), &[0.0; 12]);
        let a = sample_latent(&mut SeededRng::new(9), 12, 1.0).unwrap();
        let b = sample_latent(&mut SeededRng::new(9), 12, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(sample_latent(&mut rng, 0, 1.0).is_err());
        assert!(sample_latent(&mut rng, 3, -1.0).is_err());
    }

    #[test]
    fn sample_latent_moments() {
        let mut rng = SeededRng::new(17);
        let n = 10_000;
        let mut sum = [0.0; LATENT_DIM];
        let mut sq = [0.0; LATENT_DIM];
        for _ in 0..n {
            let l = sample_latent(&mut rng, LATENT_DIM, 1.0).unwrap();
            for (i, v) in l.values().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..LATENT_DIM {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "coord {i}: {mean} {var}");
        }
    }

    #[test]
    fn activation_set_rejects_non_doubling() {
        let ok = ActivationSet::new(vec![Tensor::zeros(&[8, 4, 4]), Tensor::zeros(&[8, 8, 8])]);
        assert!(ok.is_ok());
        assert!(ActivationSet::new(vec![Tensor::zeros(&[8, 4, 4]), Tensor::zeros(&[8, 16, 16])]).is_err());
        assert!(ActivationSet::new(vec![]).is_err());
    }

    #[test]
    fn upsample2_repeats_pixels() {
        let y = upsample2(&Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.data()[..8], [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
