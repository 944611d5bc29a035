//! Analytic generator: a Laplacian pyramid of rasterized scenes.
//!
//! `phi_1 = render_4(l)` and `phi_j = up(phi_{j-1}) + detail_j(l)` with
//! `detail_j = render_{r_j}(l) - up(render_{r_{j-1}}(l))`, so the unperturbed
//! stages equal the renders while a substituted stage propagates upward.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

use super::scene::{latent_to_scene, SCENE_MAP};
use super::{apply_head_mode, check_resume_args, upsample2, Generator, HeadMode, Latent, NUM_STAGES, STAGE_RESOLUTIONS};

#[derive(Clone, Debug, Default)]
pub struct ProceduralGenerator {
    mode: HeadMode,
}

impl ProceduralGenerator {
    pub fn new(mode: HeadMode) -> Self {
        Self { mode }
    }

    /// Renders of the latent's scene at every stage resolution.
    pub fn renders(&self, latent: &Latent) -> Result<Vec<Tensor>> {
        let scene = latent_to_scene(latent)?;
        Ok(STAGE_RESOLUTIONS.iter().map(|&r| scene.render(r)).collect())
    }

    /// `detail_1 = render_1`, then the pyramid residuals.
    fn details(&self, latent: &Latent) -> Result<Vec<Tensor>> {
        let renders = self.renders(latent)?;
        let mut out = vec![renders[0].clone()];
        for j in 1..NUM_STAGES {
            let up = upsample2(&renders[j - 1]);
            let data = renders[j].data().iter().zip(up.data()).map(|(a, b)| a - b).collect();
            out.push(Tensor::new(renders[j].shape().to_vec(), data)?);
        }
        Ok(out)
    }

    fn batched_details(&self, latents: &[Latent]) -> Result<Vec<Tensor>> {
        let per_latent = latents.iter().map(|l| self.details(l)).collect::<Result<Vec<_>>>()?;
        (0..NUM_STAGES)
            .map(|j| Tensor::stack(&per_latent.iter().map(|d| &d[j]).collect::<Vec<_>>()))
            .collect()
    }

    /// Stages after `m` and the image, from `feature` at stage `m`.
    fn run_from(&self, tape: &mut Tape, details: &[Tensor], m: usize, feature: Var) -> Result<(Vec<Var>, Var)> {
        let mut stages = vec![feature];
        let mut cur = feature;
        for detail in &details[m..] {
            let up = tape.upsample_nearest(cur)?;
            let d = tape.constant(detail.clone());
            cur = tape.add(up, d)?;
            stages.push(cur);
        }
        let color = tape.slice_channels(cur, 0, 3)?;
        let image = apply_head_mode(tape, self.mode, color)?;
        Ok((stages, image))
    }
}

impl Generator for ProceduralGenerator {
    fn descriptor(&self) -> String {
        match self.mode {
            HeadMode::Linear => "procedural/linear".into(),
            HeadMode::Nonlinear => "procedural/nonlinear".into(),
        }
    }

    fn head_mode(&self) -> HeadMode {
        self.mode
    }

    fn generate_batch(&self, latents: &[Latent]) -> Result<(Tensor, Vec<Tensor>)> {
        let details = self.batched_details(latents)?;
        let mut tape = Tape::new();
        let first = tape.constant(details[0].clone());
        let (stages, image) = self.run_from(&mut tape, &details, 1, first)?;
        let stages = stages.into_iter().map(|v| tape.value(v).clone()).collect();
        Ok((tape.value(image).clone(), stages))
    }

    fn resume_on_tape(&self, tape: &mut Tape, latents: &[Latent], m: usize, feature: Var) -> Result<Var> {
        check_resume_args(self, tape, latents, m, feature)?;
        let details = self.batched_details(latents)?;
        Ok(self.run_from(tape, &details, m, feature)?.1)
    }

    fn parameter_bytes(&self) -> Vec<u8> {
        let mut bytes: Vec<u8> = SCENE_MAP.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
        bytes.push(self.mode as u8);
        bytes
    }
}
