//! Multi-resolution image encoder and its per-stage auxiliary heads.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::generators::{ActivationSet, IMAGE_SIZE, NUM_STAGES, STAGE_CHANNELS};
use crate::nn::{Conv2d, Fwd, Mode, ParamStore, LEAKY_SLOPE};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Channels of the backbone features at 4, 8, 16 and 32 pixels.
pub const BACKBONE_CHANNELS: [usize; 4] = [48, 32, 24, 16];
const STEM_CHANNELS: usize = 16;

#[derive(Clone, Debug)]
struct DownStage {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Layer handles of the backbone inside some [`ParamStore`]; all parameter
/// names start with `backbone.`.
///
/// Bottom-up: a 3x3 stem to 16 maps at 32 pixels, then three stages of
/// `avgpool -> conv3 -> leaky -> conv3` to 24, 32 and 48 maps at 16, 8 and 4
/// pixels. Top-down: each level adds a 1x1 projection of the bilinearly
/// upsampled coarser output, so the fine maps carry image-wide context.
#[derive(Clone, Debug)]
pub struct BackboneNet {
    stem: Conv2d,
    down: Vec<DownStage>,
    lateral: Vec<Conv2d>,
}

impl BackboneNet {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng) -> Self {
        let stem = Conv2d::new(store, "backbone.stem", 3, STEM_CHANNELS, 3, rng);
        let widths = [STEM_CHANNELS, 24, 32, 48];
        let down = (1..4)
            .map(|i| DownStage {
                conv1: Conv2d::new(store, &format!("backbone.down{i}.conv1"), widths[i - 1], widths[i], 3, rng),
                conv2: Conv2d::new(store, &format!("backbone.down{i}.conv2"), widths[i], widths[i], 3, rng),
            })
            .collect();
        let lateral = (1..4)
            .rev()
            .map(|i| Conv2d::new(store, &format!("backbone.topdown{i}"), widths[i], widths[i - 1], 1, rng))
            .collect();
        Self { stem, down, lateral }
    }

    /// Features `[B, C_i, r_i, r_i]` ordered from 4 to 32 pixels.
    pub fn forward(&self, f: &mut Fwd<'_>, images: Var) -> Result<Vec<Var>> {
        let shape = f.tape.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape("encode", format!("images {shape:?}, expected [B, 3, 32, 32]")));
        }
        let x = self.stem.forward(f, images)?;
        let mut bottom_up = vec![f.tape.leaky_relu(x, LEAKY_SLOPE)?];
        for st in &self.down {
            let x = f.tape.avg_pool(*bottom_up.last().expect("stem"))?;
            let x = st.conv1.forward(f, x)?;
            let x = f.tape.leaky_relu(x, LEAKY_SLOPE)?;
            let x = st.conv2.forward(f, x)?;
            bottom_up.push(f.tape.leaky_relu(x, LEAKY_SLOPE)?);
        }
        bottom_up.reverse();
        let mut out = vec![bottom_up[0]];
        for (lat, &b) in self.lateral.iter().zip(&bottom_up[1..]) {
            let up = f.tape.upsample_bilinear(*out.last().expect("coarsest level"))?;
            let td = lat.forward(f, up)?;
            out.push(f.tape.add(b, td)?);
        }
        Ok(out)
    }
}

/// Standalone backbone, heads removed.
#[derive(Clone, Debug)]
pub struct Backbone {
    store: ParamStore,
    net: BackboneNet,
}

impl Backbone {
    pub fn new(rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new();
        let net = BackboneNet::new(&mut store, rng);
        Self { store, net }
    }

    /// Builds the layout and copies every `backbone.` entry from `store`.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut b = Self::new(&mut SeededRng::new(0));
        b.store.copy_prefixed_from(store, "backbone.")?;
        Ok(b)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        self.store.load_flat(flat)
    }

    pub fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &self.store, false, Mode::Eval);
        let x = f.tape.constant(images.clone());
        let feats = self.net.forward(&mut f, x)?;
        Ok(feats.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// Backbone plus one 1x1 head per generator stage.
#[derive(Clone, Debug)]
pub struct Encoder {
    store: ParamStore,
    net: BackboneNet,
    heads: Vec<Conv2d>,
}

impl Encoder {
    pub fn new(rng: &mut SeededRng) -> Self {
        let mut store = ParamStore::new();
        let net = BackboneNet::new(&mut store, rng);
        let heads = (0..NUM_STAGES)
            .map(|i| Conv2d::new(&mut store, &format!("heads.stage{}", i + 1), BACKBONE_CHANNELS[i], STAGE_CHANNELS, 1, rng))
            .collect();
        Self { store, net, heads }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Predicted stages `[B, 8, r, r]` on the tape.
    pub fn forward(&self, f: &mut Fwd<'_>, images: Var) -> Result<Vec<Var>> {
        let feats = self.net.forward(f, images)?;
        feats.iter().zip(&self.heads).map(|(&x, h)| h.forward(f, x)).collect()
    }

    /// Backbone feature maps without the heads.
    pub fn backbone_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, &self.store, false, Mode::Eval);
        let x = f.tape.constant(images.clone());
        let feats = self.net.forward(&mut f, x)?;
        Ok(feats.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Drops the heads.
    pub fn into_backbone(self) -> Result<Backbone> {
        Backbone::from_store(&self.store)
    }
}

/// Predicted activations `Phi_hat = E(image)` for one `[3, 32, 32]` image.
pub fn encode(e: &Encoder, image: &Tensor) -> Result<ActivationSet> {
    if image.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::shape("encode", format!("image {:?}, expected [3, 32, 32]", image.shape())));
    }
    let mut tape = Tape::new();
    let mut f = Fwd::new(&mut tape, &e.store, false, Mode::Eval);
    let x = f.tape.constant(image.clone().reshape(vec![1, 3, IMAGE_SIZE, IMAGE_SIZE])?);
    let outs = e.forward(&mut f, x)?;
    ActivationSet::new(outs.into_iter().map(|v| tape.value(v).unstack().remove(0)).collect())
}
