//! Parameter storage and the handful of layers the networks are built from.
//!
//! A network owns a [`ParamStore`]; layers only hold [`ParamId`]s into it.
//! Each forward pass binds the store onto a fresh [`Tape`] through a
//! [`Fwd`] context, which also carries the train/eval mode and collects
//! batch-norm running-statistic updates.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Puts every entry on the tape. Trainable entries become gradient
    /// leaves when `requires_grad` is set; everything else is a constant.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), requires_grad && e.trainable))
            .collect();
        Bound { vars }
    }

    /// Gradients aligned with the store entries; `None` for buffers.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|(e, &v)| if e.trainable { grads.take(v) } else { None })
            .collect()
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.entries[id.0].value = t;
        }
    }

    /// All values concatenated in entry order.
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.num_values());
        for e in &self.entries {
            data.extend_from_slice(e.value.data());
        }
        Tensor::from_vec(data)
    }

    /// Inverse of [`ParamStore::flatten`] for a store of identical layout.
    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        if flat.rank() != 1 || flat.numel() != self.num_values() {
            return Err(Error::Format(format!(
                "parameter file holds {:?} values, architecture needs {}",
                flat.shape(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.numel();
            e.value.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copies values of entries whose name starts with `prefix` from `other`,
    /// matched by name. Returns the number of entries copied.
    pub fn copy_prefixed_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Format(format!("source store lacks {}", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::shape("copy_params", format!("{}: {:?} vs {:?}", e.name, src.value.shape(), e.value.shape())));
            }
            e.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Keeps only entries whose name starts with `prefix`.
    pub fn retain_prefixed(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self.entries.iter().filter(|e| e.name.starts_with(prefix)).cloned().collect(),
        }
    }

    /// Little-endian bytes of every value, for bit-exact comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Tape handles for every entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

pub enum Mode<'a> {
    Eval,
    /// Dropout active and batch statistics used; masks drawn from the stream.
    Train(&'a mut SeededRng),
}

/// Forward-pass context: tape, bound parameters and mode.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub bound: Bound,
    pub mode: Mode<'a>,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, requires_grad: bool, mode: Mode<'a>) -> Self {
        let bound = store.bind(tape, requires_grad);
        Self {
            tape,
            store,
            bound,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn training(&self) -> bool {
        matches!(self.mode, Mode::Train(_))
    }

    /// Running-statistic updates recorded during the pass.
    pub fn into_updates(self) -> (Bound, Vec<(ParamId, Tensor)>) {
        (self.bound, self.updates)
    }
}

fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut SeededRng) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut SeededRng) -> Self {
        Self::with_gain(store, name, cin, cout, k, 1.0, rng)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(&[cout, cin, k, k], cin * k * k, gain, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.weight), f.p(self.bias));
        f.tape.conv2d(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, gain: f64, rng: &mut SeededRng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(&[fout, fin], fin, gain, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]), true);
        Self { weight, bias }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.weight), f.p(self.bias));
        f.tape.affine(x, w, b)
    }
}

/// Batch normalization; running statistics follow
/// `running = 0.9 * running + 0.1 * batch`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        if f.training() {
            let (y, mean, var) = f.tape.batchnorm_train(x, g, b)?;
            let blend = |old: &Tensor, new: Vec<f64>| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| BATCHNORM_MOMENTUM * o + (1.0 - BATCHNORM_MOMENTUM) * n)
                    .collect();
                Tensor::new(old.shape().to_vec(), data).expect("running stat shape")
            };
            let rm = blend(f.store.get(self.running_mean), mean);
            let rv = blend(f.store.get(self.running_var), var);
            f.updates.push((self.running_mean, rm));
            f.updates.push((self.running_var, rv));
            Ok(y)
        } else {
            let (mean, var) = (f.store.get(self.running_mean), f.store.get(self.running_var));
            f.tape.batchnorm_eval(x, g, b, mean.data(), var.data())
        }
    }
}

/// Dropout that is active only in training mode.
pub fn dropout(f: &mut Fwd<'_>, x: Var, p: f64) -> Result<Var> {
    match &mut f.mode {
        Mode::Train(rng) => f.tape.dropout(x, p, Some(rng)),
        Mode::Eval => f.tape.dropout(x, p, None),
    }
}
