//! Minibatch loop shared by every trainer: epoch-wise shuffled batches,
//! Adam with cosine decay, running-statistic updates and divergence checks.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Mode, ParamStore};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Loss of each step, evaluated before that step's update.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Sample indices drawn at each step.
    pub batches: Vec<Vec<usize>>,
}

impl TrainLog {
    /// Mean loss over steps `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Draws batches by walking shuffled epochs over `0..n`.
pub(crate) struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize) -> Self {
        Self { n, order: Vec::new(), pos: 0 }
    }

    pub fn next(&mut self, size: usize, rng: &mut SeededRng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = rng.permutation(self.n);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Runs `cfg.steps` updates of the trainable entries of `store`. `loss_fn`
/// builds the scalar loss for a batch of sample indices on the training-mode
/// context. The batch size is capped at `n`.
pub(crate) fn train_store(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    n: usize,
    rng: &mut SeededRng,
    mut loss_fn: impl FnMut(&mut Fwd<'_>, &[usize]) -> Result<Var>,
) -> Result<TrainLog> {
    if n == 0 {
        return Err(Error::invalid("no training samples"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut adam = Adam::new(store, AdamConfig::default());
    let mut sampler = BatchSampler::new(n);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sampler.next(cfg.batch.min(n), rng);
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, store, true, Mode::Train(rng));
        let loss = loss_fn(&mut f, &batch)?;
        let (bound, updates) = f.into_updates();
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let mut grads = tape.backward(loss)?;
        let grads = store.collect_grads(&bound, &mut grads);
        let lr = cosine_lr(step, cfg.steps, cfg.lr)?;
        adam.step(store, &grads, lr)?;
        store.apply_updates(updates);
        log.losses.push(value);
        log.lrs.push(lr);
        log.batches.push(batch);
    }
    Ok(log)
}
