//! Optimization: Adam, dropout, batching and the epoch loop.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::TrainConfig;
use crate::corpus::{SentencePair, Vocabulary, PAD};
use crate::error::{NliError, Result};
use crate::eval::accuracy;
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Mixes several integers into one RNG seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        acc ^= p;
        acc = acc.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = acc;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        acc = z ^ (z >> 31);
    }
    acc
}

// ---- dropout ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout on a plain tensor: kept entries are scaled by
/// `1 / (1 - rate)`; eval mode is the identity.
pub fn apply_dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Tensor {
    if mode == Mode::Eval || rate == 0.0 {
        return x.clone();
    }
    let scale = 1.0 / (1.0 - rate);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = if rng.random::<f64>() < rate { 0.0 } else { *v * scale };
    }
    out
}

/// Dropout site handle used during a forward pass. Masks are drawn from its
/// own seeded stream so a batch's masks depend only on the seed.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn mode(&self) -> Mode {
        if self.rng.is_some() && self.rate > 0.0 {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let shape = g.value(x);
        let (rows, cols) = (shape.rows(), shape.cols());
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        g.mul_const(x, Arc::new(Tensor::from_vec(rows, cols, mask)))
    }
}

// ---- Adam ------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros_like(t)).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, c: &TrainConfig) -> Self {
        Adam::new(store, c.learning_rate, c.beta1, c.beta2, c.epsilon)
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.v[id.index()]
    }

    /// One bias-corrected update. `grads` must hold one entry per parameter;
    /// frozen rows are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(NliError::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (k, (id, g)) in grads.iter().enumerate() {
            if id.index() != k {
                return Err(NliError::contract(format!("missing gradient for `{}`", store.name(ParamId(k)))));
            }
            if g.shape() != store.value(*id).shape() {
                return Err(NliError::Shape {
                    op: "adam",
                    left: g.shape().to_vec(),
                    right: store.value(*id).shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let frozen = store.frozen_rows(*id).to_vec();
            let cols = g.cols();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.value_mut(*id);
            let gd = g.data();
            let (md, vd, wd) = (m.data_mut(), v.data_mut(), w.data_mut());
            for k in 0..gd.len() {
                if !frozen.is_empty() && frozen.contains(&(k / cols)) {
                    continue;
                }
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gd[k];
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gd[k] * gd[k];
                let m_hat = md[k] / c1;
                let v_hat = vd[k] / c2;
                wd[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut [(ParamId, Tensor)], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

// ---- batching --------------------------------------------------------------

/// Example indices split into batches. Shuffled by `(seed, epoch)`; with
/// `bucket` the shuffled order is grouped by premise length within windows
/// of 50 batches.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64, bucket: Option<&[usize]>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, 0x5348_5546]));
    order.shuffle(&mut rng);
    if let Some(lengths) = bucket {
        for window in order.chunks_mut(batch_size.max(1) * 50) {
            window.sort_by_key(|&i| lengths[i]);
        }
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if bucket.is_some() {
        batches.shuffle(&mut rng);
    }
    batches
}

/// Token ids of one side of a batch, padded to the longest sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn new(sentences: &[Vec<usize>]) -> Self {
        let max = sentences.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sentences.len());
        let mut mask = Vec::with_capacity(sentences.len());
        for s in sentences {
            let mut row = s.clone();
            row.resize(max, PAD);
            ids.push(row);
            let mut m = vec![true; s.len()];
            m.resize(max, false);
            mask.push(m);
        }
        Padded {
            ids,
            mask,
            lengths: sentences.iter().map(Vec::len).collect(),
        }
    }

    pub fn max_len(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    /// Ids in time-major order (`t * B + s`).
    pub fn time_major(&self) -> Vec<usize> {
        let b = self.ids.len();
        let mut out = Vec::with_capacity(b * self.max_len());
        for t in 0..self.max_len() {
            for s in 0..b {
                out.push(self.ids[s][t]);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub indices: Vec<usize>,
    pub premise: Padded,
    pub hypothesis: Padded,
    pub labels: Vec<usize>,
}

pub fn pad_batch(pairs: &[SentencePair], indices: &[usize], vocab: &Vocabulary) -> Result<PaddedBatch> {
    let mut labels = Vec::with_capacity(indices.len());
    let mut prem = Vec::with_capacity(indices.len());
    let mut hyp = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = &pairs[i];
        if p.premise.is_empty() || p.hypothesis.is_empty() {
            return Err(NliError::contract(format!("example {i} has an empty sentence")));
        }
        prem.push(vocab.encode(&p.premise));
        hyp.push(vocab.encode(&p.hypothesis));
        labels.push(p.label.index());
    }
    Ok(PaddedBatch {
        indices: indices.to_vec(),
        premise: Padded::new(&prem),
        hypothesis: Padded::new(&hyp),
        labels,
    })
}

// ---- epoch loop ------------------------------------------------------------

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub dev_accuracy: f64,
    pub wall_ms: u64,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev accuracy (the initial model
    /// when no epoch ran).
    pub best: Model,
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
    pub last: Model,
    pub log: Vec<LogEntry>,
}

/// One optimizer step on the given examples; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[&SentencePair],
    dropout: &mut Dropout,
    max_grad_norm: Option<f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = model.loss(&mut g, batch, dropout)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let mut grads = g.take_param_grads();
    // the graph shares parameter buffers; release them before updating in place
    drop(g);
    if let Some(max) = max_grad_norm {
        clip_gradients(&mut grads, max);
    }
    opt.update(&mut model.store, &grads)?;
    Ok(value)
}

/// Trains for up to `max_epochs`, evaluating on `dev` after every epoch.
/// Stops early after `patience` epochs without improvement or once dev
/// accuracy reaches 1. `on_epoch` sees every log entry as it is produced.
pub fn train_loop(
    config: &TrainConfig,
    mut model: Model,
    train: &[SentencePair],
    dev: &[SentencePair],
    mut on_epoch: impl FnMut(&LogEntry, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(NliError::contract("training and dev sets must be non-empty"));
    }
    model.check_data(train)?;
    model.check_data(dev)?;
    let started = Instant::now();
    let mut opt = Adam::from_config(&model.store, config);
    let lengths: Vec<usize> = train.iter().map(|p| p.premise.len()).collect();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc: Option<f64> = None;
    let mut stale = 0;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        let batches = make_batches(
            train.len(),
            config.batch_size,
            config.seed,
            epoch as u64,
            config.bucket_by_length.then_some(lengths.as_slice()),
        );
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let refs: Vec<&SentencePair> = idx.iter().map(|&i| &train[i]).collect();
            let mut dropout = Dropout::train(config.dropout, derive_seed(&[config.seed, epoch as u64, b as u64]));
            total += train_step(&mut model, &mut opt, &refs, &mut dropout, config.max_grad_norm)?;
        }
        let probs = model.predict(dev, config.batch_size)?;
        let dev_accuracy = accuracy(&probs, dev);
        let entry = LogEntry {
            epoch,
            step: opt.step,
            loss: total / batches.len() as f64,
            dev_accuracy,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(&entry, &model)?;
        log.push(entry);

        if best_acc.is_none_or(|b| dev_accuracy > b) {
            best_acc = Some(dev_accuracy);
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        if dev_accuracy >= 1.0 || config.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dev_accuracy: best_acc,
        last: model,
        log,
    })
}
