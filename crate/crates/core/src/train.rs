//! Training loops for instance discrimination and the two baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ufl_autodiff::{accumulate, sgd_step, ParamSet, Real, Tape, Tensor, Var};

use crate::bank::{init_bank, MemoryBank, DEFAULT_TAU};
use crate::data::{augment, chips_to_tensor, AugmentConfig, Chip};
use crate::error::{Error, Result};
use crate::models::{
    autoencoder_loss, supervised_loss, ClassBalancedSampler, Decoder, Encoder, SupervisedHead,
};
use crate::seed::mix;
use crate::ufl::{draw_noise, estimate_z, nce_loss, ufl_loss_exact, NceConfig};
use crate::ClassId;

/// `lr(epoch) = initial · decay_factor^⌊epoch / decay_every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl LrSchedule {
    /// Constant 0.03.
    pub fn from_scratch() -> Self {
        Self {
            initial: 0.03,
            decay_factor: 1.0,
            decay_every: 1,
        }
    }

    /// 0.001, halved every two epochs.
    pub fn fine_tune() -> Self {
        Self {
            initial: 0.001,
            decay_factor: 0.5,
            decay_every: 2,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial
            * self
                .decay_factor
                .powi((epoch / self.decay_every.max(1)) as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::from_scratch()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Full softmax over every bank row.
    Exact,
    /// Noise-contrastive approximation.
    Nce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Heavy-ball momentum on the gradient; 0 gives plain SGD.
    pub sgd_momentum: f64,
    /// Rescale each step's gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub mode: LossMode,
    pub nce: NceConfig,
    pub augment: AugmentConfig,
    /// Mixing weight of the old row in bank updates; 0 replaces rows.
    pub bank_momentum: f64,
    /// Instances per gradient shard. Fixed so results do not depend on the
    /// number of worker threads.
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            epochs: 30,
            batch_size: 128,
            lr: LrSchedule::from_scratch(),
            sgd_momentum: 0.0,
            grad_clip: None,
            mode: LossMode::Exact,
            nce: NceConfig::default(),
            augment: AugmentConfig::default(),
            bank_momentum: 0.0,
            shard_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite())
            || self.lr.decay_factor.is_nan()
            || self.lr.decay_factor <= 0.0
        {
            return Err(Error::Config(
                "learning rate and decay factor must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(Error::Config(
                "batch_size and shard_size must be at least 1".into(),
            ));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || !(0.0..1.0).contains(&self.bank_momentum) {
            return Err(Error::Config("momentum values must lie in [0, 1)".into()));
        }
        self.nce.validate()
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// SGD, optionally with heavy-ball momentum, over several parameter sets.
struct Optimizer {
    momentum: f64,
    clip: Option<f64>,
    velocity: Vec<Vec<Tensor>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, sets: &[&ParamSet]) -> Self {
        let velocity = sets
            .iter()
            .map(|s| {
                s.tensors()
                    .iter()
                    .map(|t| Tensor::zeros(t.shape().to_vec()))
                    .collect()
            })
            .collect();
        Self {
            momentum: cfg.sgd_momentum,
            clip: cfg.grad_clip,
            velocity,
        }
    }

    fn step(
        &mut self,
        sets: &mut [&mut ParamSet],
        mut grads: Vec<Vec<Tensor>>,
        lr: f64,
    ) -> Result<()> {
        if let Some(clip) = self.clip {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|t| t.data())
                .map(|&g| g as f64 * g as f64)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = (clip / norm) as Real;
                grads
                    .iter_mut()
                    .flatten()
                    .for_each(|t| t.data_mut().iter_mut().for_each(|g| *g *= scale));
            }
        }
        for ((set, g), vel) in sets.iter_mut().zip(grads).zip(&mut self.velocity) {
            if self.momentum == 0.0 {
                sgd_step(set, &g, lr as Real)?;
                continue;
            }
            for (v, gi) in vel.iter_mut().zip(&g) {
                for (a, &b) in v.data_mut().iter_mut().zip(gi.data()) {
                    *a = self.momentum as Real * *a + b;
                }
            }
            sgd_step(set, vel, lr as Real)?;
        }
        Ok(())
    }
}

/// Output of one shard: summed loss, parameter gradients per set, and the
/// embeddings it produced (instance discrimination only).
struct ShardOut {
    loss: f64,
    grads: Vec<Vec<Tensor>>,
    embeddings: Option<Tensor>,
}

/// Evaluates `build` on every shard in parallel, each with a private tape.
/// `build` returns the shard's summed loss and, optionally, embeddings to
/// report. Gradients are summed in shard order.
fn run_shards<F>(
    sets: &[&ParamSet],
    shards: &[(Vec<usize>, Tensor)],
    build: F,
) -> Result<Vec<ShardOut>>
where
    F: Fn(&mut Tape, &[Vec<Var>], usize, &[usize], Var) -> Result<(Var, Option<Var>)> + Sync,
{
    shards
        .par_iter()
        .enumerate()
        .map(|(s, (idx, x))| {
            let mut tape = Tape::new();
            let vars: Vec<Vec<Var>> = sets.iter().map(|p| p.register(&mut tape)).collect();
            let xv = tape.constant(x.clone());
            let (loss, emb) = build(&mut tape, &vars, s, idx, xv)?;
            let grads = tape.backward(loss)?;
            Ok(ShardOut {
                loss: tape.value(loss).item().expect("scalar loss") as f64,
                grads: vars.iter().map(|v| grads.collect(&tape, v)).collect(),
                embeddings: emb.map(|e| tape.value(e).clone()),
            })
        })
        .collect()
}

fn sum_grads(outs: &mut [ShardOut], scale: Real) -> Vec<Vec<Tensor>> {
    let mut total = std::mem::take(&mut outs[0].grads);
    for out in &outs[1..] {
        for (acc, g) in total.iter_mut().zip(&out.grads) {
            accumulate(acc, g);
        }
    }
    for set in &mut total {
        for g in set {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    total
}

/// Augmented, resized chips for `idx`, split into shards.
fn make_shards(
    chips: &[Chip],
    idx: &[usize],
    cfg: &TrainConfig,
    side: usize,
    epoch: usize,
) -> Result<Vec<(Vec<usize>, Tensor)>> {
    idx.chunks(cfg.shard_size)
        .map(|part| {
            let augmented: Vec<Chip> = part
                .par_iter()
                .map(|&i| {
                    augment(
                        &chips[i],
                        &cfg.augment,
                        mix(cfg.seed, &[1, epoch as u64, i as u64]),
                    )
                })
                .collect();
            Ok((part.to_vec(), chips_to_tensor(&augmented, side)?))
        })
        .collect()
}

fn encoder_side(encoder: &Encoder) -> Result<usize> {
    encoder
        .config()
        .side()
        .ok_or_else(|| Error::Config("training requires a square encoder input".into()))
}

fn check_loss(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, batch })
    }
}

/// Result of instance-discrimination training.
#[derive(Debug, Clone)]
pub struct UflOutcome {
    pub encoder: Encoder,
    /// Final bank, labeled when labels were supplied.
    pub bank: MemoryBank,
    pub log: Vec<EpochLog>,
    /// Mean loss of the very first batch, before any update.
    pub initial_loss: f64,
    /// The NCE normalizer used, in NCE mode.
    pub z: Option<f64>,
}

/// Instance discrimination: each training chip is its own class.
///
/// Per epoch the instances are shuffled; each batch is augmented,
/// embedded, scored against the bank (exact softmax or NCE), and the
/// encoder takes one SGD step on the batch-mean loss. Bank rows of the
/// batch are then overwritten with the embeddings used for the loss.
pub fn train_ufl(
    chips: &[Chip],
    labels: Option<&[ClassId]>,
    encoder: Encoder,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<UflOutcome> {
    cfg.validate()?;
    if chips.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let side = encoder_side(&encoder)?;
    let n = chips.len();
    let mut encoder = encoder;
    let mut bank = init_bank(n, encoder.embedding_dim(), mix(cfg.seed, &[2]))?.with_tau(cfg.tau)?;
    let mut nce = cfg.nce;
    let mut z_estimates = Vec::new();
    let mut opt = Optimizer::new(cfg, &[encoder.params()]);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    let mut global_batch = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            cfg.seed,
            &[3, epoch as u64],
        )));
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let shards = make_shards(chips, idx, cfg, side, epoch)?;
            let bank_t = bank.to_tensor();

            if cfg.mode == LossMode::Nce && global_batch < nce.z_batches {
                let mut queries = Vec::new();
                for (_, x) in &shards {
                    queries.extend_from_slice(encoder.embed_tensor(x)?.data());
                }
                let queries = Tensor::new(vec![idx.len(), encoder.embedding_dim()], queries)?;
                let seed = mix(cfg.seed, &[4, global_batch as u64]);
                z_estimates.push(estimate_z(&bank, &queries, nce.z_samples, seed)?);
                nce.z = Some(z_estimates.iter().sum::<f64>() / z_estimates.len() as f64);
            }

            let enc = &encoder;
            let mut outs = run_shards(&[encoder.params()], &shards, |tape, vars, s, part, x| {
                let v = enc.forward(tape, &vars[0], x)?;
                let bv = tape.constant(bank_t.clone());
                let loss = match cfg.mode {
                    LossMode::Exact => ufl_loss_exact(tape, bv, v, part, cfg.tau)?,
                    LossMode::Nce => {
                        let seed = mix(cfg.seed, &[5, epoch as u64, b as u64, s as u64]);
                        let noise = draw_noise(n, part.len(), nce.noise_samples, seed);
                        nce_loss(tape, bv, v, part, &noise, &nce, cfg.tau)?
                    }
                };
                Ok((loss, Some(v)))
            })?;
            let batch_loss = outs.iter().map(|o| o.loss).sum::<f64>() / idx.len() as f64;
            check_loss(batch_loss, epoch, b)?;
            initial_loss.get_or_insert(batch_loss);
            epoch_loss += batch_loss * idx.len() as f64;

            let grads = sum_grads(&mut outs, 1.0 / idx.len() as Real);
            opt.step(&mut [encoder.params_mut()], grads, lr)?;
            for (out, (part, _)) in outs.iter().zip(&shards) {
                let emb = out
                    .embeddings
                    .as_ref()
                    .expect("ufl shards report embeddings");
                for (r, &i) in part.iter().enumerate() {
                    bank.update(i, emb.row(r), cfg.bank_momentum)?;
                }
            }
            global_batch += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: epoch_loss / n as f64,
            lr,
        };
        log::info!("ufl epoch {epoch}: loss {:.5} lr {lr}", entry.mean_loss);
        on_epoch(&entry);
        log.push(entry);
    }
    if let Some(labels) = labels {
        bank = bank.with_labels(labels.to_vec())?;
    }
    Ok(UflOutcome {
        encoder,
        bank,
        log,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        z: (cfg.mode == LossMode::Nce).then_some(nce.z).flatten(),
    })
}

/// Trains encoder and decoder on mean squared reconstruction error.
pub fn train_autoencoder(
    chips: &[Chip],
    encoder: Encoder,
    decoder: Decoder,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Encoder, Decoder, Vec<EpochLog>)> {
    cfg.validate()?;
    if chips.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let side = encoder_side(&encoder)?;
    let (mut encoder, mut decoder) = (encoder, decoder);
    let mut opt = Optimizer::new(cfg, &[encoder.params(), decoder.params()]);
    let n = chips.len();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            cfg.seed,
            &[3, epoch as u64],
        )));
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let shards = make_shards(chips, idx, cfg, side, epoch)?;
            let (enc, dec) = (&encoder, &decoder);
            let sets = [encoder.params(), decoder.params()];
            let mut outs = run_shards(&sets, &shards, |tape, vars, _, part, x| {
                let l = autoencoder_loss(tape, enc, &vars[0], dec, &vars[1], x)?;
                Ok((tape.scalar_mul(l, part.len() as Real), None))
            })?;
            let batch_loss = outs.iter().map(|o| o.loss).sum::<f64>() / idx.len() as f64;
            check_loss(batch_loss, epoch, b)?;
            epoch_loss += batch_loss * idx.len() as f64;
            let grads = sum_grads(&mut outs, 1.0 / idx.len() as Real);
            opt.step(&mut [encoder.params_mut(), decoder.params_mut()], grads, lr)?;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: epoch_loss / n as f64,
            lr,
        };
        log::info!(
            "autoencoder epoch {epoch}: loss {:.5} lr {lr}",
            entry.mean_loss
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((encoder, decoder, log))
}

/// Trains encoder and softmax head on cross-entropy with class-balanced
/// sampling; an epoch is `⌈n / batch_size⌉` sampled batches.
pub fn train_supervised(
    chips: &[Chip],
    labels: &[ClassId],
    encoder: Encoder,
    head: SupervisedHead,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Encoder, SupervisedHead, Vec<EpochLog>)> {
    cfg.validate()?;
    if chips.is_empty() || labels.len() != chips.len() {
        return Err(Error::Invalid(format!(
            "{} chips with {} labels",
            chips.len(),
            labels.len()
        )));
    }
    let side = encoder_side(&encoder)?;
    let mut sampler = ClassBalancedSampler::new(labels, head.num_classes(), mix(cfg.seed, &[6]))?;
    let (mut encoder, mut head) = (encoder, head);
    let mut opt = Optimizer::new(cfg, &[encoder.params(), head.params()]);
    let batches = chips.len().div_ceil(cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr(epoch);
        let mut epoch_loss = 0.0;
        for b in 0..batches {
            let idx = sampler.next_batch(cfg.batch_size);
            let shards = make_shards(chips, &idx, cfg, side, epoch * batches + b)?;
            let enc = &encoder;
            let sets = [encoder.params(), head.params()];
            let mut outs = run_shards(&sets, &shards, |tape, vars, _, part, x| {
                let y: Vec<ClassId> = part.iter().map(|&i| labels[i]).collect();
                let l = supervised_loss(tape, enc, &vars[0], vars[1][0], x, &y)?;
                Ok((tape.scalar_mul(l, part.len() as Real), None))
            })?;
            let batch_loss = outs.iter().map(|o| o.loss).sum::<f64>() / idx.len() as f64;
            check_loss(batch_loss, epoch, b)?;
            epoch_loss += batch_loss;
            let grads = sum_grads(&mut outs, 1.0 / idx.len() as Real);
            opt.step(&mut [encoder.params_mut(), head.params_mut()], grads, lr)?;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: epoch_loss / batches as f64,
            lr,
        };
        log::info!(
            "supervised epoch {epoch}: loss {:.5} lr {lr}",
            entry.mean_loss
        );
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((encoder, head, log))
}
