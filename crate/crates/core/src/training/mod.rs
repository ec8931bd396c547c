//! Optimizer, schedule, batching and the pretraining loop.

mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;

use hytrel_numerics::{Matrix, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::objectives::{Batch, Objective, ObjectiveRegistry, ObjectiveSettings, ObjectiveSetup, Precision};
use crate::rng::{substream, Rng};
use crate::table_io::{Table, Vocabulary};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState,
    CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: String,
    pub batch_size: usize,
    /// Defaults per objective when absent: 1e-3 corruption detection, 3e-4 contrastive.
    pub learning_rate: Option<f64>,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Stops after this many steps instead of after `epochs`.
    pub max_steps: Option<u64>,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: "electra".into(),
            batch_size: 32,
            learning_rate: None,
            warmup_ratio: 0.05,
            epochs: 5,
            max_steps: None,
            weight_decay: 0.02,
            clip_norm: 1.0,
            seed: 0,
            precision: Precision::F64,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.objective.as_str() {
            "contrastive" => 3e-4,
            _ => 1e-3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr() >= 0.0 && self.lr().is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.lr()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warm-up ratio must be in [0, 1), got {}", self.warmup_ratio));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("weight decay must be non-negative and clip norm positive".into());
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<Matrix<f64>>,
    pub v: Vec<Matrix<f64>>,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Adam with bias correction and decoupled weight decay on `decay` entries.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Matrix<f64>], lr: f64, weight_decay: f64) {
        self.apply_masked(store, grads, lr, weight_decay, None);
    }

    /// As [`OptState::apply`], leaving entries whose mask is false untouched.
    pub fn apply_masked(
        &mut self,
        store: &mut ParamStore,
        grads: &[Matrix<f64>],
        lr: f64,
        weight_decay: f64,
        trainable: Option<&[bool]>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (k, g) in grads.iter().enumerate() {
            if trainable.is_some_and(|t| !t[k]) {
                continue;
            }
            let decay = store.entries()[k].decay;
            let theta = store.value_mut(hytrel_numerics::ParamId(k)).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (idx, &gi) in g.data().iter().enumerate() {
                m[idx] = BETA1 * m[idx] + (1.0 - BETA1) * gi;
                v[idx] = BETA2 * v[idx] + (1.0 - BETA2) * gi * gi;
                let update = (m[idx] / c1) / ((v[idx] / c2).sqrt() + ADAM_EPS);
                let wd = if decay { weight_decay * theta[idx] } else { 0.0 };
                theta[idx] -= lr * (update + wd);
            }
        }
    }
}

/// Linear warm-up over the first `ceil(ratio · total)` steps, then constant.
pub fn learning_rate_at(base: f64, warmup_ratio: f64, total_steps: u64, step: u64) -> f64 {
    let warm = (warmup_ratio * total_steps as f64).ceil() as u64;
    if step < warm {
        base * (step + 1) as f64 / warm as f64
    } else {
        base
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [Matrix<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Forward, backward, clip and one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    objective: &dyn Objective,
    encoder: &EncoderParams,
    store: &mut ParamStore,
    opt: &mut OptState,
    tables: &[&Table],
    cfg: &TrainConfig,
    lr: f64,
    step_seed: u64,
) -> Result<StepOutcome> {
    if !store.all_finite() {
        return Err(Error::Contract("parameters are not finite".into()));
    }
    let out = objective.batch_loss(&Batch {
        encoder,
        store,
        tables,
        seed: step_seed,
        precision: cfg.precision,
        parallel: cfg.workers > 1,
        train: true,
    })?;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            table_id: tables.iter().map(|t| t.id.as_str()).collect::<Vec<_>>().join(","),
        });
    }
    let mut grads = out.grads;
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    opt.apply(store, &grads, lr, cfg.weight_decay);
    Ok(StepOutcome {
        loss: out.loss,
        lr,
        grad_norm,
    })
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,epoch,loss,lr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.epoch, r.loss, r.lr);
    }
    out
}

/// Resumable pretraining state.
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub settings: ObjectiveSettings,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub opt: OptState,
    pub objective: Box<dyn Objective>,
    rng: Rng,
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
}

impl Trainer {
    pub fn new(
        registry: &ObjectiveRegistry,
        mut model: ModelConfig,
        train: TrainConfig,
        settings: ObjectiveSettings,
        vocab: Vocabulary,
        corpus: &[Table],
    ) -> Result<Self> {
        train.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        model.vocab_size = vocab.len();
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&model, &mut store, &mut substream(train.seed, "encoder-init", 0))?;
        let objective = registry.create(
            &train.objective,
            ObjectiveSetup {
                model: &model,
                settings: &settings,
                corpus,
                store: &mut store,
                rng: &mut substream(train.seed, "head-init", 0),
            },
        )?;
        let opt = OptState::new(&store);
        let rng = Rng::seed_from_u64(train.seed);
        Ok(Self {
            model,
            train,
            settings,
            vocab,
            store,
            encoder,
            opt,
            objective,
            rng,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }

    pub fn from_checkpoint(registry: &ObjectiveRegistry, ckpt: Checkpoint, corpus: &[Table]) -> Result<Self> {
        ckpt.train.validate()?;
        let vocab = Vocabulary::from_records(ckpt.vocab)?;
        let mut store = ckpt.params;
        let encoder = EncoderParams::locate(&ckpt.model, &store)?;
        let before = store.len();
        let objective = registry.create(
            &ckpt.train.objective,
            ObjectiveSetup {
                model: &ckpt.model,
                settings: &ckpt.objective,
                corpus,
                store: &mut store,
                rng: &mut substream(ckpt.train.seed, "head-init", 0),
            },
        )?;
        if store.len() != before || ckpt.opt.m.len() != before {
            return Err(Error::Contract(
                "checkpoint parameters do not match the objective head".into(),
            ));
        }
        Ok(Self {
            model: ckpt.model,
            train: ckpt.train,
            settings: ckpt.objective,
            vocab,
            store,
            encoder,
            opt: ckpt.opt,
            objective,
            rng: ckpt.rng.restore(),
            step: ckpt.step,
            epoch: ckpt.epoch,
            batch_in_epoch: ckpt.batch_in_epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            objective: self.settings.clone(),
            vocab: self.vocab.records(),
            params: self.store.clone(),
            opt: self.opt.clone(),
            rng: RngState::capture(&self.rng, self.train.seed),
            step: self.step,
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
        }
    }

    /// Batches per epoch; a trailing batch smaller than the objective allows is dropped.
    pub fn batches_per_epoch(&self, corpus_len: usize) -> u64 {
        let b = self.train.batch_size;
        let full = corpus_len / b;
        let rest = corpus_len % b;
        (full + usize::from(rest > 0 && rest >= self.objective.min_batch())) as u64
    }

    pub fn total_steps(&self, corpus_len: usize) -> u64 {
        self.train
            .max_steps
            .unwrap_or(self.train.epochs as u64 * self.batches_per_epoch(corpus_len))
    }

    fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(self.train.seed, "epoch-order", epoch));
        order
    }

    /// Runs one step; `None` once the configured number of steps is done.
    pub fn next_step(&mut self, corpus: &[Table]) -> Result<Option<LogRow>> {
        let total = self.total_steps(corpus.len());
        let per_epoch = self.batches_per_epoch(corpus.len());
        if self.step >= total || per_epoch == 0 {
            return Ok(None);
        }
        let order = self.epoch_order(self.epoch, corpus.len());
        let b = self.train.batch_size;
        let start = self.batch_in_epoch as usize * b;
        let end = (start + b).min(corpus.len());
        let batch: Vec<&Table> = order[start..end].iter().map(|&i| &corpus[i]).collect();
        let lr = learning_rate_at(self.train.lr(), self.train.warmup_ratio, total, self.step);
        let step_seed: u64 = self.rng.random();
        let outcome = train_step(
            self.objective.as_ref(),
            &self.encoder,
            &mut self.store,
            &mut self.opt,
            &batch,
            &self.train,
            lr,
            step_seed,
        )?;
        let row = LogRow {
            step: self.step,
            epoch: self.epoch,
            loss: outcome.loss,
            lr,
        };
        self.step += 1;
        self.batch_in_epoch += 1;
        if self.batch_in_epoch == per_epoch {
            self.batch_in_epoch = 0;
            self.epoch += 1;
        }
        Ok(Some(row))
    }

    /// Trains to completion. With `out_dir`, writes a checkpoint after every
    /// epoch, a final `checkpoint.hytb` and `loss_log.csv`.
    pub fn run(
        &mut self,
        corpus: &[Table],
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&LogRow),
    ) -> Result<Vec<LogRow>> {
        let mut log = Vec::new();
        while let Some(row) = self.next_step(corpus)? {
            on_step(&row);
            log.push(row);
            if let Some(dir) = out_dir {
                if self.batch_in_epoch == 0 {
                    let path = dir.join(format!("checkpoint-epoch{}.hytb", self.epoch));
                    save_checkpoint(&path, &self.checkpoint())?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join("checkpoint.hytb"), &self.checkpoint())?;
            let path = dir.join("loss_log.csv");
            std::fs::write(&path, loss_log_csv(&log)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(log)
    }
}

/// Builds a trainer with the built-in objectives and runs it to completion.
pub fn pretrain(
    corpus: &[Table],
    vocab: Vocabulary,
    model: ModelConfig,
    train: TrainConfig,
    settings: ObjectiveSettings,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<LogRow>)> {
    let mut trainer = Trainer::new(&ObjectiveRegistry::with_builtins(), model, train, settings, vocab, corpus)?;
    let log = trainer.run(corpus, out_dir, |_| {})?;
    Ok((trainer.checkpoint(), log))
}

/// Mean of the last `window` losses.
pub fn moving_average_tail(log: &[LogRow], window: usize) -> f64 {
    let tail = &log[log.len().saturating_sub(window)..];
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
}
