//! Downstream tasks: column types, column-pair relations, table types and
//! table-pair similarity.

mod heads;
mod metrics;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hytrel_numerics::{Matrix, ParamStore};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{Dropout, EncoderParams};
use crate::error::{Error, Result};
use crate::hypergraph::{apply_permutation, PermutationAction};
use crate::objectives::{map_ordered, reduce_grads, Precision};
use crate::rng::{substream, Rng};
use crate::table_io::{write_jsonl, Table};
use crate::training::{clip_global_norm, learning_rate_at, LogRow, OptState};

pub use heads::{CpaHead, CtaHead, TspHead, TtdHead, HEAD_PREFIX};
pub use metrics::{evaluate, Metrics};
pub use synth::{synth_corpus, synth_dataset, value_of, SynthDataset, ValueType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Cta,
    Cpa,
    Ttd,
    Tsp,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Cta, TaskKind::Cpa, TaskKind::Ttd, TaskKind::Tsp];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Cta => "cta",
            TaskKind::Cpa => "cpa",
            TaskKind::Ttd => "ttd",
            TaskKind::Tsp => "tsp",
        }
    }

    /// Multi-label tasks are thresholded; TTD takes the argmax.
    pub fn is_multi_label(self) -> bool {
        self != TaskKind::Ttd
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "task",
                name: s.to_string(),
                known: "cta, cpa, ttd, tsp".into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairTarget {
    pub left: usize,
    pub right: usize,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityTarget {
    /// Id of the second table of the pair.
    pub other: String,
    pub similar: bool,
}

/// Gold (or predicted) labels of one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Targets {
    /// Label set per column.
    Columns(Vec<Vec<usize>>),
    Pairs(Vec<PairTarget>),
    Class(usize),
    Similarity(SimilarityTarget),
}

impl Targets {
    pub fn kind(&self) -> TaskKind {
        match self {
            Targets::Columns(_) => TaskKind::Cta,
            Targets::Pairs(_) => TaskKind::Cpa,
            Targets::Class(_) => TaskKind::Ttd,
            Targets::Similarity(_) => TaskKind::Tsp,
        }
    }

    pub fn from_json(kind: TaskKind, value: serde_json::Value) -> Result<Self> {
        Ok(match kind {
            TaskKind::Cta => Targets::Columns(serde_json::from_value(value)?),
            TaskKind::Cpa => Targets::Pairs(serde_json::from_value(value)?),
            TaskKind::Ttd => Targets::Class(serde_json::from_value(value)?),
            TaskKind::Tsp => Targets::Similarity(serde_json::from_value(value)?),
        })
    }
}

/// One line of the labels sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelRecord {
    pub table_id: String,
    pub task: TaskKind,
    pub targets: Targets,
}

impl<'de> Deserialize<'de> for LabelRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            table_id: String,
            task: TaskKind,
            targets: serde_json::Value,
        }
        let raw = Raw::deserialize(d)?;
        let targets = Targets::from_json(raw.task, raw.targets).map_err(serde::de::Error::custom)?;
        Ok(LabelRecord {
            table_id: raw.table_id,
            task: raw.task,
            targets,
        })
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::BadRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[LabelRecord]) -> Result<()> {
    write_jsonl(path, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub table: Table,
    pub targets: Targets,
    /// Second table of a similarity pair.
    pub other: Option<Table>,
}

impl TaskExample {
    pub fn kind(&self) -> TaskKind {
        self.targets.kind()
    }

    /// Checks label indices against `num_labels` and pairs against the table.
    pub fn validate(&self, num_labels: usize) -> Result<()> {
        let bad = |reason: String| {
            Err(Error::MalformedTable {
                id: self.table.id.clone(),
                reason,
            })
        };
        let labels_ok = |ls: &[usize]| ls.iter().all(|&l| l < num_labels);
        let m = self.table.m();
        match &self.targets {
            Targets::Columns(cols) => {
                if cols.len() != m {
                    return bad(format!("{} column targets for {m} columns", cols.len()));
                }
                if !cols.iter().all(|c| labels_ok(c)) {
                    return bad(format!("column label outside 0..{num_labels}"));
                }
            }
            Targets::Pairs(pairs) => {
                for p in pairs {
                    validate_pair(p.left, p.right, m).or_else(|e| bad(e.to_string()))?;
                    if !labels_ok(&p.labels) {
                        return bad(format!("pair label outside 0..{num_labels}"));
                    }
                }
            }
            Targets::Class(c) => {
                if *c >= num_labels {
                    return bad(format!("class {c} outside 0..{num_labels}"));
                }
            }
            Targets::Similarity(s) => match &self.other {
                Some(o) if o.id == s.other => {}
                _ => return bad(format!("second table {} missing", s.other)),
            },
        }
        Ok(())
    }

    /// The same example after permuting its table(s); column indices in the
    /// targets follow the columns.
    pub fn permuted(&self, action: &PermutationAction, other: Option<&PermutationAction>) -> Result<Self> {
        let table = apply_permutation(&self.table, action)?;
        let inv = action.inverse();
        let targets = match &self.targets {
            Targets::Columns(cols) => {
                Targets::Columns(action.sigma_col.iter().map(|&j| cols[j].clone()).collect())
            }
            Targets::Pairs(pairs) => Targets::Pairs(
                pairs
                    .iter()
                    .map(|p| PairTarget {
                        left: inv.sigma_col[p.left],
                        right: inv.sigma_col[p.right],
                        labels: p.labels.clone(),
                    })
                    .collect(),
            ),
            t => t.clone(),
        };
        let other = match (&self.other, other) {
            (Some(o), Some(a)) => Some(apply_permutation(o, a)?),
            (o, _) => o.clone(),
        };
        Ok(Self { table, targets, other })
    }
}

pub(crate) fn validate_pair(left: usize, right: usize, m: usize) -> Result<()> {
    if left == right {
        return Err(Error::InvalidArgument(format!("column pair ({left}, {right}) repeats a column")));
    }
    if left >= m || right >= m {
        return Err(Error::InvalidArgument(format!(
            "column pair ({left}, {right}) outside a {m}-column table"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub num_labels: usize,
    pub examples: Vec<TaskExample>,
}

impl TaskDataset {
    /// Joins label records of `kind` with parsed tables by id. Label count
    /// defaults to one past the largest index seen.
    pub fn assemble(
        kind: TaskKind,
        tables: &[Table],
        labels: &[LabelRecord],
        num_labels: Option<usize>,
    ) -> Result<Self> {
        let by_id: HashMap<&str, &Table> = tables.iter().map(|t| (t.id.as_str(), t)).collect();
        let find = |id: &str| {
            by_id.get(id).map(|t| (*t).clone()).ok_or_else(|| Error::MalformedTable {
                id: id.to_string(),
                reason: "labelled table not in the corpus".into(),
            })
        };
        let mut examples = Vec::new();
        for rec in labels.iter().filter(|r| r.task == kind) {
            let other = match &rec.targets {
                Targets::Similarity(s) => Some(find(&s.other)?),
                _ => None,
            };
            examples.push(TaskExample {
                table: find(&rec.table_id)?,
                targets: rec.targets.clone(),
                other,
            });
        }
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let seen = examples.iter().map(|e| max_label(&e.targets)).max().unwrap_or(0);
        let num_labels = num_labels.unwrap_or(seen + 1);
        for e in &examples {
            e.validate(num_labels)?;
        }
        Ok(Self {
            kind,
            num_labels,
            examples,
        })
    }

    /// Deterministic split: the first `ratio` share of a seeded shuffle trains.
    pub fn split(&self, ratio: f64, seed: u64) -> (TaskDataset, TaskDataset) {
        let mut idx: Vec<usize> = (0..self.examples.len()).collect();
        idx.shuffle(&mut substream(seed, "split", 0));
        let cut = ((self.examples.len() as f64) * ratio).round() as usize;
        let take = |ids: &[usize]| TaskDataset {
            kind: self.kind,
            num_labels: self.num_labels,
            examples: ids.iter().map(|&i| self.examples[i].clone()).collect(),
        };
        (take(&idx[..cut]), take(&idx[cut..]))
    }
}

fn max_label(t: &Targets) -> usize {
    match t {
        Targets::Columns(c) => c.iter().flatten().copied().max().unwrap_or(0),
        Targets::Pairs(p) => p.iter().flat_map(|p| &p.labels).copied().max().unwrap_or(0),
        Targets::Class(c) => *c,
        Targets::Similarity(_) => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSettings {
    /// Multi-label decision threshold on probabilities.
    pub threshold: f64,
    /// Average the pair features over both orders so the similarity logit is symmetric.
    pub symmetrize: bool,
    /// Add elementwise product and absolute difference of the two tables' features.
    pub pair_interactions: bool,
}

impl Default for TaskSettings {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            symmetrize: true,
            pair_interactions: true,
        }
    }
}

/// Per-example forward, loss and scores; implementations add head
/// parameters to the shared store.
pub trait Task: Send + Sync {
    fn kind(&self) -> TaskKind;

    fn num_labels(&self) -> usize;

    /// Mean loss of one example and its gradient for every parameter.
    fn example_loss(
        &self,
        encoder: &EncoderParams,
        values: &[Matrix<f64>],
        example: &TaskExample,
        dropout: &mut Dropout,
    ) -> Result<(f64, Vec<Matrix<f64>>)>;

    /// Raw logits: one row per column, pair or (for TTD/TSP) per example.
    fn logits(
        &self,
        encoder: &EncoderParams,
        store: &ParamStore,
        example: &TaskExample,
        precision: Precision,
    ) -> Result<Matrix<f64>>;

    /// Probabilities: sigmoid for multi-label tasks, softmax for TTD.
    fn scores(
        &self,
        encoder: &EncoderParams,
        store: &ParamStore,
        example: &TaskExample,
        precision: Precision,
    ) -> Result<Matrix<f64>> {
        let z = self.logits(encoder, store, example, precision)?;
        Ok(activate(self.kind(), &z))
    }
}

pub fn activate(kind: TaskKind, logits: &Matrix<f64>) -> Matrix<f64> {
    let mut out = logits.clone();
    if kind.is_multi_label() {
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
    } else {
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - max).exp() / sum;
            }
        }
    }
    out
}

/// Turns scores into predicted targets shaped like `gold`.
pub fn decide(scores: &Matrix<f64>, gold: &Targets, threshold: f64) -> Targets {
    let above = |r: usize| -> Vec<usize> {
        scores
            .row(r)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(l, _)| l)
            .collect()
    };
    match gold {
        Targets::Columns(_) => Targets::Columns((0..scores.rows()).map(above).collect()),
        Targets::Pairs(pairs) => Targets::Pairs(
            pairs
                .iter()
                .enumerate()
                .map(|(r, p)| PairTarget {
                    left: p.left,
                    right: p.right,
                    labels: above(r),
                })
                .collect(),
        ),
        Targets::Class(_) => {
            let row = scores.row(0);
            let best = (0..row.len()).fold(0, |b, l| if row[l] > row[b] { l } else { b });
            Targets::Class(best)
        }
        Targets::Similarity(s) => Targets::Similarity(SimilarityTarget {
            other: s.other.clone(),
            similar: scores.item() >= threshold,
        }),
    }
}

/// Everything a task factory needs.
pub struct TaskSetup<'a> {
    pub hidden: usize,
    pub num_labels: usize,
    pub settings: &'a TaskSettings,
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

pub type TaskFactory = fn(TaskSetup) -> Result<Box<dyn Task>>;

pub struct TaskRegistry {
    factories: BTreeMap<TaskKind, TaskFactory>,
}

impl TaskRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(TaskKind::Cta, |s| Ok(Box::new(CtaHead::setup(s)?)));
        r.register(TaskKind::Cpa, |s| Ok(Box::new(CpaHead::setup(s)?)));
        r.register(TaskKind::Ttd, |s| Ok(Box::new(TtdHead::setup(s)?)));
        r.register(TaskKind::Tsp, |s| Ok(Box::new(TspHead::setup(s)?)));
        r
    }

    pub fn register(&mut self, kind: TaskKind, factory: TaskFactory) {
        self.factories.insert(kind, factory);
    }

    pub fn kinds(&self) -> Vec<TaskKind> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, kind: TaskKind, setup: TaskSetup) -> Result<Box<dyn Task>> {
        let factory = self.factories.get(&kind).ok_or_else(|| Error::Unknown {
            kind: "task",
            name: kind.to_string(),
            known: self.kinds().iter().map(|k| k.name()).collect::<Vec<_>>().join(", "),
        })?;
        if setup.num_labels == 0 {
            return Err(Error::InvalidArgument("a task needs at least one label".into()));
        }
        factory(setup)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub workers: usize,
    /// Train only the head.
    pub freeze_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.02,
            clip_norm: 1.0,
            seed: 0,
            workers: 1,
            freeze_encoder: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.warmup_ratio) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("bad learning rate, warm-up ratio or clip norm".into()));
        }
        Ok(())
    }
}

/// Mean loss and gradient over a batch of examples.
pub fn task_batch_loss(
    task: &dyn Task,
    encoder: &EncoderParams,
    store: &ParamStore,
    batch: &[&TaskExample],
    seed: u64,
    parallel: bool,
) -> Result<(f64, Vec<Matrix<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let values = store.values_as::<f64>();
    let parts = map_ordered(batch, parallel, |i, ex| {
        let mut rng = substream(seed, "dropout", i as u64);
        let mut dropout = Dropout {
            rate: encoder.config.dropout,
            rng: Some(&mut rng),
        };
        task.example_loss(encoder, &values, ex, &mut dropout)
    });
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for (p, ex) in parts.into_iter().zip(batch) {
        let (l, g) = p?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                table_id: ex.table.id.clone(),
            });
        }
        loss += l;
        grads.push(g);
    }
    let scale = 1.0 / batch.len() as f64;
    Ok((loss * scale, reduce_grads(grads, scale)))
}

/// Trains encoder and head on `train`; returns the per-step log.
pub fn finetune(
    task: &dyn Task,
    encoder: &EncoderParams,
    store: &mut ParamStore,
    train: &[TaskExample],
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let trainable: Option<Vec<bool>> = cfg
        .freeze_encoder
        .then(|| store.names().map(|n| n.starts_with(HEAD_PREFIX)).collect());
    let mut opt = OptState::new(store);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as u64;
    let mut log = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(cfg.seed, "finetune-order", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TaskExample> = chunk.iter().map(|&i| &train[i]).collect();
            let seed = crate::rng::derive_seed(cfg.seed, "finetune-step", step);
            let (loss, mut grads) = task_batch_loss(task, encoder, store, &batch, seed, cfg.workers > 1)?;
            if let Some(t) = &trainable {
                for (g, &keep) in grads.iter_mut().zip(t) {
                    if !keep {
                        g.scale(0.0);
                    }
                }
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = learning_rate_at(cfg.learning_rate, cfg.warmup_ratio, total, step);
            opt.apply_masked(store, &grads, lr, cfg.weight_decay, trainable.as_deref());
            log.push(LogRow {
                step,
                epoch: epoch as u64,
                loss,
                lr,
            });
            step += 1;
        }
        on_epoch(epoch, store)?;
    }
    Ok(log)
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub table_id: String,
    pub task: TaskKind,
    pub scores: Vec<Vec<f64>>,
}

pub fn predict(
    task: &dyn Task,
    encoder: &EncoderParams,
    store: &ParamStore,
    examples: &[TaskExample],
    precision: Precision,
    parallel: bool,
) -> Result<Vec<Prediction>> {
    map_ordered(examples, parallel, |_, ex| {
        let s = task.scores(encoder, store, ex, precision)?;
        Ok(Prediction {
            table_id: ex.table.id.clone(),
            task: task.kind(),
            scores: (0..s.rows()).map(|r| s.row(r).to_vec()).collect(),
        })
    })
    .into_iter()
    .collect()
}

/// Thresholds predictions against the gold examples and scores them.
pub fn evaluate_predictions(
    predictions: &[Prediction],
    examples: &[TaskExample],
    threshold: f64,
) -> Result<Metrics> {
    if predictions.len() != examples.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let kind = examples.first().map(TaskExample::kind).ok_or(Error::EmptyCorpus)?;
    let decided: Vec<Targets> = predictions
        .iter()
        .zip(examples)
        .map(|(p, e)| decide(&Matrix::from_rows(&p.scores), &e.targets, threshold))
        .collect();
    let gold: Vec<Targets> = examples.iter().map(|e| e.targets.clone()).collect();
    evaluate(&decided, &gold, kind)
}
