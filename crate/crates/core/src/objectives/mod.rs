//! Pretraining objectives behind a common trait, selected by name.

mod contrastive;
mod electra;

use std::collections::BTreeMap;

use hytrel_numerics::{Matrix, ParamStore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::table_io::Table;

pub use contrastive::{
    contrastive_views, info_nce, info_nce_on_tape, sibling_retrieval, ContrastiveBatch,
    ContrastiveHead, ContrastiveObjective,
};
pub use electra::{
    corrupt_cells, corruption_auc, electra_loss, roc_auc, CorruptionRecord, ElectraHead,
    ElectraObjective, Position,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSettings {
    /// Share of cells and headers replaced for corruption detection.
    pub corruption_rate: f64,
    /// Share of incidences dropped from each contrastive view.
    pub mask_ratio: f64,
    pub temperature: f64,
    /// L2-normalize representations before contrastive dot products.
    pub normalize: bool,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            corruption_rate: 0.15,
            mask_ratio: 0.3,
            temperature: 0.007,
            normalize: true,
        }
    }
}

impl ObjectiveSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.corruption_rate > 0.0 && self.corruption_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "corruption rate must be in (0, 1), got {}",
                self.corruption_rate
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidArgument(format!(
                "mask ratio must be in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One optimizer step's worth of work.
pub struct Batch<'a> {
    pub encoder: &'a EncoderParams,
    pub store: &'a ParamStore,
    pub tables: &'a [&'a Table],
    /// Per-step seed; objectives derive per-table substreams from it.
    pub seed: u64,
    pub precision: Precision,
    pub parallel: bool,
    /// Enables dropout.
    pub train: bool,
}

/// Mean loss and its gradient for every parameter, in store order.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<Matrix<f64>>,
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Smallest batch the loss is defined for.
    fn min_batch(&self) -> usize {
        1
    }

    fn batch_loss(&self, batch: &Batch) -> Result<LossOutput>;
}

/// Everything a factory may need: it adds (or finds) head parameters in `store`.
pub struct ObjectiveSetup<'a> {
    pub model: &'a ModelConfig,
    pub settings: &'a ObjectiveSettings,
    pub corpus: &'a [Table],
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

pub type ObjectiveFactory = fn(ObjectiveSetup) -> Result<Box<dyn Objective>>;

pub struct ObjectiveRegistry {
    factories: BTreeMap<&'static str, ObjectiveFactory>,
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("electra", |s| Ok(Box::new(ElectraObjective::setup(s)?)));
        r.register("contrastive", |s| Ok(Box::new(ContrastiveObjective::setup(s)?)));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: ObjectiveFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str, setup: ObjectiveSetup) -> Result<Box<dyn Objective>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::Unknown {
            kind: "objective",
            name: name.to_string(),
            known: self.names().join(", "),
        })?;
        setup.settings.validate()?;
        factory(setup)
    }
}

/// Applies `f` to every item, in parallel when asked, keeping input order.
pub(crate) fn map_ordered<I, O, F>(items: &[I], parallel: bool, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    if parallel {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Sums gradient lists in order, then scales.
pub(crate) fn reduce_grads(parts: Vec<Vec<Matrix<f64>>>, scale: f64) -> Vec<Matrix<f64>> {
    let mut iter = parts.into_iter();
    let mut total = iter.next().expect("at least one gradient list");
    for part in iter {
        for (t, p) in total.iter_mut().zip(&part) {
            t.add_assign(p);
        }
    }
    if scale != 1.0 {
        for t in &mut total {
            t.scale(scale);
        }
    }
    total
}
