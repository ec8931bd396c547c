//! Corruption detection: replace a share of cells and headers with
//! frequency-sampled values and classify every position.

use std::sync::Arc;

use hytrel_numerics::{Groups, Matrix, ParamId, ParamStore, Real, Tape, Var};
use rand::seq::index;
use rand_distr::{Distribution, Normal};

use super::{map_ordered, reduce_grads, Batch, LossOutput, Objective, ObjectiveSetup, Precision};
use crate::encoder::{Dropout, EncoderParams, GraphState, TapeState};
use crate::error::{Error, Result};
use crate::hypergraph::{build_hypergraph, Hypergraph};
use crate::rng::{substream, Rng};
use crate::table_io::{Table, ValueFrequencies};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Position {
    Cell(usize, usize),
    Header(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub table: Table,
    /// Cells in node order (`i·m + j`), then headers; 1 = replaced.
    pub labels: Vec<u8>,
    pub positions: Vec<Position>,
}

impl CorruptionRecord {
    pub fn flagged(&self) -> usize {
        self.positions.len()
    }
}

/// Replaces `round(rate · (nm + m))` distinct cells/headers, each by a value
/// drawn proportionally to corpus frequency and different from the original.
pub fn corrupt_cells(
    table: &Table,
    rate: f64,
    freq: &ValueFrequencies,
    rng: &mut Rng,
) -> Result<CorruptionRecord> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "corruption rate must be in (0, 1), got {rate}"
        )));
    }
    table.check_shape()?;
    let (n, m) = (table.n(), table.m());
    let total = n * m + m;
    let k = (rate * total as f64).round() as usize;
    let mut picks = index::sample(rng, total, k).into_vec();
    picks.sort_unstable();
    let mut out = table.clone();
    let mut labels = vec![0u8; total];
    let mut positions = Vec::with_capacity(k);
    for p in picks {
        labels[p] = 1;
        let (pos, slot) = if p < n * m {
            let (i, j) = (p / m, p % m);
            (Position::Cell(i, j), &mut out.rows[i][j])
        } else {
            (Position::Header(p - n * m), &mut out.headers[p - n * m])
        };
        *slot = freq.sample_different(slot, rng).to_vec();
        positions.push(pos);
    }
    Ok(CorruptionRecord {
        table: out,
        labels,
        positions,
    })
}

/// Affine scorer shared by cell node rows and column hyperedge rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElectraHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ElectraHead {
    pub fn init_or_locate(store: &mut ParamStore, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if let (Some(weight), Some(bias)) = (store.index_of("electra.weight"), store.index_of("electra.bias")) {
            if store.value(weight).shape() != (hidden, 1) {
                return Err(Error::DimensionMismatch("electra head width".into()));
            }
            return Ok(Self { weight, bias });
        }
        let dist = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("finite std");
        let w = Matrix::from_vec(hidden, 1, (0..hidden).map(|_| dist.sample(rng)).collect());
        Ok(Self {
            weight: store.push("electra.weight", w, true),
            bias: store.push("electra.bias", Matrix::zeros(1, 1), false),
        })
    }

    /// `(nm + m) × 1` logits: cells from node rows, headers from column hyperedge rows.
    pub fn logits_on_tape<T: Real>(&self, tape: &mut Tape<T>, st: TapeState, hg: &Hypergraph) -> Var {
        let cols = Arc::new(Groups::from_lists((0..hg.m()).map(|j| [hg.column_edge(j)])));
        let headers = tape.gather_mean(st.s, cols);
        let rows = tape.vstack(&[st.x, headers]);
        let z = tape.matmul(rows, Var::from(self.weight));
        tape.add_row(z, Var::from(self.bias))
    }

    pub fn loss_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        st: TapeState,
        hg: &Hypergraph,
        labels: &[u8],
    ) -> Result<Var> {
        let expected = hg.node_count() + hg.m();
        if labels.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {expected} positions",
                labels.len()
            )));
        }
        let logits = self.logits_on_tape(tape, st, hg);
        let targets = Matrix::from_vec(expected, 1, labels.iter().map(|&l| T::of(l as f64)).collect());
        Ok(tape.bce_with_logits_mean(logits, targets))
    }
}

/// Mean BCE of the head over an already encoded corrupted table.
pub fn electra_loss(
    state: &GraphState,
    record: &CorruptionRecord,
    head: &ElectraHead,
    store: &ParamStore,
) -> Result<f64> {
    let hg = build_hypergraph(&record.table)?;
    if state.x.rows() != hg.node_count() || state.s.rows() != hg.edge_count() {
        return Err(Error::DimensionMismatch("state does not match the corrupted table".into()));
    }
    let values = store.values_as::<f64>();
    let mut tape = Tape::new(&values);
    let x = tape.constant(state.x.clone());
    let s = tape.constant(state.s.clone());
    let loss = head.loss_on_tape(&mut tape, TapeState { x, s }, &hg, &record.labels)?;
    Ok(tape.value(loss).item())
}

pub struct ElectraObjective {
    pub head: ElectraHead,
    pub rate: f64,
    pub freq: Arc<ValueFrequencies>,
}

impl ElectraObjective {
    pub fn setup(s: ObjectiveSetup) -> Result<Self> {
        let freq = ValueFrequencies::from_tables(s.corpus)?;
        Ok(Self {
            head: ElectraHead::init_or_locate(s.store, s.model.hidden, s.rng)?,
            rate: s.settings.corruption_rate,
            freq: Arc::new(freq),
        })
    }

    fn table_loss<T: Real>(
        &self,
        encoder: &EncoderParams,
        values: &[Matrix<T>],
        table: &Table,
        rng: &mut Rng,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, Vec<Matrix<f64>>)> {
        let rec = corrupt_cells(table, self.rate, &self.freq, rng)?;
        let hg = build_hypergraph(&rec.table)?;
        let mut tape = Tape::new(values);
        let mut dropout = Dropout {
            rate: encoder.config.dropout,
            rng: dropout_rng,
        };
        let st = encoder.forward(&mut tape, &hg, &mut dropout)?;
        let loss = self.head.loss_on_tape(&mut tape, st, &hg, &rec.labels)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                table_id: table.id.clone(),
            });
        }
        let grads = tape.backward(loss).param_grads(values);
        Ok((value, grads.iter().map(|g| g.cast()).collect()))
    }

    fn run<T: Real>(&self, batch: &Batch) -> Result<LossOutput> {
        if batch.tables.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let values = batch.store.values_as::<T>();
        let results = map_ordered(batch.tables, batch.parallel, |i, t| {
            let mut rng = substream(batch.seed, "corrupt", i as u64);
            let mut drop_rng = substream(batch.seed, "dropout", i as u64);
            self.table_loss(batch.encoder, &values, t, &mut rng, batch.train.then_some(&mut drop_rng))
        });
        let mut loss = 0.0;
        let mut parts = Vec::with_capacity(results.len());
        for r in results {
            let (l, g) = r?;
            loss += l;
            parts.push(g);
        }
        let scale = 1.0 / batch.tables.len() as f64;
        Ok(LossOutput {
            loss: loss * scale,
            grads: reduce_grads(parts, scale),
        })
    }

    /// Head scores and labels for every position of each table, corrupted
    /// with substreams of `seed`.
    pub fn scored_positions(
        &self,
        encoder: &EncoderParams,
        store: &ParamStore,
        tables: &[Table],
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<u8>)> {
        let values = store.values_as::<f64>();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, t) in tables.iter().enumerate() {
            let rec = corrupt_cells(t, self.rate, &self.freq, &mut substream(seed, "eval-corrupt", i as u64))?;
            let hg = build_hypergraph(&rec.table)?;
            let mut tape = Tape::new(&values);
            let st = encoder.forward(&mut tape, &hg, &mut Dropout::off())?;
            let z = self.head.logits_on_tape(&mut tape, st, &hg);
            scores.extend_from_slice(tape.value(z).data());
            labels.extend_from_slice(&rec.labels);
        }
        Ok((scores, labels))
    }
}

impl Objective for ElectraObjective {
    fn name(&self) -> &'static str {
        "electra"
    }

    fn batch_loss(&self, batch: &Batch) -> Result<LossOutput> {
        match batch.precision {
            Precision::F32 => self.run::<f32>(batch),
            Precision::F64 => self.run::<f64>(batch),
        }
    }
}

/// Area under the ROC curve; tied scores count one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch("scores and labels differ in length".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    // average ranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let pos = pos as f64;
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg as f64))
}

/// Held-out corruption-detection AUC.
pub fn corruption_auc(
    objective: &ElectraObjective,
    encoder: &EncoderParams,
    store: &ParamStore,
    tables: &[Table],
    seed: u64,
) -> Result<f64> {
    let (scores, labels) = objective.scored_positions(encoder, store, tables, seed)?;
    roc_auc(&scores, &labels)
}
