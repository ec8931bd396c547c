//! Hyperedge-level contrastive objective over two masked views of each table.

use std::sync::Arc;

use hytrel_numerics::{Groups, Matrix, ParamId, ParamStore, Real, Tape, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{map_ordered, reduce_grads, Batch, LossOutput, Objective, ObjectiveSetup, Precision};
use crate::encoder::{Dropout, EncoderParams, TapeState};
use crate::error::{Error, Result};
use crate::hypergraph::{build_hypergraph, mask_connections, Hypergraph};
use crate::rng::{seeded, substream, Rng};
use crate::table_io::Table;

/// Two independently masked copies of `hg`.
pub fn contrastive_views(hg: &Hypergraph, ratio: f64, rng: &mut Rng) -> Result<(Hypergraph, Hypergraph)> {
    let (s1, s2): (u64, u64) = (rng.random(), rng.random());
    Ok((
        mask_connections(hg, ratio, &mut seeded(s1))?,
        mask_connections(hg, ratio, &mut seeded(s2))?,
    ))
}

/// Query `i` pairs with key `i`; every other key is a negative.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub queries: Matrix<f64>,
    pub keys: Matrix<f64>,
    pub temperature: f64,
}

/// Mean over queries of the softmax cross-entropy of `q·k / τ` against the paired key.
pub fn info_nce_on_tape<T: Real>(tape: &mut Tape<T>, queries: Var, keys: Var, temperature: f64) -> Var {
    let kt = tape.transpose(keys);
    let sims = tape.matmul(queries, kt);
    let logits = tape.scale(sims, T::of(1.0 / temperature));
    let targets = (0..tape.shape(queries).0).collect();
    tape.softmax_cross_entropy_mean(logits, targets)
}

fn check_batch(q: (usize, usize), k: (usize, usize), temperature: f64) -> Result<()> {
    if k.0 < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 keys, got {}",
            k.0
        )));
    }
    if q.0 == 0 || q.0 > k.0 || q.1 != k.1 {
        return Err(Error::DimensionMismatch(format!(
            "queries {q:?} do not align with keys {k:?}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    Ok(())
}

pub fn info_nce(batch: &ContrastiveBatch) -> Result<f64> {
    check_batch(batch.queries.shape(), batch.keys.shape(), batch.temperature)?;
    let params = [batch.queries.clone(), batch.keys.clone()];
    let mut tape = Tape::new(&params);
    let loss = info_nce_on_tape(&mut tape, Var::from(ParamId(0)), Var::from(ParamId(1)), batch.temperature);
    Ok(tape.value(loss).item())
}

/// Affine projection applied to table and column representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastiveHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ContrastiveHead {
    pub fn init_or_locate(store: &mut ParamStore, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if let (Some(weight), Some(bias)) = (
            store.index_of("contrastive.weight"),
            store.index_of("contrastive.bias"),
        ) {
            if store.value(weight).shape() != (hidden, hidden) {
                return Err(Error::DimensionMismatch("contrastive head width".into()));
            }
            return Ok(Self { weight, bias });
        }
        let dist = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("finite std");
        let w = Matrix::from_vec(
            hidden,
            hidden,
            (0..hidden * hidden).map(|_| dist.sample(rng)).collect(),
        );
        Ok(Self {
            weight: store.push("contrastive.weight", w, true),
            bias: store.push("contrastive.bias", Matrix::zeros(1, hidden), false),
        })
    }

    /// Rows `[table; column 0; …; column m−1]`, projected (and normalized).
    pub fn project_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        st: TapeState,
        hg: &Hypergraph,
        normalize: bool,
    ) -> Var {
        let picks = std::iter::once(hg.table_edge())
            .chain((0..hg.m()).map(|j| hg.column_edge(j)))
            .map(|e| [e]);
        let rows = tape.gather_mean(st.s, Arc::new(Groups::from_lists(picks)));
        let z = tape.matmul(rows, Var::from(self.weight));
        let z = tape.add_row(z, Var::from(self.bias));
        if normalize {
            tape.l2_normalize_rows(z)
        } else {
            z
        }
    }
}

pub struct ContrastiveObjective {
    pub head: ContrastiveHead,
    pub mask_ratio: f64,
    pub temperature: f64,
    pub normalize: bool,
}

struct View<'v, T: Real> {
    tape: Tape<'v, T>,
    rep: Var,
}

impl ContrastiveObjective {
    pub fn setup(s: ObjectiveSetup) -> Result<Self> {
        Ok(Self {
            head: ContrastiveHead::init_or_locate(s.store, s.model.hidden, s.rng)?,
            mask_ratio: s.settings.mask_ratio,
            temperature: s.settings.temperature,
            normalize: s.settings.normalize,
        })
    }

    fn encode_view<'v, T: Real>(
        &self,
        encoder: &EncoderParams,
        values: &'v [Matrix<T>],
        hg: &Hypergraph,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<View<'v, T>> {
        let mut tape = Tape::new(values);
        let mut dropout = Dropout {
            rate: encoder.config.dropout,
            rng: dropout_rng,
        };
        let st = encoder.forward(&mut tape, hg, &mut dropout)?;
        let rep = self.head.project_on_tape(&mut tape, st, hg, self.normalize);
        Ok(View { tape, rep })
    }

    fn run<T: Real>(&self, batch: &Batch) -> Result<LossOutput> {
        let b = batch.tables.len();
        if b < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive batches need at least 2 tables, got {b}"
            )));
        }
        let values = batch.store.values_as::<T>();
        let views = map_ordered(batch.tables, batch.parallel, |i, t| -> Result<_> {
            let hg = build_hypergraph(t)?;
            let (v1, v2) = contrastive_views(&hg, self.mask_ratio, &mut substream(batch.seed, "views", i as u64))?;
            let mut d1 = substream(batch.seed, "dropout-a", i as u64);
            let mut d2 = substream(batch.seed, "dropout-b", i as u64);
            Ok([
                self.encode_view(batch.encoder, &values, &v1, batch.train.then_some(&mut d1))?,
                self.encode_view(batch.encoder, &values, &v2, batch.train.then_some(&mut d2))?,
            ])
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        // gather per-kind representation matrices for both sides
        let width = batch.encoder.config.hidden;
        let mut sides: [[Vec<T>; 2]; 2] = Default::default(); // [side][kind]
        let mut col_counts = Vec::with_capacity(b);
        for pair in &views {
            for (side, v) in pair.iter().enumerate() {
                let rep = v.tape.value(v.rep);
                sides[side][0].extend_from_slice(rep.row(0));
                sides[side][1].extend_from_slice(&rep.data()[width..]);
            }
            col_counts.push(pair[0].tape.shape(pair[0].rep).0 - 1);
        }
        let total_cols: usize = col_counts.iter().sum();
        let [[q_tab, q_col], [k_tab, k_col]] = sides;
        let consts = [
            Matrix::from_vec(b, width, q_tab),
            Matrix::from_vec(b, width, k_tab),
            Matrix::from_vec(total_cols, width, q_col),
            Matrix::from_vec(total_cols, width, k_col),
        ];
        let mut head_tape = Tape::new(&consts);
        let ids: Vec<Var> = (0..4).map(|i| Var::from(ParamId(i))).collect();
        let mut loss = info_nce_on_tape(&mut head_tape, ids[0], ids[1], self.temperature);
        if total_cols >= 2 {
            let col_loss = info_nce_on_tape(&mut head_tape, ids[2], ids[3], self.temperature);
            let both = head_tape.add(loss, col_loss);
            loss = head_tape.scale(both, T::of(0.5));
        }
        let value = head_tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                table_id: batch.tables.iter().map(|t| t.id.as_str()).collect::<Vec<_>>().join(","),
            });
        }
        let g = head_tape.backward(loss);
        let zero = |r, c| Matrix::<T>::zeros(r, c);
        let grad_of = |v: Var, r, c| g.get(v).cloned().unwrap_or_else(|| zero(r, c));
        let gq_tab = grad_of(ids[0], b, width);
        let gk_tab = grad_of(ids[1], b, width);
        let gq_col = grad_of(ids[2], total_cols, width);
        let gk_col = grad_of(ids[3], total_cols, width);

        let mut parts = Vec::with_capacity(2 * b);
        let mut offset = 0;
        for (i, pair) in views.iter().enumerate() {
            let m = col_counts[i];
            for (side, v) in pair.iter().enumerate() {
                let (gt, gc) = if side == 0 { (&gq_tab, &gq_col) } else { (&gk_tab, &gk_col) };
                let mut seed = Vec::with_capacity((m + 1) * width);
                seed.extend_from_slice(gt.row(i));
                seed.extend_from_slice(&gc.data()[offset * width..(offset + m) * width]);
                let seed = Matrix::from_vec(m + 1, width, seed);
                let grads = v.tape.backward_seeded(&[(v.rep, seed)]).param_grads(&values);
                parts.push(grads.iter().map(|g| g.cast()).collect());
            }
            offset += m;
        }
        Ok(LossOutput {
            loss: value,
            grads: reduce_grads(parts, 1.0),
        })
    }

    /// Normalized, projected table representations of two fresh views per table.
    pub fn table_view_reps(
        &self,
        encoder: &EncoderParams,
        store: &ParamStore,
        tables: &[Table],
        seed: u64,
    ) -> Result<(Matrix<f64>, Matrix<f64>)> {
        let values = store.values_as::<f64>();
        let f = encoder.config.hidden;
        let mut a = Vec::with_capacity(tables.len() * f);
        let mut b = Vec::with_capacity(tables.len() * f);
        for (i, t) in tables.iter().enumerate() {
            let hg = build_hypergraph(t)?;
            let (v1, v2) = contrastive_views(&hg, self.mask_ratio, &mut substream(seed, "eval-views", i as u64))?;
            for (v, out) in [(v1, &mut a), (v2, &mut b)] {
                let view = self.encode_view(encoder, &values, &v, None)?;
                let rep = view.tape.value(view.rep);
                let row = rep.row(0);
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                out.extend(row.iter().map(|x| x / norm));
            }
        }
        Ok((
            Matrix::from_vec(tables.len(), f, a),
            Matrix::from_vec(tables.len(), f, b),
        ))
    }
}

impl Objective for ContrastiveObjective {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn min_batch(&self) -> usize {
        2
    }

    fn batch_loss(&self, batch: &Batch) -> Result<LossOutput> {
        match batch.precision {
            Precision::F32 => self.run::<f32>(batch),
            Precision::F64 => self.run::<f64>(batch),
        }
    }
}

/// Share of held-out tables whose first view retrieves its own second view
/// as the most similar among the `batch_size` tables of its chunk.
pub fn sibling_retrieval(
    objective: &ContrastiveObjective,
    encoder: &EncoderParams,
    store: &ParamStore,
    tables: &[Table],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if batch_size < 2 || tables.len() < 2 {
        return Err(Error::InvalidArgument("retrieval needs at least 2 tables per chunk".into()));
    }
    let (a, b) = objective.table_view_reps(encoder, store, tables, seed)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for start in (0..tables.len()).step_by(batch_size) {
        let end = (start + batch_size).min(tables.len());
        if end - start < 2 {
            continue;
        }
        for i in start..end {
            let best = (start..end)
                .max_by(|&x, &y| {
                    let sx = hytrel_numerics::dot(a.row(i), b.row(x));
                    let sy = hytrel_numerics::dot(a.row(i), b.row(y));
                    sx.total_cmp(&sy).then(y.cmp(&x))
                })
                .expect("non-empty chunk");
            hits += usize::from(best == i);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
