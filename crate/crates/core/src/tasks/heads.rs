//! Affine task heads over final-layer hyperedge rows.

use std::sync::Arc;

use hytrel_numerics::{Groups, Matrix, ParamId, ParamStore, Real, Tape, Var};
use rand_distr::{Distribution, Normal};

use super::{validate_pair, Targets, Task, TaskExample, TaskKind, TaskSetup};
use crate::encoder::{Dropout, EncoderParams, TapeState};
use crate::error::{Error, Result};
use crate::hypergraph::{build_hypergraph, Hypergraph};
use crate::objectives::Precision;

/// Name prefix of every task-head parameter.
pub const HEAD_PREFIX: &str = "task.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

impl Affine {
    fn init_or_locate(s: &mut TaskSetup, kind: TaskKind, fan_in: usize) -> Result<Self> {
        let (wn, bn) = (format!("{HEAD_PREFIX}{kind}.weight"), format!("{HEAD_PREFIX}{kind}.bias"));
        if let (Some(weight), Some(bias)) = (s.store.index_of(&wn), s.store.index_of(&bn)) {
            if s.store.value(weight).shape() != (fan_in, s.num_labels) {
                return Err(Error::DimensionMismatch(format!(
                    "{wn} is {:?}, expected ({fan_in}, {})",
                    s.store.value(weight).shape(),
                    s.num_labels
                )));
            }
            return Ok(Self { weight, bias });
        }
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
        let w = (0..fan_in * s.num_labels).map(|_| dist.sample(s.rng)).collect();
        Ok(Self {
            weight: s.store.push(wn, Matrix::from_vec(fan_in, s.num_labels, w), true),
            bias: s.store.push(bn, Matrix::zeros(1, s.num_labels), false),
        })
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let z = tape.matmul(x, Var::from(self.weight));
        tape.add_row(z, Var::from(self.bias))
    }
}

fn singletons(ids: impl IntoIterator<Item = usize>) -> Arc<Groups> {
    Arc::new(Groups::from_lists(ids.into_iter().map(|e| [e])))
}

fn columns<T: Real>(tape: &mut Tape<T>, st: TapeState, hg: &Hypergraph) -> Var {
    tape.gather_mean(st.s, singletons((0..hg.m()).map(|j| hg.column_edge(j))))
}

fn table_row<T: Real>(tape: &mut Tape<T>, st: TapeState, hg: &Hypergraph) -> Var {
    tape.gather_mean(st.s, singletons([hg.table_edge()]))
}

fn multi_hot<T: Real>(rows: &[&[usize]], labels: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(rows.len(), labels);
    for (r, ls) in rows.iter().enumerate() {
        for &l in *ls {
            m.set(r, l, T::one());
        }
    }
    m
}

/// Generic body shared by the heads; the blanket [`Task`] impl runs it at
/// either precision.
trait Head: Send + Sync {
    const KIND: TaskKind;

    fn labels(&self) -> usize;

    fn logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        encoder: &EncoderParams,
        ex: &TaskExample,
        dropout: &mut Dropout,
    ) -> Result<Var>;

    fn loss<T: Real>(&self, tape: &mut Tape<T>, logits: Var, ex: &TaskExample) -> Result<Var>;
}

fn check_kind(expected: TaskKind, ex: &TaskExample) -> Result<()> {
    if ex.kind() != expected {
        return Err(Error::InvalidArgument(format!(
            "{} example given to the {expected} head",
            ex.kind()
        )));
    }
    Ok(())
}

fn logits_matrix<H: Head, T: Real>(
    head: &H,
    encoder: &EncoderParams,
    store: &ParamStore,
    ex: &TaskExample,
) -> Result<Matrix<f64>> {
    let values = store.values_as::<T>();
    let mut tape = Tape::new(&values);
    let z = head.logits(&mut tape, encoder, ex, &mut Dropout::off())?;
    Ok(tape.value(z).cast())
}

impl<H: Head> Task for H {
    fn kind(&self) -> TaskKind {
        H::KIND
    }

    fn num_labels(&self) -> usize {
        self.labels()
    }

    fn example_loss(
        &self,
        encoder: &EncoderParams,
        values: &[Matrix<f64>],
        ex: &TaskExample,
        dropout: &mut Dropout,
    ) -> Result<(f64, Vec<Matrix<f64>>)> {
        check_kind(H::KIND, ex)?;
        let mut tape = Tape::new(values);
        let z = self.logits(&mut tape, encoder, ex, dropout)?;
        let loss = self.loss(&mut tape, z, ex)?;
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss).param_grads(values)))
    }

    fn logits(
        &self,
        encoder: &EncoderParams,
        store: &ParamStore,
        ex: &TaskExample,
        precision: Precision,
    ) -> Result<Matrix<f64>> {
        check_kind(H::KIND, ex)?;
        match precision {
            Precision::F64 => logits_matrix::<H, f64>(self, encoder, store, ex),
            Precision::F32 => logits_matrix::<H, f32>(self, encoder, store, ex),
        }
    }
}

/// Column types: one multi-label logit row per column hyperedge.
pub struct CtaHead {
    affine: Affine,
    labels: usize,
}

impl CtaHead {
    pub fn setup(mut s: TaskSetup) -> Result<Self> {
        let hidden = s.hidden;
        Ok(Self {
            affine: Affine::init_or_locate(&mut s, TaskKind::Cta, hidden)?,
            labels: s.num_labels,
        })
    }
}

impl Head for CtaHead {
    const KIND: TaskKind = TaskKind::Cta;

    fn labels(&self) -> usize {
        self.labels
    }

    fn logits<T: Real>(&self, tape: &mut Tape<T>, enc: &EncoderParams, ex: &TaskExample, d: &mut Dropout) -> Result<Var> {
        let hg = build_hypergraph(&ex.table)?;
        let st = enc.forward(tape, &hg, d)?;
        let cols = columns(tape, st, &hg);
        Ok(self.affine.apply(tape, cols))
    }

    fn loss<T: Real>(&self, tape: &mut Tape<T>, logits: Var, ex: &TaskExample) -> Result<Var> {
        let Targets::Columns(cols) = &ex.targets else { unreachable!("kind checked") };
        let rows: Vec<&[usize]> = cols.iter().map(Vec::as_slice).collect();
        if rows.len() != tape.shape(logits).0 {
            return Err(Error::DimensionMismatch("column targets do not match the table".into()));
        }
        Ok(tape.bce_with_logits_mean(logits, multi_hot(&rows, self.labels)))
    }
}

/// Column-pair relations: the two column rows side by side, then affine.
pub struct CpaHead {
    affine: Affine,
    labels: usize,
}

impl CpaHead {
    pub fn setup(mut s: TaskSetup) -> Result<Self> {
        let hidden = s.hidden;
        Ok(Self {
            affine: Affine::init_or_locate(&mut s, TaskKind::Cpa, 2 * hidden)?,
            labels: s.num_labels,
        })
    }

    /// `(P, labels)` logits for explicit pairs of a state already on the tape.
    pub fn pair_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        st: TapeState,
        hg: &Hypergraph,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no column pairs".into()));
        }
        for &(a, b) in pairs {
            validate_pair(a, b, hg.m())?;
        }
        let left = tape.gather_mean(st.s, singletons(pairs.iter().map(|p| hg.column_edge(p.0))));
        let right = tape.gather_mean(st.s, singletons(pairs.iter().map(|p| hg.column_edge(p.1))));
        let cat = tape.concat_cols(left, right);
        Ok(self.affine.apply(tape, cat))
    }
}

impl Head for CpaHead {
    const KIND: TaskKind = TaskKind::Cpa;

    fn labels(&self) -> usize {
        self.labels
    }

    fn logits<T: Real>(&self, tape: &mut Tape<T>, enc: &EncoderParams, ex: &TaskExample, d: &mut Dropout) -> Result<Var> {
        let Targets::Pairs(pairs) = &ex.targets else { unreachable!("kind checked") };
        let hg = build_hypergraph(&ex.table)?;
        let st = enc.forward(tape, &hg, d)?;
        let pairs: Vec<(usize, usize)> = pairs.iter().map(|p| (p.left, p.right)).collect();
        self.pair_logits(tape, st, &hg, &pairs)
    }

    fn loss<T: Real>(&self, tape: &mut Tape<T>, logits: Var, ex: &TaskExample) -> Result<Var> {
        let Targets::Pairs(pairs) = &ex.targets else { unreachable!("kind checked") };
        let rows: Vec<&[usize]> = pairs.iter().map(|p| p.labels.as_slice()).collect();
        Ok(tape.bce_with_logits_mean(logits, multi_hot(&rows, self.labels)))
    }
}

/// Table type: the table hyperedge row, affine, softmax.
pub struct TtdHead {
    affine: Affine,
    labels: usize,
}

impl TtdHead {
    pub fn setup(mut s: TaskSetup) -> Result<Self> {
        let hidden = s.hidden;
        Ok(Self {
            affine: Affine::init_or_locate(&mut s, TaskKind::Ttd, hidden)?,
            labels: s.num_labels,
        })
    }
}

impl Head for TtdHead {
    const KIND: TaskKind = TaskKind::Ttd;

    fn labels(&self) -> usize {
        self.labels
    }

    fn logits<T: Real>(&self, tape: &mut Tape<T>, enc: &EncoderParams, ex: &TaskExample, d: &mut Dropout) -> Result<Var> {
        let hg = build_hypergraph(&ex.table)?;
        let st = enc.forward(tape, &hg, d)?;
        let tab = table_row(tape, st, &hg);
        Ok(self.affine.apply(tape, tab))
    }

    fn loss<T: Real>(&self, tape: &mut Tape<T>, logits: Var, ex: &TaskExample) -> Result<Var> {
        let Targets::Class(c) = ex.targets else { unreachable!("kind checked") };
        Ok(tape.softmax_cross_entropy_mean(logits, vec![c]))
    }
}

/// Table-pair similarity over table rows and mean-pooled column rows.
pub struct TspHead {
    affine: Affine,
    symmetrize: bool,
    interactions: bool,
}

impl TspHead {
    pub fn setup(mut s: TaskSetup) -> Result<Self> {
        if s.num_labels != 1 {
            return Err(Error::InvalidArgument("table similarity has one binary label".into()));
        }
        let interactions = s.settings.pair_interactions;
        let fan_in = if interactions { 8 } else { 4 } * s.hidden;
        Ok(Self {
            affine: Affine::init_or_locate(&mut s, TaskKind::Tsp, fan_in)?,
            symmetrize: s.settings.symmetrize,
            interactions,
        })
    }

    fn summary<T: Real>(&self, tape: &mut Tape<T>, enc: &EncoderParams, table: &crate::table_io::Table, d: &mut Dropout) -> Result<(Var, Var)> {
        let hg = build_hypergraph(table)?;
        let st = enc.forward(tape, &hg, d)?;
        let tab = table_row(tape, st, &hg);
        let all_cols = Arc::new(Groups::from_lists([(0..hg.m()).map(|j| hg.column_edge(j)).collect::<Vec<_>>()]));
        let cols = tape.gather_mean(st.s, all_cols);
        Ok((tab, cols))
    }

    /// `1 × 8F` (or `4F`) pair features of summaries `a` and `b`.
    fn features<T: Real>(&self, tape: &mut Tape<T>, a: (Var, Var), b: (Var, Var)) -> Var {
        let ordered = |tape: &mut Tape<T>, x: (Var, Var), y: (Var, Var)| {
            let t = tape.concat_cols(x.0, y.0);
            let c = tape.concat_cols(x.1, y.1);
            tape.concat_cols(t, c)
        };
        let mut f = ordered(tape, a, b);
        if self.symmetrize {
            let g = ordered(tape, b, a);
            let sum = tape.add(f, g);
            f = tape.scale(sum, T::of(0.5));
        }
        if self.interactions {
            let prod_t = tape.mul(a.0, b.0);
            let prod_c = tape.mul(a.1, b.1);
            let gap_t = abs_diff(tape, a.0, b.0);
            let gap_c = abs_diff(tape, a.1, b.1);
            let p = tape.concat_cols(prod_t, prod_c);
            let g = tape.concat_cols(gap_t, gap_c);
            let pg = tape.concat_cols(p, g);
            f = tape.concat_cols(f, pg);
        }
        f
    }
}

/// `|x − y|` as `relu(x − y) + relu(y − x)`, symmetric in its arguments.
fn abs_diff<T: Real>(tape: &mut Tape<T>, x: Var, y: Var) -> Var {
    let ny = tape.scale(y, -T::one());
    let nx = tape.scale(x, -T::one());
    let d1 = tape.add(x, ny);
    let d2 = tape.add(y, nx);
    let r1 = tape.relu(d1);
    let r2 = tape.relu(d2);
    tape.add(r1, r2)
}

impl Head for TspHead {
    const KIND: TaskKind = TaskKind::Tsp;

    fn labels(&self) -> usize {
        1
    }

    fn logits<T: Real>(&self, tape: &mut Tape<T>, enc: &EncoderParams, ex: &TaskExample, d: &mut Dropout) -> Result<Var> {
        let other = ex
            .other
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("similarity example {} has no second table", ex.table.id)))?;
        let a = self.summary(tape, enc, &ex.table, d)?;
        let b = self.summary(tape, enc, other, d)?;
        let f = self.features(tape, a, b);
        Ok(self.affine.apply(tape, f))
    }

    fn loss<T: Real>(&self, tape: &mut Tape<T>, logits: Var, ex: &TaskExample) -> Result<Var> {
        let Targets::Similarity(s) = &ex.targets else { unreachable!("kind checked") };
        let y = if s.similar { T::one() } else { T::zero() };
        Ok(tape.bce_with_logits_mean(logits, Matrix::filled(1, 1, y)))
    }
}
