//! Embedding layer and stacked hypergraph attention layers.

use std::sync::Arc;

use hytrel_numerics::kernels::LAYER_NORM_EPS;
use hytrel_numerics::{Groups, Matrix, ParamId, ParamStore, Real, Tape, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{build_hypergraph, Hypergraph};
use crate::rng::{stable_hash, Rng};
use crate::table_io::{Table, TokenId};

/// How row hyperedges get their initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowInit {
    /// Fresh `Normal(0, std²)` rows seeded by table id and row content.
    Sampled,
    /// One learned vector shared by every row hyperedge.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Defaults to `4 · hidden` when zero.
    pub ffn_dim: usize,
    pub dropout: f64,
    pub row_init: RowInit,
    pub row_init_std: f64,
    pub row_init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            hidden: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 0,
            dropout: 0.0,
            row_init: RowInit::Sampled,
            row_init_std: 0.02,
            row_init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn ffn(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.hidden
        } else {
            self.ffn_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.vocab_size < 2 {
            return fail("vocabulary must hold at least the two reserved tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.row_init_std >= 0.0 && self.row_init_std.is_finite()) {
            return fail("row init std must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// One attention pooling block: query, key/value projections, FFN, two norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIds {
    pub query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIds {
    pub node_to_edge: BlockIds,
    pub fuse_w1: ParamId,
    pub fuse_b1: ParamId,
    pub fuse_w2: ParamId,
    pub fuse_b2: ParamId,
    pub edge_to_node: BlockIds,
}

/// Where each encoder weight lives inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: ModelConfig,
    pub embedding: ParamId,
    pub row_shared: Option<ParamId>,
    pub layers: Vec<LayerIds>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64, decay: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.store.push(name, Matrix::from_vec(rows, cols, data), decay)
    }

    fn filled(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.store.push(name, Matrix::filled(1, cols, v), false)
    }
}

fn find(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .index_of(name)
        .ok_or_else(|| Error::Contract(format!("parameter `{name}` missing from store")))
}

impl EncoderParams {
    /// Appends freshly initialized encoder weights to `store`.
    pub fn init(config: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let f = config.hidden;
        let dh = f / config.heads;
        let ffn = config.ffn();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut init = Init { store, rng };
        let embedding = init.normal("embedding.tokens".into(), config.vocab_size, f, 1.0, true);
        let row_shared = (config.row_init == RowInit::Shared)
            .then(|| init.normal("embedding.row".into(), 1, f, config.row_init_std, false));
        let block = |init: &mut Init, p: String| BlockIds {
            query: init.normal(format!("{p}.query"), 1, f, fan(dh), false),
            w_key: init.normal(format!("{p}.w_key"), f, f, fan(f), true),
            w_value: init.normal(format!("{p}.w_value"), f, f, fan(f), true),
            ln1_gain: init.filled(format!("{p}.ln1.gain"), f, 1.0),
            ln1_bias: init.filled(format!("{p}.ln1.bias"), f, 0.0),
            ffn_w1: init.normal(format!("{p}.ffn.w1"), f, ffn, (2.0 / f as f64).sqrt(), true),
            ffn_b1: init.filled(format!("{p}.ffn.b1"), ffn, 0.0),
            ffn_w2: init.normal(format!("{p}.ffn.w2"), ffn, f, fan(ffn), true),
            ffn_b2: init.filled(format!("{p}.ffn.b2"), f, 0.0),
            ln2_gain: init.filled(format!("{p}.ln2.gain"), f, 1.0),
            ln2_bias: init.filled(format!("{p}.ln2.bias"), f, 0.0),
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let node_to_edge = block(&mut init, format!("layer{l}.node_to_edge"));
            let fuse_w1 = init.normal(format!("layer{l}.fuse.w1"), 2 * f, f, fan(f), true);
            let fuse_b1 = init.filled(format!("layer{l}.fuse.b1"), f, 0.0);
            let fuse_w2 = init.normal(format!("layer{l}.fuse.w2"), f, f, fan(f), true);
            let fuse_b2 = init.filled(format!("layer{l}.fuse.b2"), f, 0.0);
            let edge_to_node = block(&mut init, format!("layer{l}.edge_to_node"));
            layers.push(LayerIds {
                node_to_edge,
                fuse_w1,
                fuse_b1,
                fuse_w2,
                fuse_b2,
                edge_to_node,
            });
        }
        Ok(Self {
            config: config.clone(),
            embedding,
            row_shared,
            layers,
        })
    }

    /// Recovers the layout from parameter names, checking every shape.
    pub fn locate(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let block = |p: &str| -> Result<BlockIds> {
            Ok(BlockIds {
                query: find(store, &format!("{p}.query"))?,
                w_key: find(store, &format!("{p}.w_key"))?,
                w_value: find(store, &format!("{p}.w_value"))?,
                ln1_gain: find(store, &format!("{p}.ln1.gain"))?,
                ln1_bias: find(store, &format!("{p}.ln1.bias"))?,
                ffn_w1: find(store, &format!("{p}.ffn.w1"))?,
                ffn_b1: find(store, &format!("{p}.ffn.b1"))?,
                ffn_w2: find(store, &format!("{p}.ffn.w2"))?,
                ffn_b2: find(store, &format!("{p}.ffn.b2"))?,
                ln2_gain: find(store, &format!("{p}.ln2.gain"))?,
                ln2_bias: find(store, &format!("{p}.ln2.bias"))?,
            })
        };
        let mut layers = Vec::new();
        for l in 0..config.layers {
            layers.push(LayerIds {
                node_to_edge: block(&format!("layer{l}.node_to_edge"))?,
                fuse_w1: find(store, &format!("layer{l}.fuse.w1"))?,
                fuse_b1: find(store, &format!("layer{l}.fuse.b1"))?,
                fuse_w2: find(store, &format!("layer{l}.fuse.w2"))?,
                fuse_b2: find(store, &format!("layer{l}.fuse.b2"))?,
                edge_to_node: block(&format!("layer{l}.edge_to_node"))?,
            });
        }
        let out = Self {
            config: config.clone(),
            embedding: find(store, "embedding.tokens")?,
            row_shared: match config.row_init {
                RowInit::Shared => Some(find(store, "embedding.row")?),
                RowInit::Sampled => None,
            },
            layers,
        };
        out.check_shapes(store)?;
        Ok(out)
    }

    fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        let f = self.config.hidden;
        let ffn = self.config.ffn();
        let mut expect = vec![(self.embedding, (self.config.vocab_size, f))];
        if let Some(r) = self.row_shared {
            expect.push((r, (1, f)));
        }
        for l in &self.layers {
            for b in [&l.node_to_edge, &l.edge_to_node] {
                expect.extend([
                    (b.query, (1, f)),
                    (b.w_key, (f, f)),
                    (b.w_value, (f, f)),
                    (b.ln1_gain, (1, f)),
                    (b.ln1_bias, (1, f)),
                    (b.ffn_w1, (f, ffn)),
                    (b.ffn_b1, (1, ffn)),
                    (b.ffn_w2, (ffn, f)),
                    (b.ffn_b2, (1, f)),
                    (b.ln2_gain, (1, f)),
                    (b.ln2_bias, (1, f)),
                ]);
            }
            expect.extend([
                (l.fuse_w1, (2 * f, f)),
                (l.fuse_b1, (1, f)),
                (l.fuse_w2, (f, f)),
                (l.fuse_b2, (1, f)),
            ]);
        }
        for (id, shape) in expect {
            let e = store.entry(id);
            if e.value.shape() != shape {
                return Err(Error::DimensionMismatch(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    e.value.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Node and hyperedge representations after `layer` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphState<T: Real = f64> {
    pub x: Matrix<T>,
    pub s: Matrix<T>,
    pub layer: usize,
}

/// Tape handles for a [`GraphState`] under construction.
#[derive(Debug, Clone, Copy)]
pub struct TapeState {
    pub x: Var,
    pub s: Var,
}

/// Dropout masks drawn from `rng` when present; a no-op otherwise.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    fn apply<T: Real>(&mut self, tape: &mut Tape<T>, v: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else {
            return v;
        };
        if self.rate <= 0.0 {
            return v;
        }
        let (r, c) = tape.shape(v);
        let keep = T::of(1.0 / (1.0 - self.rate));
        let data = (0..r * c)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        tape.mul_const(v, Matrix::from_vec(r, c, data))
    }
}

fn token_groups<'a>(lists: impl Iterator<Item = &'a [TokenId]>) -> Arc<Groups> {
    Arc::new(Groups::from_lists(
        lists.map(|l| l.iter().map(|&t| t as usize).collect::<Vec<_>>()),
    ))
}

/// Seed for row `i`, keyed by table id and the row's cell multiset so a
/// permuted copy of the table draws the same vector for the same row.
fn row_seed(base: u64, table: &Table, i: usize) -> u64 {
    let mut cells: Vec<&Vec<TokenId>> = table.rows[i].iter().collect();
    cells.sort();
    let mut bytes = Vec::new();
    for c in cells {
        bytes.extend((c.len() as u64).to_le_bytes());
        for t in c {
            bytes.extend(t.to_le_bytes());
        }
    }
    stable_hash(&[&base.to_le_bytes(), table.id.as_bytes(), &bytes])
}

pub fn sampled_row_init(config: &ModelConfig, table: &Table) -> Matrix<f64> {
    let f = config.hidden;
    let dist = Normal::new(0.0, config.row_init_std).expect("validated std");
    let mut out = Matrix::zeros(table.n(), f);
    for i in 0..table.n() {
        let mut rng = crate::rng::seeded(row_seed(config.row_init_seed, table, i));
        for x in out.row_mut(i) {
            *x = dist.sample(&mut rng);
        }
    }
    out
}

impl EncoderParams {
    fn check_vocab(&self, hg: &Hypergraph) -> Result<()> {
        hg.table().validate(self.config.vocab_size)
    }

    /// Token-mean node features and hyperedge states.
    pub fn init_on_tape<T: Real>(&self, tape: &mut Tape<T>, hg: &Hypergraph) -> Result<TapeState> {
        self.check_vocab(hg)?;
        let emb = Var::from(self.embedding);
        let cells = token_groups((0..hg.node_count()).map(|v| hg.node_tokens(v)));
        let x = tape.gather_mean(emb, cells);
        let headers = token_groups((0..hg.m()).map(|j| hg.edge_payload(hg.column_edge(j))));
        let cols = tape.gather_mean(emb, headers);
        let rows = match self.row_shared {
            Some(id) => {
                tape.gather_mean(Var::from(id), Arc::new(Groups::from_lists(vec![[0usize]; hg.n()])))
            }
            None => tape.constant(sampled_row_init(&self.config, hg.table()).cast()),
        };
        let caption = token_groups(std::iter::once(hg.edge_payload(hg.table_edge())));
        let tab = tape.gather_mean(emb, caption);
        let s = tape.vstack(&[cols, rows, tab]);
        Ok(TapeState { x, s })
    }

    /// Set-attention pooling of `input` rows per group, then residual FFN.
    pub fn attention_block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &BlockIds,
        input: Var,
        groups: Arc<Groups>,
        dropout: &mut Dropout,
    ) -> Var {
        let p = |id: ParamId| Var::from(id);
        let keys = tape.matmul(input, p(b.w_key));
        let values = tape.matmul(input, p(b.w_value));
        let pooled = tape.set_attention(p(b.query), keys, values, groups, self.config.heads);
        let pre = tape.add_row(pooled, p(b.query));
        let eps = T::of(LAYER_NORM_EPS);
        let y = tape.layer_norm(pre, p(b.ln1_gain), p(b.ln1_bias), eps);
        let h = tape.matmul(y, p(b.ffn_w1));
        let h = tape.add_row(h, p(b.ffn_b1));
        let h = tape.relu(h);
        let h = dropout.apply(tape, h);
        let f = tape.matmul(h, p(b.ffn_w2));
        let f = tape.add_row(f, p(b.ffn_b2));
        let z = tape.add(y, f);
        tape.layer_norm(z, p(b.ln2_gain), p(b.ln2_bias), eps)
    }

    /// One layer: node→hyperedge pooling, fusion MLP, hyperedge→node pooling.
    pub fn layer_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        hg: &Hypergraph,
        state: TapeState,
        layer: usize,
        dropout: &mut Dropout,
    ) -> Result<TapeState> {
        let ids = self.layers.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} of {}", self.layers.len()))
        })?;
        let f = self.config.hidden;
        if tape.shape(state.x) != (hg.node_count(), f) || tape.shape(state.s) != (hg.edge_count(), f)
        {
            return Err(Error::DimensionMismatch(format!(
                "state {:?}/{:?} does not fit a {}x{} table at width {f}",
                tape.shape(state.x),
                tape.shape(state.s),
                hg.n(),
                hg.m()
            )));
        }
        if let Some(e) = hg.edge_members().iter().position(|g| g.is_empty()) {
            return Err(Error::Contract(format!("hyperedge {e} has no members")));
        }
        let pooled = self.attention_block(tape, &ids.node_to_edge, state.x, Arc::clone(hg.edge_members()), dropout);
        let p = |id: ParamId| Var::from(id);
        let cat = tape.concat_cols(state.s, pooled);
        let h = tape.matmul(cat, p(ids.fuse_w1));
        let h = tape.add_row(h, p(ids.fuse_b1));
        let h = tape.relu(h);
        let s = tape.matmul(h, p(ids.fuse_w2));
        let s = tape.add_row(s, p(ids.fuse_b2));
        let x_new = self.attention_block(tape, &ids.edge_to_node, s, Arc::clone(hg.node_edges()), dropout);
        let has_edges: Vec<bool> = hg.node_edges().iter().map(|g| !g.is_empty()).collect();
        let x = if has_edges.iter().all(|&b| b) {
            x_new
        } else {
            tape.select_rows(state.x, x_new, Arc::new(has_edges))
        };
        Ok(TapeState { x, s })
    }

    /// Embedding layer followed by every layer.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        hg: &Hypergraph,
        dropout: &mut Dropout,
    ) -> Result<TapeState> {
        let mut st = self.init_on_tape(tape, hg)?;
        for l in 0..self.layers.len() {
            st = self.layer_on_tape(tape, hg, st, l, dropout)?;
        }
        Ok(st)
    }

    pub fn init_embeddings<T: Real>(&self, values: &[Matrix<T>], hg: &Hypergraph) -> Result<GraphState<T>> {
        let mut tape = Tape::new(values);
        let st = self.init_on_tape(&mut tape, hg)?;
        Ok(GraphState {
            x: tape.value(st.x).clone(),
            s: tape.value(st.s).clone(),
            layer: 0,
        })
    }

    pub fn hypertrans_layer<T: Real>(
        &self,
        values: &[Matrix<T>],
        state: &GraphState<T>,
        hg: &Hypergraph,
    ) -> Result<GraphState<T>> {
        let mut tape = Tape::new(values);
        let x = tape.constant(state.x.clone());
        let s = tape.constant(state.s.clone());
        let st = self.layer_on_tape(&mut tape, hg, TapeState { x, s }, state.layer, &mut Dropout::off())?;
        Ok(GraphState {
            x: tape.value(st.x).clone(),
            s: tape.value(st.s).clone(),
            layer: state.layer + 1,
        })
    }

    /// Full forward pass with `values` (typically `store.values_as::<T>()`).
    pub fn encode_graph<T: Real>(&self, values: &[Matrix<T>], hg: &Hypergraph) -> Result<GraphState<T>> {
        let mut tape = Tape::new(values);
        let st = self.forward(&mut tape, hg, &mut Dropout::off())?;
        Ok(GraphState {
            x: tape.value(st.x).clone(),
            s: tape.value(st.s).clone(),
            layer: self.layers.len(),
        })
    }

    pub fn encode_with<T: Real>(&self, values: &[Matrix<T>], table: &Table) -> Result<GraphState<T>> {
        self.encode_graph(values, &build_hypergraph(table)?)
    }
}

/// 64-bit forward pass straight from a store.
pub fn encode(table: &Table, params: &EncoderParams, store: &ParamStore) -> Result<GraphState> {
    params.encode_with(&store.values_as::<f64>(), table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Cell,
    Row,
    Col,
    Tab,
}

/// One exported representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub table_id: String,
    pub element_kind: ElementKind,
    pub index: usize,
    pub vector: Vec<f64>,
}

/// Cells by node id, then columns, rows and the table.
pub fn embedding_records<T: Real>(hg: &Hypergraph, state: &GraphState<T>) -> Vec<EmbeddingRecord> {
    let id = &hg.table().id;
    let rec = |kind, index, row: &[T]| EmbeddingRecord {
        table_id: id.clone(),
        element_kind: kind,
        index,
        vector: row.iter().map(|v| v.as_f64()).collect(),
    };
    let mut out: Vec<EmbeddingRecord> = (0..hg.node_count())
        .map(|v| rec(ElementKind::Cell, v, state.x.row(v)))
        .collect();
    out.extend((0..hg.m()).map(|j| rec(ElementKind::Col, j, state.s.row(hg.column_edge(j)))));
    out.extend((0..hg.n()).map(|i| rec(ElementKind::Row, i, state.s.row(hg.row_edge(i)))));
    out.push(rec(ElementKind::Tab, 0, state.s.row(hg.table_edge())));
    out
}
