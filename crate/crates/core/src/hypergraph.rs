//! Table → hypergraph formatting, permutation actions and connection masking.
//!
//! Hyperedge ids: columns `0..m`, rows `m..m+n`, the table edge last.
//! Node `(i, j)` has id `i·m + j`.

use std::fmt::Write as _;
use std::sync::Arc;

use hytrel_numerics::{Groups, Matrix};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::table_io::{Table, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    Column(usize),
    Row(usize),
    Table,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    table: Arc<Table>,
    edge_members: Arc<Groups>,
    node_edges: Arc<Groups>,
}

impl Hypergraph {
    pub fn table(&self) -> &Table {
        &self.table
    }

    pub fn n(&self) -> usize {
        self.table.n()
    }

    pub fn m(&self) -> usize {
        self.table.m()
    }

    pub fn node_count(&self) -> usize {
        self.n() * self.m()
    }

    pub fn edge_count(&self) -> usize {
        self.n() + self.m() + 1
    }

    pub fn node_id(&self, i: usize, j: usize) -> usize {
        i * self.m() + j
    }

    pub fn node_position(&self, v: usize) -> (usize, usize) {
        (v / self.m(), v % self.m())
    }

    pub fn column_edge(&self, j: usize) -> usize {
        j
    }

    pub fn row_edge(&self, i: usize) -> usize {
        self.m() + i
    }

    pub fn table_edge(&self) -> usize {
        self.m() + self.n()
    }

    pub fn edge_kind(&self, e: usize) -> EdgeKind {
        let (n, m) = (self.n(), self.m());
        match e {
            e if e < m => EdgeKind::Column(e),
            e if e < m + n => EdgeKind::Row(e - m),
            e if e == m + n => EdgeKind::Table,
            _ => panic!("hyperedge {e} out of range"),
        }
    }

    /// Header tokens for columns, caption tokens for the table edge, nothing for rows.
    pub fn edge_payload(&self, e: usize) -> &[TokenId] {
        match self.edge_kind(e) {
            EdgeKind::Column(j) => &self.table.headers[j],
            EdgeKind::Row(_) => &[],
            EdgeKind::Table => &self.table.caption,
        }
    }

    pub fn node_tokens(&self, v: usize) -> &[TokenId] {
        let (i, j) = self.node_position(v);
        self.table.cell(i, j)
    }

    /// Hyperedge → member nodes, ascending.
    pub fn edge_members(&self) -> &Arc<Groups> {
        &self.edge_members
    }

    /// Node → containing hyperedges, ascending.
    pub fn node_edges(&self) -> &Arc<Groups> {
        &self.node_edges
    }

    pub fn incidence_count(&self) -> usize {
        self.edge_members.total_members()
    }

    /// Every `(node, hyperedge)` pair, node-major.
    pub fn incidences(&self) -> Vec<(usize, usize)> {
        self.node_edges
            .iter()
            .enumerate()
            .flat_map(|(v, es)| es.iter().map(move |&e| (v, e)))
            .collect()
    }

    fn with_incidences(&self, pairs: &[(usize, usize)]) -> Hypergraph {
        let mut by_edge = vec![Vec::new(); self.edge_count()];
        let mut by_node = vec![Vec::new(); self.node_count()];
        for &(v, e) in pairs {
            by_edge[e].push(v);
            by_node[v].push(e);
        }
        for l in by_edge.iter_mut().chain(by_node.iter_mut()) {
            l.sort_unstable();
            l.dedup();
        }
        Hypergraph {
            table: Arc::clone(&self.table),
            edge_members: Arc::new(Groups::from_lists(by_edge)),
            node_edges: Arc::new(Groups::from_lists(by_node)),
        }
    }

    /// Sparse export, one `node,hyperedge` line per incidence.
    pub fn incidence_csv(&self) -> String {
        let mut out = String::from("node,hyperedge\n");
        for (v, e) in self.incidences() {
            let _ = writeln!(out, "{v},{e}");
        }
        out
    }

    /// Dense 0/1 grid, one line per node.
    pub fn incidence_grid(&self) -> String {
        let b = incidence_matrix(self);
        let mut out = String::new();
        for r in 0..b.rows() {
            let line: Vec<&str> = b
                .row(r)
                .iter()
                .map(|&x| if x != 0.0 { "1" } else { "0" })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn build_hypergraph(table: &Table) -> Result<Hypergraph> {
    table.check_shape()?;
    let (n, m) = (table.n(), table.m());
    let mut by_edge: Vec<Vec<usize>> = Vec::with_capacity(m + n + 1);
    for j in 0..m {
        by_edge.push((0..n).map(|i| i * m + j).collect());
    }
    for i in 0..n {
        by_edge.push((0..m).map(|j| i * m + j).collect());
    }
    by_edge.push((0..n * m).collect());
    let by_node = (0..n * m).map(|v| [v % m, m + v / m, m + n]);
    Ok(Hypergraph {
        table: Arc::new(table.clone()),
        edge_members: Arc::new(Groups::from_lists(by_edge)),
        node_edges: Arc::new(Groups::from_lists(by_node)),
    })
}

/// Dense `(n·m) × (m+n+1)` 0/1 matrix.
pub fn incidence_matrix(hg: &Hypergraph) -> Matrix<f64> {
    let mut b = Matrix::zeros(hg.node_count(), hg.edge_count());
    for (v, e) in hg.incidences() {
        b.set(v, e, 1.0);
    }
    b
}

/// Independent row and column permutations.
///
/// Applying the action places old row `sigma_row[i]` at position `i` and old
/// column `sigma_col[j]` at position `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermutationAction {
    pub sigma_row: Vec<usize>,
    pub sigma_col: Vec<usize>,
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter()
        .all(|&x| x < p.len() && !std::mem::replace(&mut seen[x], true))
}

impl PermutationAction {
    pub fn new(sigma_row: Vec<usize>, sigma_col: Vec<usize>) -> Result<Self> {
        if !is_permutation(&sigma_row) || !is_permutation(&sigma_col) {
            return Err(Error::InvalidArgument(
                "permutation action must be a bijection on rows and on columns".into(),
            ));
        }
        Ok(Self {
            sigma_row,
            sigma_col,
        })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            sigma_row: (0..n).collect(),
            sigma_col: (0..m).collect(),
        }
    }

    pub fn random(n: usize, m: usize, rng: &mut Rng) -> Self {
        let mut a = Self::identity(n, m);
        a.sigma_row.shuffle(rng);
        a.sigma_col.shuffle(rng);
        a
    }

    pub fn random_rows(n: usize, m: usize, rng: &mut Rng) -> Self {
        let mut a = Self::identity(n, m);
        a.sigma_row.shuffle(rng);
        a
    }

    pub fn random_cols(n: usize, m: usize, rng: &mut Rng) -> Self {
        let mut a = Self::identity(n, m);
        a.sigma_col.shuffle(rng);
        a
    }

    pub fn is_identity(&self) -> bool {
        self.sigma_row.iter().enumerate().all(|(i, &r)| i == r)
            && self.sigma_col.iter().enumerate().all(|(j, &c)| j == c)
    }

    /// The action equal to applying `self` first and `next` second.
    pub fn then(&self, next: &PermutationAction) -> PermutationAction {
        PermutationAction {
            sigma_row: next.sigma_row.iter().map(|&i| self.sigma_row[i]).collect(),
            sigma_col: next.sigma_col.iter().map(|&j| self.sigma_col[j]).collect(),
        }
    }

    pub fn inverse(&self) -> PermutationAction {
        let inv = |p: &[usize]| {
            let mut q = vec![0; p.len()];
            for (i, &x) in p.iter().enumerate() {
                q[x] = i;
            }
            q
        };
        PermutationAction {
            sigma_row: inv(&self.sigma_row),
            sigma_col: inv(&self.sigma_col),
        }
    }

    /// Node id in the original table for node `v` of the permuted one.
    pub fn source_node(&self, v: usize) -> usize {
        let m = self.sigma_col.len();
        self.sigma_row[v / m] * m + self.sigma_col[v % m]
    }

    /// Hyperedge id in the original hypergraph for hyperedge `e` of the permuted one.
    pub fn source_edge(&self, e: usize) -> usize {
        let (n, m) = (self.sigma_row.len(), self.sigma_col.len());
        match e {
            e if e < m => self.sigma_col[e],
            e if e < m + n => m + self.sigma_row[e - m],
            _ => e,
        }
    }
}

pub fn apply_permutation(table: &Table, action: &PermutationAction) -> Result<Table> {
    if action.sigma_row.len() != table.n() || action.sigma_col.len() != table.m() {
        return Err(Error::DimensionMismatch(format!(
            "action on {}x{} applied to a {}x{} table",
            action.sigma_row.len(),
            action.sigma_col.len(),
            table.n(),
            table.m()
        )));
    }
    let pick_cols = |cells: &[Vec<TokenId>]| -> Vec<Vec<TokenId>> {
        action.sigma_col.iter().map(|&j| cells[j].clone()).collect()
    };
    Ok(Table {
        id: table.id.clone(),
        caption: table.caption.clone(),
        headers: pick_cols(&table.headers),
        rows: action
            .sigma_row
            .iter()
            .map(|&i| pick_cols(&table.rows[i]))
            .collect(),
    })
}

/// Removes `round(ratio · incidences)` node–hyperedge incidences chosen
/// uniformly, then re-attaches one random former member to every hyperedge
/// that was emptied.
pub fn mask_connections(hg: &Hypergraph, ratio: f64, rng: &mut Rng) -> Result<Hypergraph> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must be in [0, 1), got {ratio}"
        )));
    }
    let all = hg.incidences();
    let k = (ratio * all.len() as f64).round() as usize;
    if k == 0 {
        return Ok(hg.clone());
    }
    let mut removed = vec![false; all.len()];
    for idx in index::sample(rng, all.len(), k) {
        removed[idx] = true;
    }
    let mut alive = vec![0usize; hg.edge_count()];
    for (&(_, e), &r) in all.iter().zip(&removed) {
        if !r {
            alive[e] += 1;
        }
    }
    let mut kept: Vec<(usize, usize)> = all
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(&p, _)| p)
        .collect();
    for (e, &count) in alive.iter().enumerate() {
        if count == 0 {
            let members = hg.edge_members().group(e);
            let v = members[rng.random_range(0..members.len())];
            kept.push((v, e));
        }
    }
    Ok(hg.with_incidences(&kept))
}
