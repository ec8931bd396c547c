//! Invariance studies, the excessive-invariance probe, a 1-WL oracle on the
//! star expansion, and per-layer timing.

mod profile;
mod wl;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use hytrel_numerics::{Matrix, Real};

use crate::encoder::{ElementKind, EncoderParams, GraphState};
use crate::error::{Error, Result};
use crate::hypergraph::{apply_permutation, build_hypergraph, Hypergraph, PermutationAction};
use crate::rng::Rng;
use crate::table_io::Table;

pub use profile::{profile_scaling, random_table, time_layer, ScalingReport, TimingRow};
pub use wl::{same_orbit, theorem_check, theorem_pairs, wl_colorings, wl_isomorphic, TheoremReport, WLColoring, WlVerdict};

/// Which factor of the permutation group an action was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermutationMode {
    Rows,
    Cols,
    Both,
}

impl PermutationMode {
    pub const ALL: [PermutationMode; 3] = [PermutationMode::Rows, PermutationMode::Cols, PermutationMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            PermutationMode::Rows => "rows",
            PermutationMode::Cols => "cols",
            PermutationMode::Both => "both",
        }
    }

    pub fn sample(self, n: usize, m: usize, rng: &mut Rng) -> PermutationAction {
        match self {
            PermutationMode::Rows => PermutationAction::random_rows(n, m, rng),
            PermutationMode::Cols => PermutationAction::random_cols(n, m, rng),
            PermutationMode::Both => PermutationAction::random(n, m, rng),
        }
    }
}

fn kind_name(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::Cell => "cell",
        ElementKind::Row => "row",
        ElementKind::Col => "col",
        ElementKind::Tab => "tab",
    }
}

const KINDS: [ElementKind; 4] = [ElementKind::Cell, ElementKind::Row, ElementKind::Col, ElementKind::Tab];

/// Mean and max L2 distance for one (mode, element kind) cell of the study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mode: PermutationMode,
    pub kind: ElementKind,
    pub mean: f64,
    pub max: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub entries: Vec<DistanceStats>,
}

impl DistanceReport {
    fn record(&mut self, mode: PermutationMode, kind: ElementKind, d: f64) {
        match self.entries.iter_mut().find(|e| e.mode == mode && e.kind == kind) {
            Some(e) => {
                e.mean += (d - e.mean) / (e.samples + 1) as f64;
                e.max = e.max.max(d);
                e.samples += 1;
            }
            None => self.entries.push(DistanceStats {
                mode,
                kind,
                mean: d,
                max: d,
                samples: 1,
            }),
        }
    }

    /// Folds `other` in, weighting means by sample counts.
    pub fn merge(&mut self, other: &DistanceReport) {
        for o in &other.entries {
            match self.entries.iter_mut().find(|e| e.mode == o.mode && e.kind == o.kind) {
                Some(e) => {
                    let total = e.samples + o.samples;
                    e.mean = (e.mean * e.samples as f64 + o.mean * o.samples as f64) / total as f64;
                    e.max = e.max.max(o.max);
                    e.samples = total;
                }
                None => self.entries.push(*o),
            }
        }
        self.sort();
    }

    fn sort(&mut self) {
        self.entries.sort_by_key(|e| (e.mode, KINDS.iter().position(|k| *k == e.kind)));
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().map(|e| e.max).fold(0.0, f64::max)
    }

    pub fn max_for(&self, mode: PermutationMode) -> f64 {
        self.entries.iter().filter(|e| e.mode == mode).map(|e| e.max).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,kind,mean,max,samples\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                e.mode.name(),
                kind_name(e.kind),
                e.mean,
                e.max,
                e.samples
            ));
        }
        out
    }
}

fn row_distance<T: Real>(a: &Matrix<T>, ra: usize, b: &Matrix<T>, rb: usize) -> f64 {
    a.row(ra)
        .iter()
        .zip(b.row(rb))
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Distances between every element of `permuted` and its source in `original`.
fn matched_distances<T: Real>(
    hg: &Hypergraph,
    original: &GraphState<T>,
    permuted: &GraphState<T>,
    action: &PermutationAction,
    mode: PermutationMode,
    report: &mut DistanceReport,
) {
    for v in 0..hg.node_count() {
        let d = row_distance(&permuted.x, v, &original.x, action.source_node(v));
        report.record(mode, ElementKind::Cell, d);
    }
    for e in 0..hg.edge_count() {
        let kind = if e < hg.m() {
            ElementKind::Col
        } else if e == hg.table_edge() {
            ElementKind::Tab
        } else {
            ElementKind::Row
        };
        let d = row_distance(&permuted.s, e, &original.s, action.source_edge(e));
        report.record(mode, kind, d);
    }
}

/// Encodes `table` and each permuted copy, matching elements through the
/// known relabeling.
pub fn distances_for_actions<T: Real>(
    table: &Table,
    encoder: &EncoderParams,
    values: &[Matrix<T>],
    actions: &[(PermutationMode, PermutationAction)],
) -> Result<DistanceReport> {
    let hg = build_hypergraph(table)?;
    let original = encoder.encode_graph(values, &hg)?;
    let mut report = DistanceReport::default();
    for (mode, action) in actions {
        let permuted = apply_permutation(table, action)?;
        let state = encoder.encode_with(values, &permuted)?;
        matched_distances(&hg, &original, &state, action, *mode, &mut report);
    }
    report.sort();
    Ok(report)
}

/// `n_perms` random actions from each of rows-only, cols-only and both.
pub fn permutation_distance<T: Real>(
    table: &Table,
    encoder: &EncoderParams,
    values: &[Matrix<T>],
    n_perms: usize,
    rng: &mut Rng,
) -> Result<DistanceReport> {
    if n_perms == 0 {
        return Err(Error::InvalidArgument("at least one permutation is required".into()));
    }
    let (n, m) = (table.n(), table.m());
    let actions: Vec<_> = PermutationMode::ALL
        .iter()
        .flat_map(|&mode| (0..n_perms).map(move |_| mode).collect::<Vec<_>>())
        .map(|mode| (mode, mode.sample(n, m, rng)))
        .collect();
    distances_for_actions(table, encoder, values, &actions)
}

/// Exchange of the contents of two cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSwap {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

impl CellSwap {
    pub fn apply(&self, table: &Table) -> Result<Table> {
        let inside = |(i, j): (usize, usize)| i < table.n() && j < table.m();
        if !inside(self.a) || !inside(self.b) {
            return Err(Error::InvalidArgument(format!(
                "swap {:?} <-> {:?} outside a {}x{} table",
                self.a,
                self.b,
                table.n(),
                table.m()
            )));
        }
        let mut out = table.clone();
        let tmp = out.rows[self.a.0][self.a.1].clone();
        out.rows[self.a.0][self.a.1] = out.rows[self.b.0][self.b.1].clone();
        out.rows[self.b.0][self.b.1] = tmp;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeShift {
    pub swap: CellSwap,
    pub absolute: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub table_id: String,
    pub shifts: Vec<ProbeShift>,
    /// Set when the table offered no admissible swap.
    pub skipped: Option<String>,
}

impl ProbeReport {
    /// Share of swaps that moved the table representation by more than `tol` relative.
    pub fn fraction_above(&self, tol: f64) -> f64 {
        if self.shifts.is_empty() {
            return 0.0;
        }
        self.shifts.iter().filter(|s| s.relative > tol).count() as f64 / self.shifts.len() as f64
    }

    pub fn min_relative(&self) -> f64 {
        self.shifts.iter().map(|s| s.relative).fold(f64::INFINITY, f64::min)
    }
}

/// Table-hyperedge shift caused by each swap.
pub fn probe_swaps<T: Real>(
    table: &Table,
    encoder: &EncoderParams,
    values: &[Matrix<T>],
    swaps: &[CellSwap],
) -> Result<ProbeReport> {
    let hg = build_hypergraph(table)?;
    let base = encoder.encode_graph(values, &hg)?;
    let tab = hg.table_edge();
    let norm = base.s.row(tab).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let mut shifts = Vec::with_capacity(swaps.len());
    for swap in swaps {
        let state = encoder.encode_with(values, &swap.apply(table)?)?;
        let absolute = row_distance(&state.s, tab, &base.s, tab);
        shifts.push(ProbeShift {
            swap: *swap,
            absolute,
            relative: if norm > 0.0 { absolute / norm } else { absolute },
        });
    }
    Ok(ProbeReport {
        table_id: table.id.clone(),
        shifts,
        skipped: None,
    })
}

/// Random swaps of two distinct-content cells in different rows and different
/// columns; a table with no such pair is skipped with a notice.
pub fn excessive_invariance_probe<T: Real>(
    table: &Table,
    encoder: &EncoderParams,
    values: &[Matrix<T>],
    n_shuffles: usize,
    rng: &mut Rng,
) -> Result<ProbeReport> {
    let (n, m) = (table.n(), table.m());
    let mut pairs = Vec::new();
    for i1 in 0..n {
        for j1 in 0..m {
            for i2 in i1 + 1..n {
                for j2 in 0..m {
                    if j2 != j1 && table.rows[i1][j1] != table.rows[i2][j2] {
                        pairs.push(CellSwap {
                            a: (i1, j1),
                            b: (i2, j2),
                        });
                    }
                }
            }
        }
    }
    if pairs.is_empty() {
        return Ok(ProbeReport {
            table_id: table.id.clone(),
            shifts: Vec::new(),
            skipped: Some(format!(
                "table {} has no two distinct cells outside a shared row or column",
                table.id
            )),
        });
    }
    let swaps: Vec<CellSwap> = (0..n_shuffles)
        .map(|_| pairs[rng.random_range(0..pairs.len())])
        .collect();
    probe_swaps(table, encoder, values, &swaps)
}
