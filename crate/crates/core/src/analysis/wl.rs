use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use hytrel_numerics::{Matrix, Real};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::hypergraph::{apply_permutation, build_hypergraph, EdgeKind, Hypergraph, PermutationAction};
use crate::table_io::{Table, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WlVerdict {
    IsomorphicIndistinguishable,
    Distinguishable,
}

/// Colors of the star-expansion vertices: nodes first, then hyperedges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WLColoring {
    pub colors: Vec<usize>,
    pub rounds: usize,
    /// Distinct colors after initialization and after each round.
    pub class_counts: Vec<usize>,
    pub histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Signature {
    Node(Vec<TokenId>, usize),
    Column(Vec<TokenId>, usize),
    Row(usize),
    Table(Vec<TokenId>, usize),
    Refined(usize, Vec<usize>),
}

/// Star expansion: one vertex per node and per hyperedge, adjacency per incidence.
fn star_expansion(hg: &Hypergraph) -> (Vec<Signature>, Vec<Vec<usize>>) {
    let nodes = hg.node_count();
    let mut adj = vec![Vec::new(); nodes + hg.edge_count()];
    for (v, e) in hg.incidences() {
        adj[v].push(nodes + e);
        adj[nodes + e].push(v);
    }
    let mut init: Vec<Signature> = (0..nodes)
        .map(|v| Signature::Node(hg.node_tokens(v).to_vec(), adj[v].len()))
        .collect();
    for e in 0..hg.edge_count() {
        let deg = adj[nodes + e].len();
        init.push(match hg.edge_kind(e) {
            EdgeKind::Column(_) => Signature::Column(hg.edge_payload(e).to_vec(), deg),
            EdgeKind::Row(_) => Signature::Row(deg),
            EdgeKind::Table => Signature::Table(hg.edge_payload(e).to_vec(), deg),
        });
    }
    (init, adj)
}

fn class_count(colors: &[usize]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Joint refinement of several hypergraphs over one shared palette, so color
/// ids are comparable across graphs. Stops when the joint class count stops
/// growing or after `max_rounds`.
pub fn wl_colorings(graphs: &[&Hypergraph], max_rounds: usize) -> Vec<WLColoring> {
    let expanded: Vec<_> = graphs.iter().map(|hg| star_expansion(hg)).collect();
    let mut palette: BTreeMap<Signature, usize> = BTreeMap::new();
    let paint = |sig: Signature, palette: &mut BTreeMap<Signature, usize>| {
        let next = palette.len();
        *palette.entry(sig).or_insert(next)
    };
    let mut colors: Vec<Vec<usize>> = expanded
        .iter()
        .map(|(init, _)| init.iter().map(|s| paint(s.clone(), &mut palette)).collect())
        .collect();
    let joint = |colors: &[Vec<usize>]| class_count(&colors.concat());
    let mut counts = vec![joint(&colors)];
    let mut rounds = 0;
    while rounds < max_rounds {
        palette.clear();
        let next: Vec<Vec<usize>> = colors
            .iter()
            .zip(&expanded)
            .map(|(cs, (_, adj))| {
                (0..cs.len())
                    .map(|u| {
                        let mut around: Vec<usize> = adj[u].iter().map(|&w| cs[w]).collect();
                        around.sort_unstable();
                        paint(Signature::Refined(cs[u], around), &mut palette)
                    })
                    .collect()
            })
            .collect();
        rounds += 1;
        let count = joint(&next);
        colors = next;
        let stable = count == *counts.last().expect("initial count");
        counts.push(count);
        if stable {
            break;
        }
    }
    colors
        .into_iter()
        .map(|cs| {
            let mut histogram = BTreeMap::new();
            for &c in &cs {
                *histogram.entry(c).or_insert(0) += 1;
            }
            WLColoring {
                class_counts: counts.clone(),
                rounds,
                histogram,
                colors: cs,
            }
        })
        .collect()
}

pub fn wl_isomorphic(a: &Hypergraph, b: &Hypergraph, max_rounds: usize) -> WlVerdict {
    let c = wl_colorings(&[a, b], max_rounds);
    if c[0].histogram == c[1].histogram {
        WlVerdict::IsomorphicIndistinguishable
    } else {
        WlVerdict::Distinguishable
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Largest `n!·m!` the brute-force orbit search accepts.
const ORBIT_LIMIT: usize = 40_320;

/// Whether `b` is a row and column permutation of `a` (brute force).
pub fn same_orbit(a: &Table, b: &Table) -> Result<bool> {
    if (a.n(), a.m()) != (b.n(), b.m()) || a.headers.len() != b.headers.len() {
        return Ok(false);
    }
    let fact = |k: usize| (1..=k).product::<usize>();
    if fact(a.n()).saturating_mul(fact(a.m())) > ORBIT_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "orbit search over a {}x{} table is too large",
            a.n(),
            a.m()
        )));
    }
    let rows = permutations(a.n());
    let cols = permutations(a.m());
    for r in &rows {
        for c in &cols {
            let p = apply_permutation(a, &PermutationAction::new(r.clone(), c.clone())?)?;
            if p.rows == b.rows && p.headers == b.headers && p.caption == b.caption {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Outcome of checking encoder equality against WL indistinguishability.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub pairs: usize,
    pub same_orbit: usize,
    pub encode_equal: usize,
    pub wl_equal: usize,
    /// Same-orbit pairs that were not encode-equal or not WL-indistinguishable.
    pub orbit_violations: usize,
    /// Encode-equal pairs that WL tells apart.
    pub encode_violations: usize,
}

impl TheoremReport {
    pub fn violations(&self) -> usize {
        self.orbit_violations + self.encode_violations
    }
}

/// For each pair: same orbit implies encode-equal and WL-indistinguishable;
/// encode-equal implies WL-indistinguishable. Encode-equal means the table
/// representations lie within `tol` in L2.
pub fn theorem_check<T: Real>(
    encoder: &EncoderParams,
    values: &[Matrix<T>],
    pairs: &[(Table, Table)],
    tol: f64,
) -> Result<TheoremReport> {
    let mut report = TheoremReport::default();
    for (a, b) in pairs {
        let (ha, hb) = (build_hypergraph(a)?, build_hypergraph(b)?);
        let (sa, sb) = (encoder.encode_graph(values, &ha)?, encoder.encode_graph(values, &hb)?);
        let dist = sa
            .s
            .row(ha.table_edge())
            .iter()
            .zip(sb.s.row(hb.table_edge()))
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        let rounds = ha.node_count() + ha.edge_count() + hb.node_count() + hb.edge_count();
        let encode_equal = (ha.n(), ha.m()) == (hb.n(), hb.m()) && dist <= tol;
        let wl_equal = wl_isomorphic(&ha, &hb, rounds) == WlVerdict::IsomorphicIndistinguishable;
        let orbit = same_orbit(a, b)?;
        report.pairs += 1;
        report.same_orbit += orbit as usize;
        report.encode_equal += encode_equal as usize;
        report.wl_equal += wl_equal as usize;
        if orbit && !(encode_equal && wl_equal) {
            report.orbit_violations += 1;
        }
        if encode_equal && !wl_equal {
            report.encode_violations += 1;
        }
    }
    Ok(report)
}

/// `count` table pairs over `alphabet`: a third are row/column permutations
/// of one table, a third differ by one cell swap (same content, usually a
/// different arrangement) and the rest are independent draws. Every table
/// shares `header` for all columns and `caption`.
pub fn theorem_pairs(
    n: usize,
    m: usize,
    alphabet: &[TokenId],
    header: TokenId,
    caption: TokenId,
    count: usize,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<(Table, Table)>> {
    use rand::seq::IndexedRandom;
    use rand::Rng as _;
    if alphabet.is_empty() || n == 0 || m == 0 {
        return Err(Error::InvalidArgument("pairs need a non-empty alphabet and shape".into()));
    }
    let draw = |id: String, rng: &mut crate::rng::Rng| Table {
        id,
        caption: vec![caption],
        headers: vec![vec![header]; m],
        rows: (0..n)
            .map(|_| (0..m).map(|_| vec![*alphabet.choose(rng).expect("non-empty")]).collect())
            .collect(),
    };
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        let a = draw(format!("wl-{k}"), rng);
        let b = match k % 3 {
            0 => apply_permutation(&a, &PermutationAction::random(n, m, rng))?,
            1 => {
                let mut b = a.clone();
                let (i1, j1) = (rng.random_range(0..n), rng.random_range(0..m));
                let (i2, j2) = (rng.random_range(0..n), rng.random_range(0..m));
                let tmp = b.rows[i1][j1].clone();
                b.rows[i1][j1] = b.rows[i2][j2].clone();
                b.rows[i2][j2] = tmp;
                b
            }
            _ => draw(format!("wl-{k}"), rng),
        };
        pairs.push((a, b));
    }
    Ok(pairs)
}
