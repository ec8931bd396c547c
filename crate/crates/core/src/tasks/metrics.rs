use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{TaskKind, Targets};
use crate::error::{Error, Result};

/// Micro-averaged precision, recall and F1 over label instances, plus
/// accuracy (exact match per column, pair, table or table pair).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Label instances as `(unit, label)` with units numbered in order.
fn instances(t: &Targets, unit_base: usize) -> (BTreeSet<(usize, usize)>, usize) {
    let mut out = BTreeSet::new();
    let units = match t {
        Targets::Columns(cols) => {
            for (j, ls) in cols.iter().enumerate() {
                out.extend(ls.iter().map(|&l| (unit_base + j, l)));
            }
            cols.len()
        }
        Targets::Pairs(pairs) => {
            for (k, p) in pairs.iter().enumerate() {
                out.extend(p.labels.iter().map(|&l| (unit_base + k, l)));
            }
            pairs.len()
        }
        Targets::Class(c) => {
            out.insert((unit_base, *c));
            1
        }
        Targets::Similarity(s) => {
            if s.similar {
                out.insert((unit_base, 0));
            }
            1
        }
    };
    (out, units)
}

fn same_shape(p: &Targets, g: &Targets) -> bool {
    match (p, g) {
        (Targets::Columns(a), Targets::Columns(b)) => a.len() == b.len(),
        (Targets::Pairs(a), Targets::Pairs(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x.left, x.right) == (y.left, y.right))
        }
        (Targets::Class(_), Targets::Class(_)) => true,
        (Targets::Similarity(a), Targets::Similarity(b)) => a.other == b.other,
        _ => false,
    }
}

pub fn evaluate(predictions: &[Targets], gold: &[Targets], kind: TaskKind) -> Result<Metrics> {
    if predictions.len() != gold.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} gold examples",
            predictions.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    let (mut exact, mut units) = (0, 0);
    for (k, (p, g)) in predictions.iter().zip(gold).enumerate() {
        if g.kind() != kind || !same_shape(p, g) {
            return Err(Error::InvalidArgument(format!(
                "example {k}: prediction does not line up with a {kind} gold target"
            )));
        }
        let (ps, n) = instances(p, 0);
        let (gs, _) = instances(g, 0);
        tp += ps.intersection(&gs).count();
        fp += ps.difference(&gs).count();
        fneg += gs.difference(&ps).count();
        units += n;
        exact += (0..n)
            .filter(|u| ps.range((*u, 0)..=(*u, usize::MAX)).eq(gs.range((*u, 0)..=(*u, usize::MAX))))
            .count();
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        accuracy: ratio(exact, units),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
    })
}
