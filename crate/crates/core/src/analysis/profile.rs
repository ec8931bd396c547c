use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use hytrel_numerics::{Matrix, Real};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::hypergraph::build_hypergraph;
use crate::rng::Rng;
use crate::table_io::{Table, TokenId, UNK};

/// Untimed calls before each measurement.
pub const WARMUP_CALLS: usize = 2;

/// `n × m` table of single random non-reserved tokens (`[unk]` when the
/// vocabulary has nothing else).
pub fn random_table(id: &str, n: usize, m: usize, vocab_size: usize, rng: &mut Rng) -> Table {
    let top = vocab_size as TokenId;
    let mut token = || vec![if top > UNK + 1 { rng.random_range(UNK + 1..top) } else { UNK }];
    Table {
        id: id.to_string(),
        caption: token(),
        headers: (0..m).map(|_| token()).collect(),
        rows: (0..n).map(|_| (0..m).map(|_| token()).collect()).collect(),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        (xs[k / 2 - 1] + xs[k / 2]) / 2.0
    }
}

/// Median wall time in seconds of one layer applied to `table`'s initial state.
pub fn time_layer<T: Real>(encoder: &EncoderParams, values: &[Matrix<T>], table: &Table, reps: usize) -> Result<f64> {
    if reps == 0 {
        return Err(Error::InvalidArgument("at least one timing repetition is required".into()));
    }
    let hg = build_hypergraph(table)?;
    let state = encoder.init_embeddings(values, &hg)?;
    for _ in 0..WARMUP_CALLS {
        std::hint::black_box(encoder.hypertrans_layer(values, &state, &hg)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        std::hint::black_box(encoder.hypertrans_layer(values, &state, &hg)?);
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n: usize,
    pub m: usize,
    pub nm: usize,
    pub hidden: usize,
    pub reps: usize,
    pub median_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<TimingRow>,
    /// Time ratio between each consecutive pair of sizes.
    pub ratios: Vec<f64>,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,m,nm,hidden,reps,median_secs,ratio_to_previous\n");
        for (k, r) in self.rows.iter().enumerate() {
            let ratio = if k == 0 { String::new() } else { format!("{:.4}", self.ratios[k - 1]) };
            out.push_str(&format!(
                "{},{},{},{},{},{:e},{}\n",
                r.n, r.m, r.nm, r.hidden, r.reps, r.median_secs, ratio
            ));
        }
        out
    }
}

/// Times one layer on a random table of each size.
pub fn profile_scaling<T: Real>(
    encoder: &EncoderParams,
    values: &[Matrix<T>],
    sizes: &[(usize, usize)],
    reps: usize,
    rng: &mut Rng,
) -> Result<ScalingReport> {
    if sizes.windows(2).any(|w| w[0].0 * w[0].1 > w[1].0 * w[1].1) {
        return Err(Error::InvalidArgument("sizes must be sorted ascending by n·m".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &(n, m) in sizes {
        let table = random_table(&format!("profile-{n}x{m}"), n, m, encoder.config.vocab_size, rng);
        rows.push(TimingRow {
            n,
            m,
            nm: n * m,
            hidden: encoder.config.hidden,
            reps,
            median_secs: time_layer(encoder, values, &table, reps)?,
        });
    }
    let ratios = rows.windows(2).map(|w| w[1].median_secs / w[0].median_secs).collect();
    Ok(ScalingReport { rows, ratios })
}
