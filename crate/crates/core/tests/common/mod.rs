#![allow(dead_code)]

use hytrel::encoder::{BlockIds, EncoderParams, LayerIds, ModelConfig, RowInit};
use hytrel::rng::{seeded, Rng};
use hytrel::table_io::{Table, TokenId};
use hytrel_numerics::{Matrix, ParamStore};
use rand::Rng as _;

pub fn random_table(rng: &mut Rng, id: &str, n: usize, m: usize, vocab: usize) -> Table {
    let mut text = |max_len: usize| -> Vec<TokenId> {
        let len = rng.random_range(1..=max_len);
        (0..len).map(|_| rng.random_range(2..vocab as TokenId)).collect()
    };
    Table {
        id: id.to_string(),
        caption: text(3),
        headers: (0..m).map(|_| text(2)).collect(),
        rows: (0..n).map(|_| (0..m).map(|_| text(3)).collect()).collect(),
    }
}

pub fn model(vocab: usize, hidden: usize, heads: usize, layers: usize, row_init: RowInit, seed: u64) -> (EncoderParams, ParamStore) {
    let config = ModelConfig {
        vocab_size: vocab,
        hidden,
        heads,
        layers,
        row_init,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(&config, &mut store, &mut seeded(seed)).unwrap();
    (enc, store)
}

fn vecmat(x: &[f64], w: &Matrix<f64>) -> Vec<f64> {
    (0..w.cols())
        .map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn norm(v: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    (0..v.len()).map(|k| gain[k] * (v[k] - mean) * inv + bias[k]).collect()
}

/// Straight-line attention pooling over an explicit list of member vectors.
fn pool(store: &ParamStore, b: &BlockIds, heads: usize, members: &[Vec<f64>]) -> Vec<f64> {
    let omega = store.value(b.query).row(0).to_vec();
    let f = omega.len();
    let dh = f / heads;
    let mut concat = vec![0.0; f];
    if !members.is_empty() {
        let keys: Vec<Vec<f64>> = members.iter().map(|x| vecmat(x, store.value(b.w_key))).collect();
        let vals: Vec<Vec<f64>> = members.iter().map(|x| vecmat(x, store.value(b.w_value))).collect();
        for h in 0..heads {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| (h * dh..(h + 1) * dh).map(|c| omega[c] * k[c]).sum())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (a, v) in exps.iter().zip(&vals) {
                for c in h * dh..(h + 1) * dh {
                    concat[c] += a / z * v[c];
                }
            }
        }
    }
    let row = |id| store.value(id).row(0).to_vec();
    let y = norm(&add(&omega, &concat), &row(b.ln1_gain), &row(b.ln1_bias));
    let hidden: Vec<f64> = add(&vecmat(&y, store.value(b.ffn_w1)), &row(b.ffn_b1))
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let ffn = add(&vecmat(&hidden, store.value(b.ffn_w2)), &row(b.ffn_b2));
    norm(&add(&y, &ffn), &row(b.ln2_gain), &row(b.ln2_bias))
}

/// One layer written against the dense incidence matrix `b` (nodes × hyperedges).
pub fn dense_layer(
    store: &ParamStore,
    ids: &LayerIds,
    heads: usize,
    b: &Matrix<f64>,
    x: &Matrix<f64>,
    s: &Matrix<f64>,
) -> (Matrix<f64>, Matrix<f64>) {
    let (nv, ne) = b.shape();
    let f = x.cols();
    let mut s_new = Matrix::zeros(ne, f);
    for e in 0..ne {
        let members: Vec<Vec<f64>> = (0..nv).filter(|&v| b.get(v, e) == 1.0).map(|v| x.row(v).to_vec()).collect();
        let pooled = pool(store, &ids.node_to_edge, heads, &members);
        let mut cat = s.row(e).to_vec();
        cat.extend(pooled);
        let row = |id| store.value(id).row(0).to_vec();
        let h: Vec<f64> = add(&vecmat(&cat, store.value(ids.fuse_w1)), &row(ids.fuse_b1))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let out = add(&vecmat(&h, store.value(ids.fuse_w2)), &row(ids.fuse_b2));
        s_new.row_mut(e).copy_from_slice(&out);
    }
    let mut x_new = x.clone();
    for v in 0..nv {
        let members: Vec<Vec<f64>> = (0..ne).filter(|&e| b.get(v, e) == 1.0).map(|e| s_new.row(e).to_vec()).collect();
        if members.is_empty() {
            continue;
        }
        let out = pool(store, &ids.edge_to_node, heads, &members);
        x_new.row_mut(v).copy_from_slice(&out);
    }
    (x_new, s_new)
}

pub fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn synthetic_vocab(size: usize) -> hytrel::table_io::Vocabulary {
    use hytrel::table_io::{VocabRecord, PAD_TOKEN, UNK_TOKEN};
    let records = (0..size)
        .map(|i| VocabRecord {
            token: match i {
                0 => PAD_TOKEN.to_string(),
                1 => UNK_TOKEN.to_string(),
                _ => format!("w{i}"),
            },
            id: i as TokenId,
            count: 1,
        })
        .collect();
    hytrel::table_io::Vocabulary::from_records(records).unwrap()
}

/// Overwrites every parameter whose name starts with `prefix` with uniform
/// noise in [-0.5, 0.5), so zero-initialized heads pass gradient to the encoder.
pub fn perturb_params(store: &mut ParamStore, prefix: &str, seed: u64) {
    let mut rng = seeded(seed);
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
    for name in names {
        let id = store.index_of(&name).expect("listed name");
        for v in store.value_mut(id).data_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
    }
}
