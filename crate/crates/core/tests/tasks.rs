mod common;

use std::collections::BTreeMap;

use common::model;
use hytrel::encoder::{EncoderParams, RowInit};
use hytrel::hypergraph::PermutationAction;
use hytrel::objectives::Precision;
use hytrel::rng::seeded;
use hytrel::table_io::{RawTable, Table, TruncationLimits, Vocabulary};
use hytrel::tasks::{
    decide, evaluate, finetune, predict, evaluate_predictions, read_labels, synth_dataset, write_labels, FinetuneConfig,
    LabelRecord, PairTarget, SimilarityTarget, Targets, Task, TaskDataset, TaskExample, TaskKind, TaskRegistry,
    TaskSettings, TaskSetup,
};
use hytrel_numerics::{gradient_check, ParamStore};
use proptest::prelude::*;

fn vocab_for(tables: &[RawTable]) -> Vocabulary {
    Vocabulary::build(tables.iter(), 4096).unwrap()
}

fn dataset(kind: TaskKind, size: usize, seed: u64) -> (TaskDataset, Vocabulary) {
    let synth = synth_dataset(kind, size, seed).unwrap();
    let vocab = vocab_for(&synth.tables);
    (synth.parse(&vocab, &TruncationLimits::default()).unwrap(), vocab)
}

fn head(kind: TaskKind, labels: usize, enc: &EncoderParams, store: &mut ParamStore, settings: &TaskSettings) -> Box<dyn Task> {
    TaskRegistry::with_builtins()
        .create(
            kind,
            TaskSetup {
                hidden: enc.config.hidden,
                num_labels: labels,
                settings,
                store,
                rng: &mut seeded(9),
            },
        )
        .unwrap()
}

fn zero_head(store: &mut ParamStore, kind: TaskKind) {
    let id = store.index_of(&format!("task.{kind}.weight")).unwrap();
    store.value_mut(id).data_mut().fill(0.0);
}

fn example_with_targets(table: Table, targets: Targets) -> TaskExample {
    TaskExample { table, targets, other: None }
}

#[test]
fn cta_zero_head_gives_one_half_and_255_types() {
    let (ds, vocab) = dataset(TaskKind::Cta, 20, 1);
    let ex = ds.examples.iter().find(|e| e.table.m() == 3).unwrap().clone();
    let (enc, mut store) = model(vocab.len(), 16, 2, 1, RowInit::Sampled, 1);
    let task = head(TaskKind::Cta, 255, &enc, &mut store, &TaskSettings::default());
    zero_head(&mut store, TaskKind::Cta);
    let scores = task.scores(&enc, &store, &ex, Precision::F64).unwrap();
    assert_eq!(scores.shape(), (3, 255));
    assert!(scores.data().iter().all(|&p| p == 0.5));
}

#[test]
fn cpa_pair_contract_and_shape() {
    let (ds, vocab) = dataset(TaskKind::Cpa, 20, 2);
    let (enc, mut store) = model(vocab.len(), 16, 2, 1, RowInit::Sampled, 2);
    let task = head(TaskKind::Cpa, 121, &enc, &mut store, &TaskSettings::default());
    let table = ds.examples[0].table.clone();
    let pair = |l, r| example_with_targets(table.clone(), Targets::Pairs(vec![PairTarget { left: l, right: r, labels: vec![] }]));
    let z = task.logits(&enc, &store, &pair(0, 1), Precision::F64).unwrap();
    assert_eq!(z.shape(), (1, 121));
    assert!(task.logits(&enc, &store, &pair(1, 1), Precision::F64).is_err());
    assert!(task.logits(&enc, &store, &pair(0, table.m()), Precision::F64).is_err());
    assert!(pair(1, 1).validate(121).is_err());
}

#[test]
fn ttd_ten_classes_and_uniform_loss() {
    let (ds, vocab) = dataset(TaskKind::Ttd, 10, 3);
    let (enc, mut store) = model(vocab.len(), 16, 2, 1, RowInit::Sampled, 3);
    let task = head(TaskKind::Ttd, 10, &enc, &mut store, &TaskSettings::default());
    let ex = &ds.examples[0];
    assert_eq!(task.logits(&enc, &store, ex, Precision::F64).unwrap().shape(), (1, 10));
    zero_head(&mut store, TaskKind::Ttd);
    let (loss, _) = task.example_loss(&enc, &store.values_as::<f64>(), ex, &mut hytrel::encoder::Dropout::off()).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn tsp_symmetrized_head_ignores_pair_order() {
    let (ds, vocab) = dataset(TaskKind::Tsp, 6, 4);
    let (enc, mut store) = model(vocab.len(), 16, 2, 1, RowInit::Sampled, 4);
    let swap = |ex: &TaskExample| {
        let Targets::Similarity(s) = &ex.targets else { unreachable!() };
        TaskExample {
            table: ex.other.clone().unwrap(),
            targets: Targets::Similarity(SimilarityTarget { other: ex.table.id.clone(), similar: s.similar }),
            other: Some(ex.table.clone()),
        }
    };
    let sym = head(TaskKind::Tsp, 1, &enc, &mut store, &TaskSettings::default());
    for ex in &ds.examples {
        let a = sym.logits(&enc, &store, ex, Precision::F64).unwrap();
        let b = sym.logits(&enc, &store, &swap(ex), Precision::F64).unwrap();
        assert_eq!(a.item().to_bits(), b.item().to_bits());
    }
    // the same pair twice: identical feature halves, so order cannot matter either way
    let settings = TaskSettings { symmetrize: false, ..TaskSettings::default() };
    let mut plain_store = model(vocab.len(), 16, 2, 1, RowInit::Sampled, 4).1;
    let plain = head(TaskKind::Tsp, 1, &enc, &mut plain_store, &settings);
    let ex = &ds.examples[1];
    let same = TaskExample {
        table: ex.table.clone(),
        targets: Targets::Similarity(SimilarityTarget { other: ex.table.id.clone(), similar: true }),
        other: Some(ex.table.clone()),
    };
    let z1 = plain.logits(&enc, &plain_store, &same, Precision::F64).unwrap();
    let z2 = plain.logits(&enc, &plain_store, &swap(&same), Precision::F64).unwrap();
    assert_eq!(z1, z2);
    let differs = ds.examples.iter().any(|ex| {
        plain.logits(&enc, &plain_store, ex, Precision::F64).unwrap() != plain.logits(&enc, &plain_store, &swap(ex), Precision::F64).unwrap()
    });
    assert!(differs);
}

#[test]
fn head_gradients_match_finite_differences() {
    for kind in TaskKind::ALL {
        let (ds, vocab) = dataset(kind, 4, 5);
        let (enc, mut store) = model(vocab.len(), 8, 2, 1, RowInit::Sampled, 5);
        let task = head(kind, ds.num_labels, &enc, &mut store, &TaskSettings::default());
        let ex = &ds.examples[0];
        let report = gradient_check(&store, 3e-5, |p: &ParamStore| {
            task.example_loss(&enc, &p.values_as::<f64>(), ex, &mut hytrel::encoder::Dropout::off()).unwrap()
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{kind}: {report:?}");
    }
}

#[test]
fn synthetic_data_is_deterministic_and_well_typed() {
    for kind in TaskKind::ALL {
        assert_eq!(synth_dataset(kind, 10, 7).unwrap(), synth_dataset(kind, 10, 7).unwrap());
        assert_ne!(synth_dataset(kind, 10, 7).unwrap(), synth_dataset(kind, 10, 8).unwrap());
    }
    assert!(synth_dataset(TaskKind::Cta, 0, 1).is_err());
    assert!("sts".parse::<TaskKind>().is_err());

    let ds = synth_dataset(TaskKind::Cta, 200, 7).unwrap();
    let integer = ds.label_names.iter().position(|n| n == "integer").unwrap();
    let mut checked = 0;
    for (t, l) in ds.tables.iter().zip(&ds.labels) {
        let Targets::Columns(cols) = &l.targets else { unreachable!() };
        for (j, ls) in cols.iter().enumerate() {
            if ls == &[integer] {
                for row in &t.rows {
                    row[j].parse::<i64>().unwrap();
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn cta_label_distribution_is_near_uniform() {
    let ds = synth_dataset(TaskKind::Cta, 1000, 11).unwrap();
    let mut counts = vec![0usize; ds.label_names.len()];
    for l in &ds.labels {
        let Targets::Columns(cols) = &l.targets else { unreachable!() };
        for ls in cols {
            for &x in ls {
                counts[x] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let uniform = total as f64 / counts.len() as f64;
    for c in counts {
        assert!((c as f64 - uniform).abs() <= 0.05 * uniform, "{c} vs {uniform}");
    }
}

#[test]
fn labels_sidecar_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    let mut all: Vec<LabelRecord> = Vec::new();
    for kind in TaskKind::ALL {
        all.extend(synth_dataset(kind, 3, 1).unwrap().labels);
    }
    write_labels(&path, &all).unwrap();
    assert_eq!(read_labels(&path).unwrap(), all);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().starts_with(r#"{"table_id":"#));
    std::fs::write(&path, r#"{"table_id":"x","task":"ttd","targets":[1]}"#).unwrap();
    assert!(read_labels(&path).is_err());
}

#[test]
fn evaluate_formula_cases() {
    let cols = |v: Vec<Vec<usize>>| Targets::Columns(v);
    let gold = vec![cols(vec![vec![0], vec![1], vec![2]])];
    let m = evaluate(&gold, &gold, TaskKind::Cta).unwrap();
    assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));

    // TP=2, FP=1, FN=1
    let pred = vec![cols(vec![vec![0], vec![1], vec![1]])];
    let m = evaluate(&pred, &gold, TaskKind::Cta).unwrap();
    assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (2, 1, 1));
    for v in [m.precision, m.recall, m.f1] {
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }

    let none = vec![cols(vec![vec![], vec![], vec![]])];
    assert_eq!(evaluate(&none, &gold, TaskKind::Cta).unwrap().f1, 0.0);
    assert!(evaluate(&gold, &[], TaskKind::Cta).is_err());
    assert!(evaluate(&[Targets::Class(0)], &[Targets::Class(1)], TaskKind::Ttd).unwrap().accuracy == 0.0);
}

fn naive_counts(pred: &[Vec<Vec<usize>>], gold: &[Vec<Vec<usize>>]) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        for (pc, gc) in p.iter().zip(g) {
            for l in 0..8 {
                match (pc.contains(&l), gc.contains(&l)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
        }
    }
    (tp, fp, fneg)
}

fn label_sets() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::btree_set(0usize..8, 0..4).prop_map(|s| s.into_iter().collect()), 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluate_matches_naive_counting(
        pairs in prop::collection::vec((label_sets(), label_sets()), 1..12),
        rot in 0usize..12,
    ) {
        let pred: Vec<Vec<Vec<usize>>> = pairs.iter().map(|p| p.0.clone()).collect();
        let gold: Vec<Vec<Vec<usize>>> = pairs.iter().map(|p| p.1.clone()).collect();
        let (tp, fp, fneg) = naive_counts(&pred, &gold);
        let wrap = |v: &[Vec<Vec<usize>>]| v.iter().cloned().map(Targets::Columns).collect::<Vec<_>>();
        let m = evaluate(&wrap(&pred), &wrap(&gold), TaskKind::Cta).unwrap();
        prop_assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (tp, fp, fneg));
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        prop_assert_eq!(m.precision, p);
        prop_assert_eq!(m.recall, r);
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }

        // example order does not matter
        let k = rot % pred.len();
        let (mut pr, mut gr) = (pred.clone(), gold.clone());
        pr.rotate_left(k);
        gr.rotate_left(k);
        let m2 = evaluate(&wrap(&pr), &wrap(&gr), TaskKind::Cta).unwrap();
        prop_assert_eq!(m, m2);
    }
}

#[test]
fn predictions_survive_table_permutations() {
    let mut rng = seeded(21);
    for kind in TaskKind::ALL {
        let (ds, vocab) = dataset(kind, 8, 21);
        let (enc, mut store) = model(vocab.len(), 16, 2, 2, RowInit::Sampled, 21);
        let task = head(kind, ds.num_labels, &enc, &mut store, &TaskSettings::default());
        for ex in &ds.examples {
            let a = PermutationAction::random(ex.table.n(), ex.table.m(), &mut rng);
            let b = ex.other.as_ref().map(|o| PermutationAction::random(o.n(), o.m(), &mut rng));
            let pex = ex.permuted(&a, b.as_ref()).unwrap();
            let z = task.logits(&enc, &store, ex, Precision::F32).unwrap();
            let pz = task.logits(&enc, &store, &pex, Precision::F32).unwrap();
            // CTA rows follow the columns
            let z = if kind == TaskKind::Cta {
                hytrel_numerics::Matrix::from_rows(&a.sigma_col.iter().map(|&j| z.row(j).to_vec()).collect::<Vec<_>>())
            } else {
                z
            };
            let drift = z.data().iter().zip(pz.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(drift <= 1e-5, "{kind}: drift {drift}");
            let d = decide(&hytrel::tasks::activate(kind, &z), &pex.targets, 0.5);
            let pd = decide(&hytrel::tasks::activate(kind, &pz), &pex.targets, 0.5);
            assert_eq!(d, pd);
        }
    }
}

#[test]
fn finetuning_fits_a_small_cta_set() {
    let (ds, vocab) = dataset(TaskKind::Cta, 96, 31);
    let (enc, mut store) = model(vocab.len(), 16, 2, 1, RowInit::Sampled, 31);
    let task = head(TaskKind::Cta, ds.num_labels, &enc, &mut store, &TaskSettings::default());
    let before = predict(task.as_ref(), &enc, &store, &ds.examples, Precision::F64, false).unwrap();
    let cfg = FinetuneConfig { epochs: 6, batch_size: 8, learning_rate: 3e-3, ..FinetuneConfig::default() };
    let mut epochs = 0;
    let log = finetune(task.as_ref(), &enc, &mut store, &ds.examples, &cfg, |_, _| {
        epochs += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(epochs, 6);
    assert_eq!(log.len(), 6 * 12);
    let after = predict(task.as_ref(), &enc, &store, &ds.examples, Precision::F64, false).unwrap();
    let f_before = evaluate_predictions(&before, &ds.examples, 0.5).unwrap().f1;
    let f_after = evaluate_predictions(&after, &ds.examples, 0.5).unwrap().f1;
    assert!(f_after > f_before && f_after > 0.8, "{f_before} -> {f_after}");
    let first: f64 = log[..12].iter().map(|r| r.loss).sum();
    let last: f64 = log[log.len() - 12..].iter().map(|r| r.loss).sum();
    assert!(last < first);
}

#[test]
fn frozen_encoder_only_moves_the_head() {
    let (ds, vocab) = dataset(TaskKind::Ttd, 10, 41);
    let (enc, mut store) = model(vocab.len(), 8, 2, 1, RowInit::Sampled, 41);
    let task = head(TaskKind::Ttd, ds.num_labels, &enc, &mut store, &TaskSettings::default());
    let before = store.clone();
    let cfg = FinetuneConfig { epochs: 1, batch_size: 5, freeze_encoder: true, ..FinetuneConfig::default() };
    finetune(task.as_ref(), &enc, &mut store, &ds.examples, &cfg, |_, _| Ok(())).unwrap();
    let moved: BTreeMap<&str, bool> = before
        .entries()
        .iter()
        .zip(store.entries())
        .map(|(a, b)| (a.name.as_str(), a.value != b.value))
        .collect();
    assert!(moved.iter().all(|(name, &m)| m == name.starts_with("task.")), "{moved:?}");
}

#[test]
fn assemble_rejects_dangling_labels() {
    let synth = synth_dataset(TaskKind::Tsp, 2, 1).unwrap();
    let vocab = vocab_for(&synth.tables);
    let tables = hytrel::table_io::parse_corpus(&synth.tables[..1], &vocab, &TruncationLimits::default()).unwrap();
    assert!(TaskDataset::assemble(TaskKind::Tsp, &tables, &synth.labels, None).is_err());
    let bad = vec![LabelRecord {
        table_id: tables[0].id.clone(),
        task: TaskKind::Cta,
        targets: Targets::Columns(vec![vec![0]; tables[0].m() + 1]),
    }];
    assert!(TaskDataset::assemble(TaskKind::Cta, &tables, &bad, None).is_err());
}
