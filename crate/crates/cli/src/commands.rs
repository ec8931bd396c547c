use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::json;

use hytrel::analysis::{
    excessive_invariance_probe, permutation_distance, profile_scaling, random_table, theorem_check, theorem_pairs,
    DistanceReport,
};
use hytrel::encoder::{embedding_records, EncoderParams, ModelConfig, RowInit};
use hytrel::objectives::{
    corruption_auc, sibling_retrieval, ContrastiveObjective, ElectraObjective, ObjectiveRegistry, ObjectiveSetup,
    Precision,
};
use hytrel::rng::substream;
use hytrel::table_io::{parse_corpus, read_corpus, write_corpus, RawTable, Table, TokenId, Vocabulary, UNK};
use hytrel::tasks::{
    evaluate_predictions, finetune, predict, read_labels, synth_corpus, synth_dataset, write_labels, TaskDataset,
    TaskKind, TaskRegistry, TaskSetup,
};
use hytrel::training::{load_checkpoint, loss_log_csv, moving_average_tail, Checkpoint, Trainer};
use hytrel_numerics::{Matrix, ParamStore};

use crate::config::{RunConfig, SEED_ENV};
use crate::run_dir::{Inputs, RunDir};
use crate::{Cli, Command, Failure};

/// Permutation distance bounds for the invariance check.
pub const F32_TOLERANCE: f64 = 1e-5;
pub const F64_TOLERANCE: f64 = 1e-10;

pub fn dispatch(cli: Cli, args: Vec<String>) -> Result<PathBuf, Failure> {
    let out = cli
        .global
        .out
        .clone()
        .ok_or_else(|| Failure::usage(format!("{} needs --out DIR", cli.command.name())))?;
    let cfg = RunConfig::load(cli.global.config.as_deref())?.resolve(
        cli.global.seed,
        cli.global.workers,
        std::env::var(SEED_ENV).ok(),
    )?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    let mut inputs = Inputs::default();
    if let Some(path) = &cli.global.config {
        inputs.add("config", path)?;
    }
    let run = Run {
        out,
        command: cli.command.name(),
        args,
        inputs,
    };
    match cli.command {
        Command::BuildVocab { corpus, size } => build_vocab(run, cfg, &corpus, size),
        Command::Pretrain {
            objective,
            corpus,
            vocab,
            resume,
            steps,
            epochs,
            batch_size,
            lr,
            holdout,
        } => {
            let mut cfg = cfg;
            if let Some(o) = objective {
                cfg.train.objective = o;
            }
            if steps.is_some() {
                cfg.train.max_steps = steps;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if lr.is_some() {
                cfg.train.learning_rate = lr;
            }
            pretrain(run, cfg, &corpus, vocab.as_deref(), resume.as_deref(), holdout)
        }
        Command::Embed { checkpoint, corpus } => embed(run, cfg, &checkpoint, &corpus),
        Command::Finetune {
            task,
            corpus,
            labels,
            checkpoint,
            vocab,
            num_labels,
            epochs,
            batch_size,
            lr,
            split,
            freeze_encoder,
        } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.finetune.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.finetune.learning_rate = l;
            }
            cfg.finetune.freeze_encoder |= freeze_encoder;
            let files = FinetuneInputs {
                corpus: &corpus,
                labels: &labels,
                checkpoint: checkpoint.as_deref(),
                vocab: vocab.as_deref(),
            };
            finetune_cmd(run, cfg, task, files, num_labels, split)
        }
        Command::Synth { task, size } => synth(run, cfg, &task, size),
        Command::VerifyInvariance {
            tables,
            perms,
            checkpoint,
        } => verify_invariance(run, cfg, tables, perms, checkpoint.as_deref()),
        Command::ProbeExcessive {
            tables,
            shuffles,
            rows,
            cols,
            tolerance,
            required,
        } => probe_excessive(run, cfg, ProbeArgs { tables, shuffles, rows, cols, tolerance, required }),
        Command::WlCheck {
            pairs,
            rows,
            cols,
            alphabet,
        } => wl_check(run, cfg, pairs, rows, cols, alphabet),
        Command::Profile { sizes, reps } => profile(run, cfg, &sizes, reps),
    }
}

struct Run {
    out: PathBuf,
    command: &'static str,
    args: Vec<String>,
    inputs: Inputs,
}

impl Run {
    fn add_input(&mut self, role: &str, path: &Path) -> Result<(), Failure> {
        self.inputs.add(role, path)
    }

    /// Called once every input is read and validated, so failed argument
    /// checks leave no directory behind.
    fn open(self, cfg: &RunConfig) -> Result<RunDir, Failure> {
        RunDir::create(&self.out, self.command, self.args, cfg.seed(), cfg.to_toml()?, self.inputs)
    }
}

fn read_raw(run: &mut Run, path: &Path) -> Result<Vec<RawTable>, Failure> {
    run.add_input("corpus", path)?;
    Ok(read_corpus(path)?)
}

fn vocab_for(run: &mut Run, cfg: &RunConfig, path: Option<&Path>, raw: &[RawTable]) -> Result<Vocabulary, Failure> {
    match path {
        Some(p) => {
            run.add_input("vocab", p)?;
            Ok(Vocabulary::load_jsonl(p)?)
        }
        None => Ok(Vocabulary::build(raw.iter(), cfg.vocab_size)?),
    }
}

fn fresh_encoder(model: &ModelConfig, seed: u64) -> Result<(EncoderParams, ParamStore), Failure> {
    let mut store = ParamStore::new();
    let enc = EncoderParams::init(model, &mut store, &mut substream(seed, "encoder-init", 0))?;
    Ok((enc, store))
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String, Failure> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Failure::data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn build_vocab(mut run: Run, mut cfg: RunConfig, corpus: &Path, size: Option<usize>) -> Result<PathBuf, Failure> {
    if let Some(s) = size {
        cfg.vocab_size = s;
    }
    let raw = read_raw(&mut run, corpus)?;
    let vocab = Vocabulary::build(raw.iter(), cfg.vocab_size)?;
    let mut dir = run.open(&cfg)?;
    vocab.save_jsonl(&dir.file("vocab.jsonl"))?;
    dir.adopt("vocab.jsonl")?;
    dir.write_json("summary.json", &json!({ "tables": raw.len(), "vocab_size": vocab.len() }))?;
    dir.finish()
}

fn pretrain(
    mut run: Run,
    mut cfg: RunConfig,
    corpus: &Path,
    vocab_path: Option<&Path>,
    resume: Option<&Path>,
    holdout: f64,
) -> Result<PathBuf, Failure> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(Failure::usage(format!("holdout must be in [0, 1), got {holdout}")));
    }
    cfg.train.validate()?;
    cfg.objective.validate()?;
    let raw = read_raw(&mut run, corpus)?;
    let ckpt: Option<Checkpoint> = match resume {
        Some(p) => {
            run.add_input("checkpoint", p)?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let vocab = match &ckpt {
        Some(c) => Vocabulary::from_records(c.vocab.clone())?,
        None => vocab_for(&mut run, &cfg, vocab_path, &raw)?,
    };
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate()?;
    let tables = parse_corpus(&raw, &vocab, &cfg.limits)?;
    let cut = tables.len() - (tables.len() as f64 * holdout).round() as usize;
    let (train, held) = tables.split_at(cut);
    let registry = ObjectiveRegistry::with_builtins();
    let mut trainer = match ckpt {
        Some(c) => Trainer::from_checkpoint(&registry, c, train)?,
        None => Trainer::new(
            &registry,
            cfg.model.clone(),
            cfg.train.clone(),
            cfg.objective.clone(),
            vocab.clone(),
            train,
        )?,
    };
    let mut dir = run.open(&cfg)?;
    vocab.save_jsonl(&dir.file("vocab.jsonl"))?;
    dir.adopt("vocab.jsonl")?;
    let log = trainer.run(train, Some(&dir.path), |r| {
        if r.step % 50 == 0 {
            eprintln!("step {} epoch {} loss {:.5}", r.step, r.epoch, r.loss);
        }
    })?;
    let mut written: Vec<String> = std::fs::read_dir(&dir.path)
        .map_err(|e| Failure::data(e.to_string()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".hytb") || n == "loss_log.csv")
        .collect();
    written.sort();
    for name in &written {
        dir.adopt(name)?;
    }
    let held_metric = if held.is_empty() {
        serde_json::Value::Null
    } else {
        let mut store = trainer.store.clone();
        let setup = ObjectiveSetup {
            model: &trainer.model,
            settings: &trainer.settings,
            corpus: train,
            store: &mut store,
            rng: &mut substream(cfg.seed(), "head-init", 0),
        };
        let seed = cfg.seed();
        match trainer.train.objective.as_str() {
            "electra" => {
                let o = ElectraObjective::setup(setup)?;
                json!({ "tables": held.len(), "corruption_auc": corruption_auc(&o, &trainer.encoder, &trainer.store, held, seed)? })
            }
            _ => {
                let o = ContrastiveObjective::setup(setup)?;
                let r = sibling_retrieval(&o, &trainer.encoder, &trainer.store, held, trainer.train.batch_size, seed)?;
                json!({ "tables": held.len(), "sibling_retrieval": r })
            }
        }
    };
    let metrics = json!({
        "objective": trainer.train.objective,
        "steps": trainer.step,
        "epochs_completed": trainer.epoch,
        "initial_loss": log.first().map(|r| r.loss),
        "final_loss": log.last().map(|r| r.loss),
        "final_moving_average_50": (!log.is_empty()).then(|| moving_average_tail(&log, 50)),
        "heldout": held_metric,
    });
    dir.write_json("metrics.json", &metrics)?;
    dir.finish()
}

fn embed(mut run: Run, mut cfg: RunConfig, checkpoint: &Path, corpus: &Path) -> Result<PathBuf, Failure> {
    run.add_input("checkpoint", checkpoint)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let raw = read_raw(&mut run, corpus)?;
    let vocab = Vocabulary::from_records(ckpt.vocab.clone())?;
    let encoder = EncoderParams::locate(&ckpt.model, &ckpt.params)?;
    cfg.model = ckpt.model.clone();
    let tables = parse_corpus(&raw, &vocab, &cfg.limits)?;
    let mut records = Vec::new();
    for t in &tables {
        let hg = hytrel::hypergraph::build_hypergraph(t)?;
        records.extend(match cfg.train.precision {
            Precision::F32 => embedding_records(&hg, &encoder.encode_graph(&ckpt.params.values_as::<f32>(), &hg)?),
            Precision::F64 => embedding_records(&hg, &encoder.encode_graph(&ckpt.params.values_as::<f64>(), &hg)?),
        });
    }
    let mut dir = run.open(&cfg)?;
    dir.write("embeddings.jsonl", jsonl(&records)?)?;
    dir.write_json(
        "summary.json",
        &json!({ "tables": tables.len(), "records": records.len(), "hidden": ckpt.model.hidden }),
    )?;
    dir.finish()
}

struct FinetuneInputs<'a> {
    corpus: &'a Path,
    labels: &'a Path,
    checkpoint: Option<&'a Path>,
    vocab: Option<&'a Path>,
}

fn finetune_cmd(
    mut run: Run,
    mut cfg: RunConfig,
    kind: TaskKind,
    files: FinetuneInputs,
    num_labels: Option<usize>,
    split: f64,
) -> Result<PathBuf, Failure> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Failure::usage(format!("split must be in (0, 1), got {split}")));
    }
    cfg.finetune.validate()?;
    let raw = read_raw(&mut run, files.corpus)?;
    run.add_input("labels", files.labels)?;
    let labels = read_labels(files.labels)?;
    let (vocab, encoder, mut store) = match files.checkpoint {
        Some(p) => {
            run.add_input("checkpoint", p)?;
            let ckpt = load_checkpoint(p)?;
            cfg.model = ckpt.model.clone();
            let encoder = EncoderParams::locate(&ckpt.model, &ckpt.params)?;
            (Vocabulary::from_records(ckpt.vocab)?, encoder, ckpt.params)
        }
        None => {
            let vocab = vocab_for(&mut run, &cfg, files.vocab, &raw)?;
            cfg.model.vocab_size = vocab.len();
            cfg.model.validate()?;
            let (enc, store) = fresh_encoder(&cfg.model, cfg.seed())?;
            (vocab, enc, store)
        }
    };
    let tables = parse_corpus(&raw, &vocab, &cfg.limits)?;
    let data = TaskDataset::assemble(kind, &tables, &labels, num_labels)?;
    let (train, test) = data.split(split, cfg.seed());
    if train.examples.is_empty() || test.examples.is_empty() {
        return Err(Failure::usage(format!(
            "split {split} of {} examples leaves an empty side",
            data.examples.len()
        )));
    }
    let task = TaskRegistry::with_builtins().create(
        kind,
        TaskSetup {
            hidden: cfg.model.hidden,
            num_labels: data.num_labels,
            settings: &cfg.task,
            store: &mut store,
            rng: &mut substream(cfg.seed(), "task-head-init", 0),
        },
    )?;
    let mut dir = run.open(&cfg)?;
    let log = finetune(task.as_ref(), &encoder, &mut store, &train.examples, &cfg.finetune, |epoch, _| {
        eprintln!("epoch {epoch} done");
        Ok(())
    })?;
    let preds = predict(
        task.as_ref(),
        &encoder,
        &store,
        &test.examples,
        cfg.train.precision,
        cfg.workers > 1,
    )?;
    let metrics = evaluate_predictions(&preds, &test.examples, cfg.task.threshold)?;
    dir.write("predictions.jsonl", jsonl(&preds)?)?;
    dir.write("finetune_log.csv", loss_log_csv(&log))?;
    dir.write_json(
        "metrics.json",
        &json!({
            "task": kind,
            "num_labels": data.num_labels,
            "train_examples": train.examples.len(),
            "test_examples": test.examples.len(),
            "metrics": metrics,
        }),
    )?;
    dir.finish()
}

fn synth(run: Run, cfg: RunConfig, task: &str, size: usize) -> Result<PathBuf, Failure> {
    if size == 0 {
        return Err(Failure::usage("size must be at least 1".into()));
    }
    let seed = cfg.seed();
    if task == "corpus" {
        let tables = synth_corpus(size, seed)?;
        let mut dir = run.open(&cfg)?;
        write_corpus(&dir.file("corpus.jsonl"), &tables)?;
        dir.adopt("corpus.jsonl")?;
        return dir.finish();
    }
    let kind: TaskKind = task.parse()?;
    let data = synth_dataset(kind, size, seed)?;
    let mut dir = run.open(&cfg)?;
    write_corpus(&dir.file("corpus.jsonl"), &data.tables)?;
    dir.adopt("corpus.jsonl")?;
    write_labels(&dir.file("labels.jsonl"), &data.labels)?;
    dir.adopt("labels.jsonl")?;
    dir.write_json("label_names.json", &data.label_names)?;
    dir.finish()
}

/// Synthetic tables and a vocabulary built from them.
fn synthetic_tables(cfg: &RunConfig, count: usize, vocab: Option<&Vocabulary>) -> Result<(Vec<Table>, Vocabulary), Failure> {
    let raw = synth_corpus(count, cfg.seed())?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::build(raw.iter(), cfg.vocab_size)?,
    };
    Ok((parse_corpus(&raw, &vocab, &cfg.limits)?, vocab))
}

/// The same parameters with every row hyperedge reading one shared vector.
fn with_shared_rows(model: &ModelConfig, store: &ParamStore, seed: u64) -> Result<(EncoderParams, ParamStore), Failure> {
    let mut shared = model.clone();
    shared.row_init = RowInit::Shared;
    let mut store = store.clone();
    if store.index_of("embedding.row").is_none() {
        let dist = Normal::new(0.0, model.row_init_std).map_err(|e| Failure::usage(e.to_string()))?;
        let mut rng = substream(seed, "shared-row", 0);
        let row = Matrix::from_vec(1, model.hidden, (0..model.hidden).map(|_| dist.sample(&mut rng)).collect());
        store.push("embedding.row", row, false);
    }
    Ok((EncoderParams::locate(&shared, &store)?, store))
}

fn verify_invariance(
    mut run: Run,
    mut cfg: RunConfig,
    tables: usize,
    perms: usize,
    checkpoint: Option<&Path>,
) -> Result<PathBuf, Failure> {
    if tables == 0 || perms == 0 {
        return Err(Failure::usage("tables and perms must be at least 1".into()));
    }
    let ckpt = match checkpoint {
        Some(p) => {
            run.add_input("checkpoint", p)?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let given = ckpt.as_ref().map(|c| Vocabulary::from_records(c.vocab.clone())).transpose()?;
    let (tables, vocab) = synthetic_tables(&cfg, tables, given.as_ref())?;
    let (encoder, store) = match ckpt {
        Some(c) => {
            cfg.model = c.model.clone();
            (EncoderParams::locate(&c.model, &c.params)?, c.params)
        }
        None => {
            cfg.model.vocab_size = vocab.len();
            cfg.model.validate()?;
            fresh_encoder(&cfg.model, cfg.seed())?
        }
    };
    let (shared_enc, shared_store) = with_shared_rows(&cfg.model, &store, cfg.seed())?;
    let (v32, v64) = (store.values_as::<f32>(), shared_store.values_as::<f64>());
    let (mut r32, mut r64) = (DistanceReport::default(), DistanceReport::default());
    for (k, t) in tables.iter().enumerate() {
        let mut rng = substream(cfg.seed(), "invariance", k as u64);
        r32.merge(&permutation_distance(t, &encoder, &v32, perms, &mut rng)?);
        let mut rng = substream(cfg.seed(), "invariance", k as u64);
        r64.merge(&permutation_distance(t, &shared_enc, &v64, perms, &mut rng)?);
    }
    let pass32 = r32.max() <= F32_TOLERANCE;
    let pass64 = r64.max() <= F64_TOLERANCE;
    let mut dir = run.open(&cfg)?;
    dir.write("distances_f32.csv", r32.to_csv())?;
    dir.write("distances_f64.csv", r64.to_csv())?;
    dir.write_json(
        "invariance.json",
        &json!({
            "tables": tables.len(),
            "perms_per_mode": perms,
            "f32": { "max": r32.max(), "tolerance": F32_TOLERANCE, "pass": pass32, "report": r32 },
            "f64_shared_rows": { "max": r64.max(), "tolerance": F64_TOLERANCE, "pass": pass64, "report": r64 },
            "pass": pass32 && pass64,
        }),
    )?;
    eprintln!("f32 max {:e} ({}), f64 max {:e} ({})", r32.max(), verdict(pass32), r64.max(), verdict(pass64));
    let path = dir.finish()?;
    if pass32 && pass64 {
        Ok(path)
    } else {
        Err(Failure::numeric("permutation distances exceed tolerance".into()))
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

struct ProbeArgs {
    tables: usize,
    shuffles: usize,
    rows: usize,
    cols: usize,
    tolerance: f64,
    required: f64,
}

fn probe_excessive(run: Run, mut cfg: RunConfig, a: ProbeArgs) -> Result<PathBuf, Failure> {
    if a.tables == 0 || a.shuffles == 0 || a.rows == 0 || a.cols == 0 {
        return Err(Failure::usage("tables, shuffles, rows and cols must be at least 1".into()));
    }
    cfg.model.vocab_size = cfg.vocab_size;
    cfg.model.validate()?;
    let (encoder, store) = fresh_encoder(&cfg.model, cfg.seed())?;
    let values = store.values_as::<f64>();
    let mut rng = substream(cfg.seed(), "probe", 0);
    let mut csv = String::from("table_id,a_row,a_col,b_row,b_col,absolute,relative\n");
    let (mut skipped, mut probed, mut passing) = (0, 0, 0);
    for k in 0..a.tables {
        let t = random_table(&format!("probe-{k}"), a.rows, a.cols, cfg.vocab_size, &mut rng);
        let r = excessive_invariance_probe(&t, &encoder, &values, a.shuffles, &mut rng)?;
        if let Some(note) = &r.skipped {
            eprintln!("skipped: {note}");
            skipped += 1;
            continue;
        }
        probed += 1;
        passing += usize::from(r.min_relative() > a.tolerance);
        for s in &r.shifts {
            csv.push_str(&format!(
                "{},{},{},{},{},{:e},{:e}\n",
                r.table_id, s.swap.a.0, s.swap.a.1, s.swap.b.0, s.swap.b.1, s.absolute, s.relative
            ));
        }
    }
    let fraction = if probed == 0 { 0.0 } else { passing as f64 / probed as f64 };
    let pass = probed > 0 && fraction >= a.required;
    let mut dir = run.open(&cfg)?;
    dir.write("probe.csv", csv)?;
    dir.write_json(
        "probe.json",
        &json!({
            "tables": a.tables,
            "probed": probed,
            "skipped": skipped,
            "shifted": passing,
            "fraction": fraction,
            "tolerance": a.tolerance,
            "required": a.required,
            "pass": pass,
        }),
    )?;
    eprintln!("{passing}/{probed} tables shifted by more than {:e} ({})", a.tolerance, verdict(pass));
    let path = dir.finish()?;
    if pass {
        Ok(path)
    } else {
        Err(Failure::numeric("too few tables react to structure-breaking swaps".into()))
    }
}

fn wl_check(run: Run, mut cfg: RunConfig, pairs: usize, rows: usize, cols: usize, alphabet: usize) -> Result<PathBuf, Failure> {
    if pairs == 0 || rows == 0 || cols == 0 || alphabet == 0 {
        return Err(Failure::usage("pairs, rows, cols and alphabet must be at least 1".into()));
    }
    let first = UNK + 1;
    let symbols: Vec<TokenId> = (0..alphabet as TokenId).map(|s| first + s).collect();
    let header = first + alphabet as TokenId;
    let caption = header + 1;
    cfg.model.vocab_size = caption as usize + 1;
    cfg.model.row_init = RowInit::Shared;
    cfg.model.validate()?;
    let (encoder, store) = fresh_encoder(&cfg.model, cfg.seed())?;
    let table_pairs = theorem_pairs(rows, cols, &symbols, header, caption, pairs, &mut substream(cfg.seed(), "wl-pairs", 0))?;
    let report = theorem_check(&encoder, &store.values_as::<f64>(), &table_pairs, F64_TOLERANCE)?;
    let pass = report.violations() == 0;
    let mut dir = run.open(&cfg)?;
    dir.write_json("wl.json", &json!({ "report": report, "tolerance": F64_TOLERANCE, "pass": pass }))?;
    eprintln!(
        "{} pairs: {} same orbit, {} encode-equal, {} WL-equal, {} violations",
        report.pairs,
        report.same_orbit,
        report.encode_equal,
        report.wl_equal,
        report.violations()
    );
    let path = dir.finish()?;
    if pass {
        Ok(path)
    } else {
        Err(Failure::numeric("encoder equality disagrees with the WL test".into()))
    }
}

fn parse_sizes(text: &str) -> Result<Vec<(usize, usize)>, Failure> {
    text.split(',')
        .map(|s| {
            let (n, m) = s
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| Failure::usage(format!("size `{s}` is not NxM")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .ok()
                    .filter(|&x| x > 0)
                    .ok_or_else(|| Failure::usage(format!("size `{s}` is not NxM")))
            };
            Ok((num(n)?, num(m)?))
        })
        .collect()
}

fn profile(run: Run, mut cfg: RunConfig, sizes: &str, reps: usize) -> Result<PathBuf, Failure> {
    let sizes = parse_sizes(sizes)?;
    if reps == 0 {
        return Err(Failure::usage("reps must be at least 1".into()));
    }
    cfg.model.vocab_size = cfg.vocab_size;
    cfg.model.validate()?;
    let (encoder, store) = fresh_encoder(&cfg.model, cfg.seed())?;
    let report = profile_scaling(&encoder, &store.values_as::<f64>(), &sizes, reps, &mut substream(cfg.seed(), "profile", 0))?;
    let mut dir = run.open(&cfg)?;
    dir.write_volatile("profile.csv", report.to_csv())?;
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Failure::data(e.to_string()))?;
    text.push('\n');
    dir.write_volatile("profile.json", text)?;
    for (w, r) in report.rows.windows(2).zip(&report.ratios) {
        eprintln!("nm {} -> {}: ratio {:.3}", w[0].nm, w[1].nm, r);
    }
    dir.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_sizes("10x10, 20X5").unwrap(), vec![(10, 10), (20, 5)]);
        assert!(parse_sizes("10").is_err());
        assert!(parse_sizes("0x3").is_err());
    }
}
