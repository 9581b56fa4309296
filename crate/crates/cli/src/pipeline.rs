use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use lrf_core::compgen::{
    cter, exact_match, generate_corpus, read_corpus_dir, read_jsonl, to_pairs, write_corpus_dir, write_jsonl, Corpus,
    CorpusFiles, CterReport, Example, Manifest,
};
use lrf_core::exec::Execution;
use lrf_core::fusion::{extract_fuse_probs, FuseProbRow};
use lrf_core::training::{
    evaluate_loss, fit, greedy_decode_batch, load_checkpoint, save_checkpoint, Checkpoint, TrainState,
};
use lrf_core::{LrfVariant, ModelConfig, Seq2Seq};
use serde::{Deserialize, Serialize};

use crate::report;
use crate::{RunConfig, UsageError};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))
}

/// Generates the corpus into the configured directory.
pub fn cmd_gen(cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = cfg.corpus_dir();
    create_dir(&dir)?;
    Ok(write_corpus_dir(&dir, &corpus)?)
}

/// Reads the configured corpus, generating it first if the directory has none.
pub fn load_corpus(cfg: &RunConfig) -> anyhow::Result<Corpus> {
    let dir = cfg.corpus_dir();
    if !dir.join(CorpusFiles::MANIFEST).exists() {
        cmd_gen(cfg)?;
    }
    let corpus = read_corpus_dir(&dir)?;
    if corpus.spec != cfg.corpus {
        bail!(usage(format!(
            "corpus in {} was generated from a different spec than the configuration",
            dir.display()
        )));
    }
    Ok(corpus)
}

/// Model configuration with vocabulary sizes taken from the corpus.
pub fn model_config(cfg: &RunConfig, corpus: &Corpus) -> anyhow::Result<ModelConfig> {
    let model = ModelConfig {
        src_vocab: corpus.src_vocab.len(),
        tgt_vocab: corpus.tgt_vocab.len(),
        ..cfg.model.clone()
    };
    let longest = [&corpus.train, &corpus.dev, &corpus.test, &corpus.cg_test]
        .into_iter()
        .flatten()
        .map(|e| e.src.len().max(e.tgt.len() + 1))
        .max()
        .unwrap_or(0);
    if model.max_len < longest {
        bail!(usage(format!(
            "model.max_len = {} but the corpus needs {longest}",
            model.max_len
        )));
    }
    model.validate().map_err(|e| usage(e.to_string()))?;
    Ok(model)
}

fn checkpoint_meta(corpus: &Corpus) -> serde_json::Value {
    serde_json::json!({ "corpus_spec_hash": corpus.spec.hash() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub best_step: Option<usize>,
    pub best_dev_loss: Option<f64>,
    pub params: usize,
    pub added_params: usize,
}

/// Keeps log records up to and including `step`.
fn truncate_log(path: &Path, step: usize) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let rec: LogRecord = serde_json::from_str(&line).with_context(|| format!("bad line in {}", path.display()))?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Trains `cfg.model` on the corpus. Writes the resolved config, a JSONL
/// log, the last and best-dev checkpoints, and a summary into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, resume: bool, exec: Execution) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let model_cfg = model_config(cfg, &corpus)?;
    let out = &cfg.out_dir;
    create_dir(out)?;
    cfg.write(&out.join("config.json"))?;
    let meta = checkpoint_meta(&corpus);
    let last_path = out.join(LAST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);
    let log_path = out.join(LOG_FILE);

    let (mut model, mut state) = if resume && last_path.exists() {
        let ck = load_checkpoint(&last_path)?;
        if ck.model.config() != &model_cfg || ck.meta != meta {
            bail!(usage(format!(
                "{} does not match the configuration",
                last_path.display()
            )));
        }
        if ck.state.seed != cfg.train.seed {
            bail!(usage("train.seed differs from the checkpoint being resumed"));
        }
        truncate_log(&log_path, ck.state.step)?;
        (ck.model, ck.state)
    } else {
        for stale in [&log_path, &last_path, &best_path] {
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
        let model = Seq2Seq::new(model_cfg)?;
        let state = TrainState::new(&model, cfg.train.seed);
        (model, state)
    };

    let summary = |model: &Seq2Seq, state: &TrainState, final_loss| TrainSummary {
        steps: state.step,
        final_loss,
        best_step: state.best_step,
        best_dev_loss: state.best_dev_loss,
        params: model.num_params(),
        added_params: model.fuse_params(),
    };

    if cfg.train.steps == 0 {
        fs::File::create(&log_path)?;
        save_checkpoint(&last_path, &model, &state, &meta)?;
        save_checkpoint(&best_path, &model, &state, &meta)?;
        let s = summary(&model, &state, None);
        write_json(&out.join("train_summary.json"), &s)?;
        return Ok(s);
    }

    let train = to_pairs(&corpus.train, &corpus.src_vocab, &corpus.tgt_vocab);
    let dev = to_pairs(&corpus.dev, &corpus.src_vocab, &corpus.tgt_vocab);
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let start = Instant::now();
    let mut final_loss = None;
    let total = cfg.train.steps;
    let interval = cfg.train.checkpoint_interval.max(1);
    fit(
        &mut model,
        &mut state,
        &train,
        &cfg.train,
        exec,
        |stats, model, state| {
            final_loss = Some(stats.loss);
            let mut rec = LogRecord {
                step: stats.step,
                lr: stats.lr,
                loss: stats.loss,
                grad_norm: stats.grad_norm,
                wall_ms: start.elapsed().as_millis() as u64,
                dev_loss: None,
            };
            let at_checkpoint = stats.step % interval == 0 || stats.step == total;
            let mut improved = false;
            if at_checkpoint {
                let dl = if dev.is_empty() {
                    None
                } else {
                    Some(evaluate_loss(model, &dev, exec)?)
                };
                rec.dev_loss = dl;
                improved = match (dl, state.best_dev_loss) {
                    (Some(d), Some(b)) => d < b,
                    _ => true,
                };
                if improved {
                    state.best_dev_loss = dl;
                    state.best_step = Some(stats.step);
                }
            }
            // the log line goes first so a resumed run never misses it
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n")?;
            log.flush()?;
            if improved {
                save_checkpoint(&best_path, model, state, &meta)?;
            }
            if at_checkpoint {
                save_checkpoint(&last_path, model, state, &meta)?;
            }
            Ok(())
        },
    )?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &model, &state, &meta)?;
    }
    let s = summary(&model, &state, final_loss);
    write_json(&out.join("train_summary.json"), &s)?;
    Ok(s)
}

/// One prediction line of `predictions_<split>.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub prediction: Vec<String>,
    #[serde(default)]
    pub reference: Vec<String>,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub examples: usize,
    pub exact_match: f64,
    pub truncated: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cter: Option<CterReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_step: Option<usize>,
    pub variant: Option<LrfVariant>,
    pub params: Option<usize>,
    pub added_params: Option<usize>,
    pub splits: BTreeMap<String, SplitMetrics>,
}

pub fn split<'c>(corpus: &'c Corpus, name: &str) -> anyhow::Result<&'c [Example]> {
    Ok(match name {
        "train" => &corpus.train,
        "dev" => &corpus.dev,
        "test" => &corpus.test,
        "cg_test" => &corpus.cg_test,
        other => bail!(usage(format!("unknown split `{other}` (train, dev, test, cg_test)"))),
    })
}

/// Loads a checkpoint and checks it against the configuration and corpus
/// it will be used with.
pub fn load_model(path: &Path, cfg: &RunConfig, corpus: &Corpus) -> anyhow::Result<Checkpoint> {
    if !path.exists() {
        bail!(usage(format!("checkpoint {} not found", path.display())));
    }
    let ck = load_checkpoint(path)?;
    let c = ck.model.config();
    if ck.meta != checkpoint_meta(corpus)
        || c.src_vocab != corpus.src_vocab.len()
        || c.tgt_vocab != corpus.tgt_vocab.len()
    {
        bail!(usage(format!(
            "checkpoint {} was trained on a different corpus",
            path.display()
        )));
    }
    let expected = model_config(cfg, corpus)?;
    if c != &expected {
        bail!(usage(format!(
            "checkpoint {} does not match the model configuration (checkpoint: {}, config: {})",
            path.display(),
            serde_json::to_string(c)?,
            serde_json::to_string(&expected)?
        )));
    }
    Ok(ck)
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(BEST_CHECKPOINT)
}

/// Greedy predictions for `examples`.
pub fn predict(
    model: &Seq2Seq,
    corpus: &Corpus,
    examples: &[Example],
    max_len: usize,
    exec: Execution,
) -> anyhow::Result<Vec<PredictionRecord>> {
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| corpus.src_vocab.encode(&e.src)).collect();
    let decoded = greedy_decode_batch(model, &sources, max_len, exec)?;
    decoded
        .into_iter()
        .zip(examples)
        .enumerate()
        .map(|(index, (d, e))| {
            Ok(PredictionRecord {
                index,
                prediction: corpus.tgt_vocab.decode(&d.tokens)?,
                reference: e.tgt.clone(),
                truncated: d.truncated,
            })
        })
        .collect()
}

/// Scores predictions against a split; CTER is added for `cg_test`.
pub fn score(corpus: &Corpus, name: &str, predictions: &[PredictionRecord]) -> anyhow::Result<SplitMetrics> {
    let examples = split(corpus, name)?;
    if predictions.len() != examples.len() {
        bail!(usage(format!(
            "{} predictions for {} examples in `{name}`",
            predictions.len(),
            examples.len()
        )));
    }
    let preds: Vec<Vec<String>> = predictions.iter().map(|p| p.prediction.clone()).collect();
    let refs: Vec<Vec<String>> = examples.iter().map(|e| e.tgt.clone()).collect();
    let cter = if name == "cg_test" {
        Some(cter(&preds, examples, &corpus.dictionary)?)
    } else {
        None
    };
    Ok(SplitMetrics {
        examples: examples.len(),
        exact_match: exact_match(&preds, &refs)?,
        truncated: predictions.iter().filter(|p| p.truncated).count(),
        cter,
    })
}

/// Decodes (or reads from `predictions`) each split, writes per-split
/// prediction files and `metrics.json` into `cfg.out_dir`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    splits: &[String],
    predictions: Option<&Path>,
    exec: Execution,
) -> anyhow::Result<EvalReport> {
    let corpus = load_corpus(cfg)?;
    create_dir(&cfg.out_dir)?;
    for s in splits {
        split(&corpus, s)?;
    }
    let mut report = EvalReport {
        checkpoint_step: None,
        variant: None,
        params: None,
        added_params: None,
        splits: BTreeMap::new(),
    };
    if let Some(path) = predictions {
        let [name] = splits else {
            bail!(usage("--predictions scores exactly one split"));
        };
        if !path.exists() {
            bail!(usage(format!("predictions file {} not found", path.display())));
        }
        let records: Vec<PredictionRecord> = read_jsonl(path)?;
        report.splits.insert(name.clone(), score(&corpus, name, &records)?);
    } else {
        let path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| default_checkpoint(cfg));
        let ck = load_model(&path, cfg, &corpus)?;
        report.checkpoint_step = Some(ck.state.step);
        report.variant = Some(ck.model.config().variant);
        report.params = Some(ck.model.num_params());
        report.added_params = Some(ck.model.fuse_params());
        for name in splits {
            let records = predict(&ck.model, &corpus, split(&corpus, name)?, cfg.eval.max_len, exec)?;
            write_jsonl(&cfg.out_dir.join(format!("predictions_{name}.jsonl")), &records)?;
            report.splits.insert(name.clone(), score(&corpus, name, &records)?);
        }
    }
    write_json(&cfg.out_dir.join(METRICS_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub cter: CterReport,
    pub fuse_probs: Option<Vec<FuseProbRow>>,
}

/// Teacher-forced fuse-attention averages over the first test examples.
pub fn fuse_probs(
    cfg: &RunConfig,
    model: &Seq2Seq,
    corpus: &Corpus,
    exec: Execution,
) -> anyhow::Result<Vec<FuseProbRow>> {
    if !model.config().variant.uses_fuse_attention() {
        bail!(usage(format!(
            "variant `{}` has no fuse-attention modules; rerun with --skip-fuse-probs",
            model.config().variant
        )));
    }
    let n = cfg.eval.fuse_prob_examples.min(corpus.test.len()).max(1);
    let source = if corpus.test.is_empty() {
        &corpus.train
    } else {
        &corpus.test
    };
    let pairs = to_pairs(&source[..n.min(source.len())], &corpus.src_vocab, &corpus.tgt_vocab);
    Ok(extract_fuse_probs(model, &pairs, exec)?)
}

/// Writes the breakdown CSVs and, unless skipped, `fuse_probs.csv`.
pub fn cmd_analyze(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    skip_fuse_probs: bool,
    exec: Execution,
) -> anyhow::Result<Analysis> {
    let corpus = load_corpus(cfg)?;
    create_dir(&cfg.out_dir)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_checkpoint(cfg));
    let ck = load_model(&path, cfg, &corpus)?;
    let fuse = if skip_fuse_probs {
        None
    } else {
        let rows = fuse_probs(cfg, &ck.model, &corpus, exec)?;
        report::write_fuse_probs(&cfg.out_dir.join("fuse_probs.csv"), &rows)?;
        Some(rows)
    };
    let records = predict(&ck.model, &corpus, &corpus.cg_test, cfg.eval.max_len, exec)?;
    let metrics = score(&corpus, "cg_test", &records)?;
    let cter = metrics.cter.expect("cg_test is scored with CTER");
    report::write_groups(
        &cfg.out_dir.join("cter_by_compound_length.csv"),
        &cter.by_compound_length,
    )?;
    report::write_groups(&cfg.out_dir.join("cter_by_context_length.csv"), &cter.by_context_length)?;
    report::write_groups(&cfg.out_dir.join("cter_by_mod.csv"), &cter.by_mod)?;
    Ok(Analysis { cter, fuse_probs: fuse })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: LrfVariant,
    pub seed: u64,
    pub params: usize,
    pub added_params: usize,
    pub cter_inst: f64,
    pub cter_aggr: f64,
    pub exact_match: f64,
}

fn run_dir_name(variant: LrfVariant, seed: u64) -> String {
    format!("{}-seed{seed}", variant.to_string().replace(':', "-"))
}

/// Trains and evaluates every variant for every seed on one shared corpus,
/// then writes `sweep.csv`, `sweep.md`, and `sweep_fuse_probs.csv`.
pub fn cmd_sweep(cfg: &RunConfig, exec: Execution) -> anyhow::Result<Vec<SweepRow>> {
    if cfg.sweep.variants.len() < 2 {
        bail!(usage("a sweep needs at least two variants"));
    }
    if cfg.sweep.seeds.is_empty() {
        bail!(usage("a sweep needs at least one seed"));
    }
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    let corpus_dir = cfg.corpus_dir();
    let shared = RunConfig {
        corpus_dir: Some(corpus_dir),
        ..cfg.clone()
    };
    let corpus = load_corpus(&shared)?;
    cfg.write(&cfg.out_dir.join("config.json"))?;

    let mut rows = Vec::new();
    let mut fuse_rows = Vec::new();
    for &seed in &cfg.sweep.seeds {
        for &variant in &cfg.sweep.variants {
            let mut run = shared.clone();
            run.model.variant = variant;
            run.set_seed(seed);
            run.out_dir = cfg.out_dir.join(run_dir_name(variant, seed));
            let started = Instant::now();
            let summary = cmd_train(&run, false, exec)?;
            let report = cmd_eval(&run, None, &["test".into(), "cg_test".into()], None, exec)?;
            let cg = &report.splits["cg_test"];
            let cter = cg.cter.as_ref().expect("cg_test carries CTER");
            let row = SweepRow {
                variant,
                seed,
                params: summary.params,
                added_params: summary.added_params,
                cter_inst: cter.instance_rate,
                cter_aggr: cter.aggregate_rate,
                exact_match: report.splits["test"].exact_match,
            };
            if variant.uses_fuse_attention() {
                let ck = load_model(&default_checkpoint(&run), &run, &corpus)?;
                let probs = fuse_probs(&run, &ck.model, &corpus, exec)?;
                report::write_fuse_probs(&run.out_dir.join("fuse_probs.csv"), &probs)?;
                fuse_rows.push((variant, seed, probs));
            }
            eprintln!(
                "[sweep] {variant} seed {seed}: cter {:.3}/{:.3} em {:.3} ({:.0}s)",
                row.cter_inst,
                row.cter_aggr,
                row.exact_match,
                started.elapsed().as_secs_f64()
            );
            rows.push(row);
        }
    }
    report::write_sweep_csv(&cfg.out_dir.join("sweep.csv"), &rows)?;
    fs::write(cfg.out_dir.join("sweep.md"), report::sweep_markdown(&rows))?;
    report::write_sweep_fuse_probs(&cfg.out_dir.join("sweep_fuse_probs.csv"), &fuse_rows)?;
    Ok(rows)
}
