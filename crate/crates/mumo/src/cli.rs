//! Command-line interface. Settings resolve as defaults, then `--config`,
//! then individual flags.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mumo_core::model::{Injection, Model, ModelBatch, Pooling, Sample, Task};
use mumo_core::smiles::parse_smiles;
use mumo_core::tensor::Scalar;
use mumo_core::tokenizer::{TokenizerKind, Vocab};
use mumo_core::train::{embed, embedding_similarity_report, morgan_fp, split_folds, Standardizer};
use serde_json::json;

use crate::ablation::{self, AblationConfig};
use crate::config::{Precision, RunConfig};
use crate::corpus::{self, Record};
use crate::dump;
use crate::error::{Error, Result};
use crate::run::{self, CheckpointMeta, JsonlLog};
use crate::verify;
use crate::vocab;

#[derive(Debug, Parser)]
#[command(name = "mumo", version, about = "Structure-injected sequence models for molecules")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long, global = true)]
    pub use_graph: Option<bool>,
    #[arg(long, global = true)]
    pub use_geometry: Option<bool>,
    /// First layer (1-based) with structure injection; layers + 1 disables it.
    #[arg(long, global = true)]
    pub fusion_start: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true, value_parser = parse_pooling)]
    pub pooling: Option<Pooling>,
    #[arg(long, global = true, value_parser = parse_tokenizer)]
    pub tokenizer: Option<TokenizerKind>,
    #[arg(long, global = true, value_parser = parse_injection)]
    pub injection: Option<Injection>,
    /// Output directory for checkpoints, logs and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
}

fn parse_pooling(s: &str) -> std::result::Result<Pooling, String> {
    parse_enum(s)
}

fn parse_tokenizer(s: &str) -> std::result::Result<TokenizerKind, String> {
    parse_enum(s)
}

fn parse_injection(s: &str) -> std::result::Result<Injection, String> {
    parse_enum(s)
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "binary" => Ok(Task::Binary),
        "regression" => Ok(Task::Regression),
        _ => match s.strip_prefix("multi_label:").map(str::parse) {
            Some(Ok(n)) => Ok(Task::MultiLabel { n }),
            _ => Err(format!("unknown task {s:?}; expected binary, regression or multi_label:N")),
        },
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vocabulary from a JSONL corpus and print token statistics.
    Tokenize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Masked-token pretraining; writes checkpoints and a JSONL loss log.
    Pretrain {
        /// JSONL corpus; overrides the configured one.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Supervised training from a pretrained checkpoint (or from scratch).
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
    },
    /// Task metrics of a fine-tuned checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labelled JSONL; the held-out split of the configured data when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Invariance, batching, torsion, gradient, tokenizer, similarity and
    /// checkpoint checks.
    Verify {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// One JSON object per check instead of text lines.
        #[arg(long)]
        json: bool,
    },
    /// Correlation of embedding distances with fingerprint similarities.
    Similarity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
    },
    /// Modality and injection ablations on the synthetic bond-angle task.
    Ablate {
        /// JSON ablation settings.
        #[arg(long)]
        ablation: Option<PathBuf>,
    },
}

impl GlobalArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = self.precision {
            c.precision = p;
        }
        if let Some(t) = self.tokenizer {
            c.tokenizer = t;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(l) = self.layers {
            c.model.n_layers = l;
        }
        self.apply_model_flags(&mut c.model);
        c.validate()?;
        Ok(c)
    }

    /// Flags that may also override a checkpoint's stored model settings.
    fn apply_model_flags(&self, m: &mut mumo_core::model::ModelConfig) {
        if let Some(v) = self.use_graph {
            m.use_graph = v;
        }
        if let Some(v) = self.use_geometry {
            m.use_geometry = v;
        }
        if let Some(v) = self.fusion_start {
            m.fusion_start = v;
        }
        if let Some(v) = self.pooling {
            m.pooling = v;
        }
        if let Some(v) = self.injection {
            m.injection = v;
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.resolve()?;
    match cli.command {
        Command::Tokenize { input, vocab } => cmd_tokenize(&cfg, &input, &vocab),
        Command::Pretrain { corpus } => {
            let mut cfg = cfg;
            if corpus.is_some() {
                cfg.data.corpus = corpus;
            }
            match cfg.precision {
                Precision::F32 => cmd_pretrain::<f32>(&cfg),
                Precision::F64 => cmd_pretrain::<f64>(&cfg),
            }
        }
        Command::Finetune { checkpoint, data, task } => {
            let mut cfg = cfg;
            if data.is_some() {
                cfg.data.labelled = data;
            }
            if task.is_some() {
                cfg.model.task = task;
            }
            match cfg.precision {
                Precision::F32 => cmd_finetune::<f32>(&cfg, &cli.global, checkpoint.as_deref()),
                Precision::F64 => cmd_finetune::<f64>(&cfg, &cli.global, checkpoint.as_deref()),
            }
        }
        Command::Eval { checkpoint, data } => match cfg.precision {
            Precision::F32 => cmd_eval::<f32>(&cfg, &cli.global, &checkpoint, data.as_deref()),
            Precision::F64 => cmd_eval::<f64>(&cfg, &cli.global, &checkpoint, data.as_deref()),
        },
        Command::Verify { corpus, json } => cmd_verify(corpus.as_deref(), json),
        Command::Similarity { checkpoint, input, pairs } => cmd_similarity(&cfg, &checkpoint, input.as_deref(), pairs),
        Command::Ablate { ablation } => cmd_ablate(&cfg, ablation.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json("report", e))?;
    println!("{text}");
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json("report", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_tokenize(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let records = corpus::read_jsonl(input)?;
    let v = Vocab::build(records.iter().map(|r| r.smiles.as_str()), cfg.tokenizer)?;
    vocab::save(out, &v, cfg.tokenizer)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut lengths: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &records {
        let toks = cfg.tokenizer.tokenize(&r.smiles)?;
        *lengths.entry(toks.len()).or_default() += 1;
        for t in toks {
            *counts.entry(t).or_default() += 1;
        }
    }
    print_json(&json!({
        "molecules": records.len(),
        "vocab_size": v.len(),
        "token_counts": counts,
        "length_histogram": lengths,
    }))
}

/// Vocabulary from the configured file, else built from `records`.
fn vocab_for(cfg: &RunConfig, records: &[Record]) -> Result<Vocab> {
    match &cfg.data.vocab {
        Some(p) => {
            let (v, kind) = vocab::load(p)?;
            if kind != cfg.tokenizer {
                return Err(Error::Config(format!("{} was built with a different tokenizer", p.display())));
            }
            Ok(v)
        }
        None => Ok(Vocab::build(records.iter().map(|r| r.smiles.as_str()), cfg.tokenizer)?),
    }
}

pub fn cmd_pretrain<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let records = corpus::load(cfg.data.corpus.as_deref())?;
    let vocab = vocab_for(cfg, &records)?;
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = vocab.len();
    let samples = run::build_samples(&cfg, &records, &vocab)?;
    create_dir(&cfg.out_dir)?;
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        tokenizer: cfg.tokenizer,
        vocab: vocab.to_map(),
        standardizer: None,
    };
    let log_path = cfg.out_dir.join("pretrain.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = JsonlLog::new(BufWriter::new(file));
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.seed)?;
    let every = cfg.pretrain.checkpoint_every;
    let out_dir = cfg.out_dir.clone();
    let stats = run::pretrain(&mut model, &cfg.pretrain, &samples, cfg.seed, |s, m| {
        log.write(s)?;
        if every > 0 && (s.step + 1) % every == 0 {
            run::save_checkpoint(&out_dir.join(format!("pretrain-{}.ckpt", s.step + 1)), m, &meta)?;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    drop(log);
    let final_path = cfg.out_dir.join("pretrain.ckpt");
    run::save_checkpoint(&final_path, &model, &meta)?;
    let window = stats.len().min(5);
    let mean = |xs: &[mumo_core::train::StepStats]| xs.iter().map(|s| s.loss).sum::<f64>() / xs.len().max(1) as f64;
    print_json(&json!({
        "steps": stats.len(),
        "initial_loss": mean(&stats[..window]),
        "final_loss": mean(&stats[stats.len() - window..]),
        "checkpoint": final_path,
        "log": log_path,
    }))
}

fn labelled_records(cfg: &RunConfig) -> Result<Vec<Record>> {
    let records = corpus::load(cfg.data.labelled.as_deref())?;
    let labelled: Vec<Record> = records.into_iter().filter(|r| r.label.is_some()).collect();
    if labelled.is_empty() {
        return Err(Error::Data("no labelled records".into()));
    }
    Ok(labelled)
}

fn to_samples(cfg: &RunConfig, records: &[Record], vocab: &Vocab) -> Result<Vec<Sample>> {
    run::build_samples(cfg, records, vocab)
}

pub fn cmd_finetune<T: Scalar>(cfg: &RunConfig, flags: &GlobalArgs, checkpoint: Option<&Path>) -> Result<()> {
    let records = labelled_records(cfg)?;
    let (train, valid) = run::split(&records, cfg.data.valid_fraction, cfg.seed);
    let (mut model_cfg, vocab, tokenizer, pretrained) = match checkpoint {
        Some(p) => {
            let (m, meta) = run::load_checkpoint::<T>(p)?;
            (meta.model, Vocab::from_map(&meta.vocab)?, meta.tokenizer, Some(m.params))
        }
        None => {
            let v = vocab_for(cfg, &records)?;
            let mut m = cfg.model.clone();
            m.vocab_size = v.len();
            (m, v, cfg.tokenizer, None)
        }
    };
    flags.apply_model_flags(&mut model_cfg);
    model_cfg.task = cfg.model.task;
    if model_cfg.task.is_none() {
        return Err(Error::Config("fine-tuning needs --task or model.task".into()));
    }
    let cfg = RunConfig {
        model: model_cfg.clone(),
        tokenizer,
        ..cfg.clone()
    };
    let mut model = Model::<T>::new(model_cfg, cfg.seed)?;
    let loaded = pretrained.map(|p| run::load_matching(&mut model, &p)).unwrap_or(0);
    let train_s = to_samples(&cfg, &train, &vocab)?;
    let valid_s = to_samples(&cfg, &valid, &vocab)?;
    create_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("finetune.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = JsonlLog::new(BufWriter::new(file));
    let (scale, _) = run::finetune(&mut model, &cfg.finetune, &train_s, cfg.seed, |s| log.write(s))?;
    drop(log);
    let path = cfg.out_dir.join("finetune.ckpt");
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        tokenizer,
        vocab: vocab.to_map(),
        standardizer: Some(scale),
    };
    run::save_checkpoint(&path, &model, &meta)?;
    let metrics = if valid_s.is_empty() {
        BTreeMap::new()
    } else {
        run::evaluate(&model, &valid_s, &scale, 64)?
    };
    print_json(&json!({
        "loaded_parameters": loaded,
        "train": train_s.len(),
        "valid": metrics,
        "checkpoint": path,
    }))
}

pub fn cmd_eval<T: Scalar>(cfg: &RunConfig, flags: &GlobalArgs, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let (m, meta) = run::load_checkpoint::<T>(checkpoint)?;
    let mut model_cfg = meta.model.clone();
    flags.apply_model_flags(&mut model_cfg);
    let model = Model::from_params(model_cfg.clone(), m.params)?;
    let vocab = Vocab::from_map(&meta.vocab)?;
    let records = match data {
        Some(p) => corpus::read_jsonl(p)?,
        None => {
            let all = labelled_records(cfg)?;
            run::split(&all, cfg.data.valid_fraction, cfg.seed).1
        }
    };
    let cfg = RunConfig {
        model: model_cfg,
        tokenizer: meta.tokenizer,
        ..cfg.clone()
    };
    let samples = to_samples(&cfg, &records, &vocab)?;
    let scale = meta.standardizer.unwrap_or_else(Standardizer::identity);
    let metrics = run::evaluate(&model, &samples, &scale, 64)?;
    if cfg.debug_dumps && !samples.is_empty() {
        let first: Vec<&Sample> = samples.iter().take(8).collect();
        let trace = dump::trace_batch(&model, &ModelBatch::collate(&first)?)?;
        dump::write_trace(&cfg.out_dir.join("dumps"), &trace)?;
    }
    print_json(&json!(metrics))
}

pub fn cmd_verify(corpus_path: Option<&Path>, json: bool) -> Result<()> {
    let records = corpus::load(corpus_path)?;
    let out = std::io::stdout();
    let results = verify::run_all(records, |r| {
        let mut lock = out.lock();
        let _ = match json {
            true => writeln!(lock, "{}", serde_json::to_string(r).unwrap_or_default()),
            false => writeln!(lock, "{r}"),
        };
        let _ = lock.flush();
    })?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    if !json {
        println!("{} of {} checks passed in {total:.1}s", results.len() - failed.len(), results.len());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(failed.join(", ")))
    }
}

pub fn cmd_similarity(cfg: &RunConfig, checkpoint: &Path, input: Option<&Path>, pairs: usize) -> Result<()> {
    let (model, meta) = run::load_checkpoint::<f64>(checkpoint)?;
    let vocab = Vocab::from_map(&meta.vocab)?;
    let records = corpus::load(input)?;
    let cfg = RunConfig {
        model: model.cfg.clone(),
        tokenizer: meta.tokenizer,
        ..cfg.clone()
    };
    let samples = to_samples(&cfg, &records, &vocab)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let emb = embed(&model, &refs, 64)?;
    let fps = records
        .iter()
        .map(|r| parse_smiles(&r.smiles).map(|m| morgan_fp(&m)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut rows = Vec::new();
    for (g, idx) in split_folds(records.len(), 5, cfg.seed).into_iter().enumerate() {
        let e: Vec<Vec<f64>> = idx.iter().map(|&i| emb[i].clone()).collect();
        let f: Vec<_> = idx.iter().map(|&i| fps[i].clone()).collect();
        rows.push(embedding_similarity_report(&e, &f, pairs, cfg.seed.wrapping_add(g as u64))?);
    }
    let summary = |get: fn(&mumo_core::train::SimilarityReport) -> f64| {
        let v: Vec<f64> = rows.iter().map(|r| get(r).abs()).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        json!({"mean_abs_r": mean, "std": std})
    };
    print_json(&json!({
        "groups": rows.len(),
        "pairs_per_group": pairs,
        "tanimoto_distance": summary(|r| r.tanimoto_distance_r),
        "dice": summary(|r| r.dice_r),
        "cosine": summary(|r| r.cosine_r),
    }))
}

pub fn cmd_ablate(cfg: &RunConfig, settings: Option<&Path>) -> Result<()> {
    let acfg = match settings {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<AblationConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => AblationConfig::default(),
    };
    let report = ablation::run_ablation(&acfg, |s| {
        let cells: Vec<String> = s.rmse.iter().map(|(v, r)| format!("{v:?}={r:.3}")).collect();
        eprintln!("seed {}: {} (label std {:.3})", s.seed, cells.join(" "), s.label_std);
    })?;
    let value = serde_json::to_value(&report).map_err(|e| Error::json("ablation report", e))?;
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("ablation.json"), &value)?;
    print_json(&value)
}
