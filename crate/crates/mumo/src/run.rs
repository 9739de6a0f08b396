//! Pretraining, fine-tuning and evaluation loops over prepared samples.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use mumo_core::model::{Model, ModelBatch, ModelConfig, ParamStore, Sample, SampleBuilder, Task};
use mumo_core::partition::CutRuleSet;
use mumo_core::tensor::Scalar;
use mumo_core::tokenizer::{TokenizerKind, Vocab};
use mumo_core::train::{
    auroc, metrics_regression, mlm_step, predict, supervised_step, OptimizerState, Standardizer, StepStats,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{FinetuneConfig, PretrainConfig, RunConfig};
use crate::corpus::{prepare_samples, Record};
use crate::error::{Error, Result};

/// Model settings stored next to a checkpoint as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub tokenizer: TokenizerKind,
    pub vocab: BTreeMap<String, usize>,
    pub standardizer: Option<Standardizer>,
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, meta: &CheckpointMeta) -> Result<()> {
    checkpoint::save(path, &model.params)?;
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::json("checkpoint meta", e))?;
    std::fs::write(meta_path(path), text).map_err(|e| Error::io(meta_path(path), e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let params = checkpoint::load::<T>(path)?;
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(mp.display().to_string(), e))?;
    Ok((Model::from_params(meta.model.clone(), params)?, meta))
}

/// Copies every parameter of `src` whose name and shape match; returns how many.
pub fn load_matching<T: Scalar, U: Scalar>(model: &mut Model<T>, src: &ParamStore<U>) -> usize {
    let mut n = 0;
    for (name, t) in src.entries() {
        if let Some(dst) = model.params.get_mut(name) {
            if dst.shape() == t.shape() {
                *dst = t.cast();
                n += 1;
            }
        }
    }
    n
}

pub fn build_samples(cfg: &RunConfig, records: &[Record], vocab: &Vocab) -> Result<Vec<Sample>> {
    let rules = CutRuleSet::default();
    let builder = SampleBuilder {
        vocab,
        tokenizer: cfg.tokenizer,
        max_len: cfg.model.max_len,
        graph: cfg.graph,
        rules: &rules,
    };
    prepare_samples(records, &builder, cfg.data.workers, cfg.data.queue_capacity)
}

/// Seeded epoch-wise batch order: reshuffles whenever the pool runs out.
pub struct BatchOrder {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchOrder { order, pos: 0, rng }
    }

    pub fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Runs masked-token pretraining; `on_step` sees every step and may stop
/// the run early without changing the learning-rate schedule.
pub fn pretrain<T: Scalar>(
    model: &mut Model<T>,
    opt_cfg: &PretrainConfig,
    samples: &[Sample],
    seed: u64,
    mut on_step: impl FnMut(&StepStats, &Model<T>) -> Result<ControlFlow<()>>,
) -> Result<Vec<StepStats>> {
    if samples.is_empty() {
        return Err(Error::Data("no pretraining samples".into()));
    }
    let tensors: Vec<_> = model.params.entries().iter().map(|(_, t)| t.clone()).collect();
    let mut opt = OptimizerState::new(&tensors, opt_cfg.lr, opt_cfg.warmup, opt_cfg.steps);
    let mut order = BatchOrder::new(samples.len(), seed);
    let mut log = Vec::with_capacity(opt_cfg.steps as usize);
    for step in 0..opt_cfg.steps {
        let idx = order.next(opt_cfg.batch_size);
        let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = ModelBatch::collate(&refs)?;
        let stats = mlm_step(model, &mut opt, &batch, seed.wrapping_mul(1_000_003).wrapping_add(step), opt_cfg.clip)?;
        let flow = on_step(&stats, model)?;
        log.push(stats);
        if flow.is_break() {
            break;
        }
    }
    Ok(log)
}

fn labels_of(samples: &[&Sample], task: Task) -> Result<Vec<f64>> {
    let k = task.out_dim();
    let mut out = Vec::with_capacity(samples.len() * k);
    for s in samples {
        if s.label.len() != k {
            return Err(Error::Data(format!("sample has {} labels, task needs {k}", s.label.len())));
        }
        out.extend_from_slice(&s.label);
    }
    Ok(out)
}

/// Supervised training through the task head. Regression targets are
/// standardized with statistics of the training split.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    opt_cfg: &FinetuneConfig,
    train: &[Sample],
    seed: u64,
    mut on_step: impl FnMut(&StepStats) -> Result<()>,
) -> Result<(Standardizer, Vec<StepStats>)> {
    let task = model.cfg.task.ok_or_else(|| Error::Config("fine-tuning needs model.task".into()))?;
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let all: Vec<&Sample> = train.iter().collect();
    let scale = match task {
        Task::Regression => Standardizer::fit(&labels_of(&all, task)?)?,
        _ => Standardizer::identity(),
    };
    let per_epoch = train.len().div_ceil(opt_cfg.batch_size) as u64;
    let total = per_epoch * opt_cfg.epochs;
    let tensors: Vec<_> = model.params.entries().iter().map(|(_, t)| t.clone()).collect();
    let mut opt = OptimizerState::new(&tensors, opt_cfg.lr, opt_cfg.warmup, total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(total as usize);
    for _ in 0..opt_cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt_cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = ModelBatch::collate(&refs)?;
            let labels = labels_of(&refs, task)?;
            let step_seed = seed.wrapping_mul(1_000_003).wrapping_add(opt.step);
            let stats = supervised_step(model, &mut opt, &batch, &labels, &scale, step_seed, opt_cfg.clip)?;
            on_step(&stats)?;
            log.push(stats);
        }
    }
    Ok((scale, log))
}

/// Task metrics: AUROC (and accuracy) for classification, RMSE/MAE for
/// regression. Multi-label AUROC averages labels that contain both classes.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    scale: &Standardizer,
    batch_size: usize,
) -> Result<BTreeMap<String, f64>> {
    let task = model.cfg.task.ok_or_else(|| Error::Config("evaluation needs model.task".into()))?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels = labels_of(&refs, task)?;
    let preds = predict(model, &refs, batch_size, scale)?;
    let mut out = BTreeMap::new();
    out.insert("n".to_string(), samples.len() as f64);
    match task {
        Task::Regression => {
            let m = metrics_regression(&preds, &labels)?;
            out.insert("rmse".into(), m.rmse);
            out.insert("mae".into(), m.mae);
        }
        Task::Binary | Task::MultiLabel { .. } => {
            let k = task.out_dim();
            let mut aucs = Vec::new();
            let mut correct = 0usize;
            for j in 0..k {
                let s: Vec<f64> = preds.iter().skip(j).step_by(k).copied().collect();
                let l: Vec<bool> = labels.iter().skip(j).step_by(k).map(|&v| v >= 0.5).collect();
                correct += s.iter().zip(&l).filter(|(p, y)| (**p >= 0.0) == **y).count();
                if let Ok(a) = auroc(&s, &l) {
                    aucs.push(a);
                }
            }
            if !aucs.is_empty() {
                out.insert("auroc".into(), aucs.iter().sum::<f64>() / aucs.len() as f64);
            }
            out.insert("accuracy".into(), correct as f64 / labels.len() as f64);
        }
    }
    Ok(out)
}

/// Seeded split into (train, held-out) with `fraction` held out.
pub fn split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = ((items.len() as f64) * fraction).round() as usize;
    let valid = idx[..n_valid].iter().map(|&i| items[i].clone()).collect();
    let train = idx[n_valid..].iter().map(|&i| items[i].clone()).collect();
    (train, valid)
}

/// Appends one JSON object per line.
pub struct JsonlLog<W: Write> {
    out: W,
}

impl<W: Write> JsonlLog<W> {
    pub fn new(out: W) -> Self {
        JsonlLog { out }
    }

    pub fn write(&mut self, stats: &StepStats) -> Result<()> {
        let line = serde_json::to_string(stats).map_err(|e| Error::json("log", e))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("log", e))
    }
}
