//! Masked-token pretraining, supervised losses, Adam with warmup + cosine
//! decay, evaluation metrics and fingerprint similarity.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // Supplies float math when std is absent.
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Ctx, Model, ModelBatch, ModelError, Pooling, Sample, Task};
use crate::smiles::Molecule;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{is_special, MASK_ID, N_SPECIAL};

pub const MLM_RATE: f64 = 0.15;
pub const FP_WIDTH: usize = 2048;
pub const FP_RADIUS: usize = 2;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("no positions selected for prediction")]
    NoMaskedPositions,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("zero variance")]
    ZeroVariance,
    #[error("fingerprint widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Masked inputs and prediction targets for one padded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmBatch {
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub loss_positions: Vec<bool>,
}

impl MlmBatch {
    pub fn rows(&self) -> Vec<usize> {
        (0..self.loss_positions.len()).filter(|&i| self.loss_positions[i]).collect()
    }
}

/// Selects 15% of real tokens (at least one per sequence when any exist);
/// of those 80% become `[MASK]`, 10% a random non-special token and 10%
/// stay unchanged. `ids` and `mask` are `[batch * len]`.
pub fn mlm_mask(ids: &[usize], mask: &[bool], len: usize, vocab_size: usize, seed: u64) -> MlmBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input_ids = ids.to_vec();
    let mut loss_positions = vec![false; ids.len()];
    for start in (0..ids.len()).step_by(len.max(1)) {
        let end = (start + len).min(ids.len());
        let candidates: Vec<usize> = (start..end).filter(|&i| mask[i] && !is_special(ids[i])).collect();
        let mut chosen: Vec<usize> = candidates.iter().copied().filter(|_| rng.random_bool(MLM_RATE)).collect();
        if chosen.is_empty() && !candidates.is_empty() {
            chosen.push(candidates[rng.random_range(0..candidates.len())]);
        }
        for i in chosen {
            loss_positions[i] = true;
            let r: f64 = rng.random();
            if r < 0.8 {
                input_ids[i] = MASK_ID;
            } else if r < 0.9 && vocab_size > N_SPECIAL {
                input_ids[i] = rng.random_range(N_SPECIAL..vocab_size);
            }
        }
    }
    MlmBatch {
        input_ids,
        target_ids: ids.to_vec(),
        loss_positions,
    }
}

/// Mean cross-entropy over the selected positions.
pub fn mlm_loss<'t, T: Scalar>(
    model: &Model<T>,
    ctx: &Ctx<'t, T>,
    tokens: Var<'t, T>,
    mlm: &MlmBatch,
) -> Result<Var<'t, T>, TrainError> {
    let rows = mlm.rows();
    if rows.is_empty() {
        return Err(TrainError::NoMaskedPositions);
    }
    let targets: Vec<usize> = rows.iter().map(|&r| mlm.target_ids[r]).collect();
    let logits = model.mlm_logits(ctx, tokens, &rows)?;
    Ok(logits.cross_entropy(&targets)?)
}

/// z-score normalization for regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(values: &[f64]) -> Result<Self, TrainError> {
        if values.is_empty() {
            return Err(TrainError::Empty);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Standardizer {
            mean,
            std: if var > 0.0 { var.sqrt() } else { 1.0 },
        })
    }

    pub fn identity() -> Self {
        Standardizer { mean: 0.0, std: 1.0 }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Binary cross-entropy with logits for classification tasks, MSE on
/// standardized targets for regression. `labels` is `[batch * out_dim]`.
pub fn task_loss<'t, T: Scalar>(
    task: Task,
    out: Var<'t, T>,
    labels: &[f64],
    scale: &Standardizer,
) -> Result<Var<'t, T>, TrainError> {
    match task {
        Task::Binary | Task::MultiLabel { .. } => {
            let t: Vec<T> = labels.iter().map(|&v| T::of(v)).collect();
            Ok(out.bce_with_logits(&t)?)
        }
        Task::Regression => {
            let t: Vec<T> = labels.iter().map(|&v| T::of(scale.forward(v))).collect();
            let target = out.tape().constant(Tensor::from_vec(out.shape(), t));
            Ok(out.mse(target)?)
        }
    }
}

/// Adam moments and the warmup + cosine learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub base_lr: f64,
    pub warmup: u64,
    pub total: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// `base · min(t / warmup, ½(1 + cos(π (t − warmup) / (total − warmup))))`,
/// `t` counted from 1.
pub fn lr_at(base: f64, t: u64, warmup: u64, total: u64) -> f64 {
    let t = t as f64;
    let w = warmup as f64;
    let ramp = if warmup == 0 { 1.0 } else { t / w };
    let decay = if total <= warmup {
        1.0
    } else {
        let frac = ((t - w) / (total as f64 - w)).clamp(0.0, 1.0);
        0.5 * (1.0 + (PI * frac).cos())
    };
    base * ramp.min(decay)
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>], base_lr: f64, warmup: u64, total: u64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            base_lr,
            warmup,
            total,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Learning rate the next step will use.
    pub fn next_lr(&self) -> f64 {
        lr_at(self.base_lr, self.step + 1, self.warmup, self.total)
    }

    /// One bias-corrected Adam update; returns the learning rate used.
    pub fn adam_step<'a, I>(&mut self, params: I, grads: &[Tensor<T>]) -> Result<f64, TensorError>
    where
        I: IntoIterator<Item = &'a mut Tensor<T>>,
        T: 'a,
    {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let lr = lr_at(self.base_lr, self.step, self.warmup, self.total);
        if lr == 0.0 {
            return Ok(lr);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for ((x, &g), (mi, vi)) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g = g.as_f64();
                let m_new = b1 * mi.as_f64() + (1.0 - b1) * g;
                let v_new = b2 * vi.as_f64() + (1.0 - b2) * g * g;
                *mi = T::of(m_new);
                *vi = T::of(v_new);
                let upd = lr * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *x = T::of(x.as_f64() - upd);
            }
        }
        Ok(lr)
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

fn apply<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    mut grads: Vec<Tensor<T>>,
    loss: f64,
    clip: Option<f64>,
) -> Result<StepStats, TrainError> {
    if let Some(c) = clip {
        clip_grad_norm(&mut grads, c);
    }
    let lr = opt.adam_step(model.params.tensors_mut(), &grads)?;
    Ok(StepStats {
        step: opt.step,
        lr,
        loss,
    })
}

/// Masks the batch, runs forward + backward and takes one Adam step.
pub fn mlm_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &ModelBatch,
    seed: u64,
    clip: Option<f64>,
) -> Result<StepStats, TrainError> {
    let mlm = mlm_mask(&batch.ids, &batch.mask, batch.len, model.cfg.vocab_size, seed);
    let masked = batch.with_ids(mlm.input_ids.clone());
    let (loss, grads) = {
        let tape = Tape::new();
        let ctx = model.bind(&tape, true, seed ^ 0x5eed);
        let f = model.forward(&ctx, &masked)?;
        let loss = mlm_loss(model, &ctx, f.tokens, &mlm)?;
        let value = loss.item().as_f64();
        let mut g = tape.backward(loss)?;
        (value, ctx.vars.iter().map(|&v| g.take(v)).collect::<Vec<_>>())
    };
    apply(model, opt, grads, loss, clip)
}

/// Supervised step on pooled embeddings through the task head.
pub fn supervised_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &ModelBatch,
    labels: &[f64],
    scale: &Standardizer,
    seed: u64,
    clip: Option<f64>,
) -> Result<StepStats, TrainError> {
    let task = model
        .cfg
        .task
        .ok_or_else(|| ModelError::InvalidConfig("model has no task head".into()))?;
    let (loss, grads) = {
        let tape = Tape::new();
        let ctx = model.bind(&tape, true, seed);
        let out = predict_var(model, &ctx, batch)?;
        let loss = task_loss(task, out, labels, scale)?;
        let value = loss.item().as_f64();
        let mut g = tape.backward(loss)?;
        (value, ctx.vars.iter().map(|&v| g.take(v)).collect::<Vec<_>>())
    };
    apply(model, opt, grads, loss, clip)
}

fn predict_var<'t, T: Scalar>(model: &Model<T>, ctx: &Ctx<'t, T>, batch: &ModelBatch) -> Result<Var<'t, T>, TrainError> {
    let f = model.forward(ctx, batch)?;
    let pooled = model.pool(ctx, f.tokens, batch, model.cfg.pooling)?;
    Ok(model.head(ctx, pooled)?)
}

/// Raw head outputs `[n * out_dim]` in evaluation mode, regression outputs
/// mapped back through `scale`.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    samples: &[&Sample],
    batch_size: usize,
    scale: &Standardizer,
) -> Result<Vec<f64>, TrainError> {
    let task = model
        .cfg
        .task
        .ok_or_else(|| ModelError::InvalidConfig("model has no task head".into()))?;
    let mut out = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = ModelBatch::collate(chunk)?;
        let tape = Tape::new();
        let ctx = model.bind(&tape, false, 0);
        let y = predict_var(model, &ctx, &batch)?.value();
        out.extend(y.data().iter().map(|v| match task {
            Task::Regression => scale.inverse(v.as_f64()),
            _ => v.as_f64(),
        }));
    }
    Ok(out)
}

/// Pooled GTK embeddings in evaluation mode.
pub fn embed<T: Scalar>(model: &Model<T>, samples: &[&Sample], batch_size: usize) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = ModelBatch::collate(chunk)?;
        let tape = Tape::new();
        let ctx = model.bind(&tape, false, 0);
        let f = model.forward(&ctx, &batch)?;
        let pooled = model.pool(&ctx, f.tokens, &batch, Pooling::Gtk)?.value();
        out.extend(pooled.data().chunks(model.cfg.d).map(|r| r.iter().map(|x| x.as_f64()).collect()));
    }
    Ok(out)
}

/// Mann–Whitney AUROC with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank: f64 = (0..scores.len()).filter(|&k| labels[k]).map(|k| ranks[k]).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
}

pub fn metrics_regression(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics, TrainError> {
    if preds.len() != targets.len() {
        return Err(TrainError::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(TrainError::Empty);
    }
    let n = preds.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(RegressionMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, TrainError> {
    if x.len() != y.len() {
        return Err(TrainError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(TrainError::Empty);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(TrainError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Fixed-width bit set.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    width: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn new(width: usize) -> Self {
        Fingerprint {
            width,
            words: vec![0; width.div_ceil(64)],
        }
    }

    pub fn from_bits(width: usize, bits: impl IntoIterator<Item = usize>) -> Self {
        let mut f = Fingerprint::new(width);
        for b in bits {
            f.set(b);
        }
        f
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn set(&mut self, bit: usize) {
        assert!(bit < self.width, "bit {bit} outside width {}", self.width);
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width).filter(|&b| self.get(b))
    }

    pub fn intersection_count(&self, other: &Fingerprint) -> usize {
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Circular fingerprint, radius 2, 2048 bits.
///
/// Round 0 hashes `symbol bytes, 0, degree, charge as u8, aromatic, in_ring`.
/// Each later round hashes the atom's previous code (LE) followed by its
/// neighbours as `(bond code, neighbour code LE)` sorted ascending. Every
/// code of every round sets bit `code % 2048`.
pub fn morgan_fp(m: &Molecule) -> Fingerprint {
    let mut fp = Fingerprint::new(FP_WIDTH);
    let degrees = m.degrees();
    let mut codes: Vec<u64> = m
        .atoms
        .iter()
        .zip(&degrees)
        .map(|(a, &deg)| {
            let mut bytes: Vec<u8> = a.element.symbol().as_bytes().to_vec();
            bytes.extend_from_slice(&[0, deg.min(255) as u8, a.formal_charge as u8, a.aromatic as u8, a.in_ring as u8]);
            fnv1a(&bytes)
        })
        .collect();
    codes.iter().for_each(|&c| fp.set((c % FP_WIDTH as u64) as usize));
    let adj = m.adjacency();
    for _ in 0..FP_RADIUS {
        let next: Vec<u64> = (0..m.atoms.len())
            .map(|i| {
                let mut nb: Vec<(u8, u64)> = adj[i].iter().map(|&(j, b)| (m.bonds[b].order.code(), codes[j])).collect();
                nb.sort_unstable();
                let mut bytes = codes[i].to_le_bytes().to_vec();
                for (bond, code) in nb {
                    bytes.push(bond);
                    bytes.extend_from_slice(&code.to_le_bytes());
                }
                fnv1a(&bytes)
            })
            .collect();
        codes = next;
        codes.iter().for_each(|&c| fp.set((c % FP_WIDTH as u64) as usize));
    }
    fp
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub tanimoto: f64,
    pub tanimoto_distance: f64,
    pub dice: f64,
    pub cosine: f64,
}

/// Bit-set overlap measures; two empty sets count as identical.
pub fn similarity(a: &Fingerprint, b: &Fingerprint) -> Result<Similarity, TrainError> {
    if a.width != b.width {
        return Err(TrainError::WidthMismatch(a.width, b.width));
    }
    let (na, nb, c) = (a.count() as f64, b.count() as f64, a.intersection_count(b) as f64);
    if na == 0.0 && nb == 0.0 {
        return Ok(Similarity {
            tanimoto: 1.0,
            tanimoto_distance: 0.0,
            dice: 1.0,
            cosine: 1.0,
        });
    }
    let tanimoto = c / (na + nb - c);
    let cosine = if na == 0.0 || nb == 0.0 { 0.0 } else { c / (na * nb).sqrt() };
    Ok(Similarity {
        tanimoto,
        tanimoto_distance: 1.0 - tanimoto,
        dice: 2.0 * c / (na + nb),
        cosine,
    })
}

/// Pearson correlation of embedding Euclidean distance with each fingerprint
/// measure over random pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n_pairs: usize,
    pub tanimoto_distance_r: f64,
    pub dice_r: f64,
    pub cosine_r: f64,
}

/// The fingerprint itself as a unit-length vector; a reference embedding
/// for the similarity report.
pub fn fingerprint_embedding(f: &Fingerprint) -> Vec<f64> {
    let n = (f.count().max(1) as f64).sqrt();
    (0..f.width()).map(|b| f.get(b) as u8 as f64 / n).collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Tanimoto distance should correlate positively with embedding distance;
/// Dice and cosine (similarities) negatively.
pub fn embedding_similarity_report(
    embeddings: &[Vec<f64>],
    fps: &[Fingerprint],
    n_pairs: usize,
    seed: u64,
) -> Result<SimilarityReport, TrainError> {
    if embeddings.len() != fps.len() {
        return Err(TrainError::LengthMismatch(embeddings.len(), fps.len()));
    }
    if n_pairs == 0 || embeddings.len() < 2 {
        return Err(TrainError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = embeddings.len();
    let (mut de, mut td, mut di, mut co) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let s = similarity(&fps[i], &fps[j])?;
        de.push(euclidean(&embeddings[i], &embeddings[j]));
        td.push(s.tanimoto_distance);
        di.push(s.dice);
        co.push(s.cosine);
    }
    Ok(SimilarityReport {
        n_pairs,
        tanimoto_distance_r: pearson(&de, &td)?,
        dice_r: pearson(&de, &di)?,
        cosine_r: pearson(&de, &co)?,
    })
}

/// Seeded shuffle of `0..n` split into `k` nearly equal folds.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = k.max(1);
    (0..k).map(|f| idx.iter().copied().skip(f).step_by(k).collect()).collect()
}
