//! Self-checks behind `mumo verify`: rigid-motion invariance, batching
//! equivalence, torsion formulas, gradients, tokenizer round trips,
//! similarity measures and checkpoint round trips.

use std::f64::consts::PI;
use std::fmt;
use std::time::Instant;

use mumo_core::geometry::{
    apply_rigid_transform, random_rotation, torsion_paper, torsion_standard, GeometryError,
};
use mumo_core::model::{Ctx, Model, ModelBatch, ModelConfig, ModelError, Pooling, Sample, Task};
use mumo_core::smiles::{parse_smiles, Point3};
use mumo_core::tensor::{grad_check, CheckCoords, GradCheckReport, Scalar, Tape, Tensor, Var};
use mumo_core::tokenizer::{tokenize, TokenizerKind, Vocab};
use mumo_core::train::{mlm_loss, mlm_mask, similarity, Fingerprint};
use mumo_core::unigraph::{build_unified_graph, GraphConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::Record;
use crate::error::{Error, Result};
use crate::run::build_samples;

/// Strings covering every token category of the substructure tokenizer.
pub const TOKEN_EXEMPLARS: [&str; 16] = [
    "C[C@H](N)C(=O)O",
    "C[C@@H](O)CC",
    "C[N+](C)(C)C",
    "CC(=O)[O-]",
    "[13C]CO",
    "[14C]C(=O)O",
    "c1cc[nH]c1",
    "F[B-](F)(F)F",
    "[Na+].[Cl-]",
    "C[S@](=O)CC",
    "C[Si@@](F)(Cl)Br",
    "C[NH2+]C",
    "ClCCBr",
    "C%10CCCCC%10",
    "C1CC2CC%11CCC%11C2C1",
    "C/C=C\\C#N",
];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured deviation (or failure count, for counting checks).
    pub measured: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} measured {:.3e} tolerance {:.1e} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.seconds
        )?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<(f64, String)>) -> Result<CheckResult> {
    let start = Instant::now();
    let (measured, detail) = f()?;
    Ok(CheckResult {
        name: name.to_string(),
        passed: measured < tolerance,
        measured,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
        detail,
    })
}

/// The desk model: d = 64, eight layers, fusion from layer five.
pub fn desk_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        ..ModelConfig::default()
    }
}

/// Corpus records with conformers plus the vocabulary and samples built
/// from them.
pub struct Fixtures {
    pub records: Vec<Record>,
    pub vocab: Vocab,
    pub run: RunConfig,
}

impl Fixtures {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let vocab = Vocab::build(records.iter().map(|r| r.smiles.as_str()), TokenizerKind::Substructure)?;
        let run = RunConfig {
            model: desk_config(vocab.len()),
            ..RunConfig::default()
        };
        Ok(Fixtures { records, vocab, run })
    }

    fn with_coords(&self, n: usize) -> Vec<&Record> {
        self.records.iter().filter(|r| r.coords.is_some()).take(n).collect()
    }

    fn samples(&self, records: &[Record]) -> Result<Vec<Sample>> {
        build_samples(&self.run, records, &self.vocab)
    }
}

fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

fn forward_values<T: Scalar>(model: &Model<T>, batch: &ModelBatch) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let tape = Tape::new();
    let ctx = model.bind(&tape, false, 0);
    let f = model.forward(&ctx, batch)?;
    Ok((f.tokens.value(), f.nodes.map(|n| n.value())))
}

/// Bond lengths and angles of `n_mol` conformers under `n_tf` rigid motions.
pub fn descriptor_invariance(fx: &Fixtures, n_mol: usize, n_tf: u64) -> Result<CheckResult> {
    timed("descriptor invariance f64", 1e-9, || {
        let mut worst = (0.0f64, String::new());
        for r in fx.with_coords(n_mol) {
            let mut m = parse_smiles(&r.smiles).map_err(ModelError::from)?;
            let coords = r.coords.clone().unwrap_or_default();
            m.conformer = Some(coords.clone());
            let base = build_unified_graph(&m, &GraphConfig::default()).map_err(ModelError::from)?;
            for seed in 0..n_tf {
                m.conformer = Some(apply_rigid_transform(&coords, &random_rotation(seed)));
                let moved = build_unified_graph(&m, &GraphConfig::default()).map_err(ModelError::from)?;
                if moved.geom.len() != base.geom.len() {
                    return Ok((f64::INFINITY, format!("{} seed {seed}: triplet count changed", r.smiles)));
                }
                for (a, b) in base.geom.iter().zip(&moved.geom) {
                    let d = (a.l_ij - b.l_ij).abs().max((a.l_jk - b.l_jk).abs()).max((a.theta - b.theta).abs());
                    if d > worst.0 {
                        worst = (d, format!("worst at {} seed {seed}", r.smiles));
                    }
                }
            }
        }
        Ok(worst)
    })
}

/// End-to-end 32-bit forward outputs of the desk model under rigid motions.
pub fn forward_invariance(fx: &Fixtures, n_mol: usize, n_tf: u64) -> Result<CheckResult> {
    timed("forward invariance f32", 1e-6, || {
        let model = Model::<f32>::new(fx.run.model.clone(), 7)?;
        let base: Vec<Record> = fx.with_coords(n_mol).into_iter().cloned().collect();
        let mut worst = (0.0f64, String::new());
        for chunk in base.chunks(25) {
            let samples = fx.samples(chunk)?;
            let want = forward_values(&model, &ModelBatch::collate(&samples.iter().collect::<Vec<_>>())?)?;
            for seed in 0..n_tf {
                let t = random_rotation(seed);
                let moved: Vec<Record> = chunk
                    .iter()
                    .map(|r| Record {
                        coords: r.coords.as_ref().map(|c| apply_rigid_transform(c, &t)),
                        ..r.clone()
                    })
                    .collect();
                let samples = fx.samples(&moved)?;
                let got = forward_values(&model, &ModelBatch::collate(&samples.iter().collect::<Vec<_>>())?)?;
                let mut d = max_abs_diff(&want.0, &got.0);
                if let (Some(a), Some(b)) = (&want.1, &got.1) {
                    d = d.max(max_abs_diff(a, b));
                }
                if d > worst.0 {
                    worst = (d, format!("worst at seed {seed}, batch starting {}", chunk[0].smiles));
                }
            }
        }
        Ok(worst)
    })
}

/// Batched forward against one molecule at a time, 64-bit.
pub fn batching_equivalence(fx: &Fixtures, n_batches: u64) -> Result<CheckResult> {
    timed("batching equivalence f64", 1e-10, || {
        let model = Model::<f64>::new(fx.run.model.clone(), 11)?;
        let d = model.cfg.d;
        let pool: Vec<Record> = fx.with_coords(200).into_iter().cloned().collect();
        let samples = fx.samples(&pool)?;
        let singles: Vec<_> = samples
            .iter()
            .map(|s| forward_values(&model, &ModelBatch::collate(&[s])?))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst = (0.0f64, String::new());
        for b in 0..n_batches {
            let size = rng.random_range(1..=16);
            let pick: Vec<usize> = (0..size).map(|_| rng.random_range(0..samples.len())).collect();
            let refs: Vec<&Sample> = pick.iter().map(|&i| &samples[i]).collect();
            let batch = ModelBatch::collate(&refs)?;
            let (tokens, nodes) = forward_values(&model, &batch)?;
            let mut node_off = 0;
            for (slot, &i) in pick.iter().enumerate() {
                let (one_tok, one_nodes) = &singles[i];
                let n = samples[i].ids.len();
                let row = &tokens.data()[slot * batch.len * d..(slot * batch.len + n) * d];
                let mut diff = row.iter().zip(one_tok.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if let (Some(all), Some(one)) = (&nodes, one_nodes) {
                    let k = one.data().len();
                    let part = &all.data()[node_off..node_off + k];
                    diff = diff.max(part.iter().zip(one.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
                    node_off += k;
                }
                if diff > worst.0 {
                    worst = (diff, format!("worst in batch {b} at {}", pool[i].smiles));
                }
            }
        }
        Ok(worst)
    })
}

fn angle_gap(a: f64, b: f64) -> f64 {
    (a - b).sin().atan2((a - b).cos()).abs()
}

fn random_chain(rng: &mut ChaCha8Rng) -> [Point3; 4] {
    let mut p = [[0.0; 3]; 4];
    for i in 1..4 {
        loop {
            let v: Point3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if (0.2..=1.0).contains(&n) {
                let s = rng.random_range(1.0..1.8) / n;
                p[i] = [p[i - 1][0] + s * v[0], p[i - 1][1] + s * v[1], p[i - 1][2] + s * v[2]];
                break;
            }
        }
    }
    p
}

/// Both torsion formulas: invariance, planar fixtures and sign agreement.
pub fn torsion_checks(n_chains: usize) -> Result<Vec<CheckResult>> {
    let geo = |e: GeometryError| Error::Verification(e.to_string());
    let invariance = timed("torsion invariance", 1e-9, || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut worst = 0.0f64;
        for c in 0..200u64 {
            let p = random_chain(&mut rng);
            let (tp, ts) = (torsion_paper(&p, 0, 1, 2, 3).map_err(geo)?, torsion_standard(&p, 0, 1, 2, 3).map_err(geo)?);
            for s in 0..10 {
                let q = apply_rigid_transform(&p, &random_rotation(c * 10 + s));
                worst = worst
                    .max(angle_gap(tp, torsion_paper(&q, 0, 1, 2, 3).map_err(geo)?))
                    .max(angle_gap(ts, torsion_standard(&q, 0, 1, 2, 3).map_err(geo)?));
            }
        }
        Ok((worst, "200 chains x 10 motions".into()))
    })?;
    let fixtures = timed("torsion cis/trans", 1e-9, || {
        let cis = [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [1.5, 1.0, 0.0]];
        let trans = [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [1.5, -1.0, 0.0]];
        let mut worst = 0.0f64;
        for (p, want) in [(cis, 0.0), (trans, PI)] {
            for f in [torsion_paper, torsion_standard] {
                worst = worst.max((f(&p, 0, 1, 2, 3).map_err(geo)? - want).abs());
            }
        }
        Ok((worst, String::new()))
    })?;
    let signs = timed("torsion sign agreement", 0.5, || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut bad = 0usize;
        for _ in 0..n_chains {
            let p = random_chain(&mut rng);
            let (a, b) = (torsion_paper(&p, 0, 1, 2, 3).map_err(geo)?, torsion_standard(&p, 0, 1, 2, 3).map_err(geo)?);
            if a.signum() != b.signum() {
                bad += 1;
            }
        }
        Ok((bad as f64, format!("{bad} of {n_chains} chains disagree")))
    })?;
    Ok(vec![invariance, fixtures, signs])
}

/// Fixed random weights so a tensor output becomes terms of a scalar loss
/// whose gradient reaches every coordinate.
fn projection<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let shape = out.shape();
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    Ok(out.mul(tape.constant(w)).map_err(ModelError::from)?)
}

/// Summed term magnitude at the base point. Central differences carry
/// roundoff of about eps * sum|terms| / h, so with h = 1e-6 and the 1e-8
/// floor of the relative error a vanishing gradient stays within 1e-4 only
/// while the terms sum to less than roughly 4e-3.
const LOSS_MAGNITUDE: f64 = 1e-3;

/// `grad_check` of the summed terms from `f`, rescaled by a constant so the
/// terms' absolute values sum to `LOSS_MAGNITUDE` at `params`.
fn normalized_check<F>(f: F, params: &[Tensor<f64>], per_tensor: usize, seed: u64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let base: f64 = {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = params.iter().map(|p| tape.param(p.clone())).collect();
        f(&tape, &vars)?.value().data().iter().map(|x| x.abs()).sum()
    };
    let scale = LOSS_MAGNITUDE / base.max(f64::MIN_POSITIVE);
    grad_check(
        |tape, vars| -> Result<Var<'_, f64>> { Ok(f(tape, vars)?.sum_all().scale(scale)) },
        params,
        1e-6,
        CheckCoords::Sample { per_tensor, seed },
    )
}

/// Uniform half-width with the standard deviation of the weight init.
const PERTURB: f64 = 0.02 * 1.732_050_807_568_877_2;

/// Parameters moved off their initial values by a second init-scale draw, so
/// zero biases and unit gains do not sit at special points.
fn perturbed(model: &Model<f64>, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .params
        .entries()
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-PERTURB..PERTURB));
            t
        })
        .collect()
}

fn random_input(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

type Block = for<'t> fn(&Model<f64>, &Ctx<'t, f64>, &ModelBatch, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Checks one block: `inputs` are extra differentiable arguments after the
/// model parameters.
fn check_block(
    model: &Model<f64>,
    batch: &ModelBatch,
    params: &[Tensor<f64>],
    inputs: &[Tensor<f64>],
    block: Block,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let n = params.len();
    let all: Vec<Tensor<f64>> = params.iter().chain(inputs).cloned().collect();
    normalized_check(
        |tape, vars| -> Result<Var<'_, f64>> {
            let ctx = Ctx::new(vars[..n].to_vec(), false, 0);
            let out = block(model, &ctx, batch, &vars[n..])?;
            projection(tape, out, 99)
        },
        &all,
        per_tensor,
        3,
    )
}

fn small_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        n_layers: 3,
        n_heads: 2,
        fusion_start: 2,
        mpnn_iters: 1,
        ffn_mult: 2,
        vocab_size,
        max_len: 128,
        rbf_bins: 4,
        abf_bins: 3,
        attn_dropout: 0.0,
        pooling: Pooling::Combined,
        task: Some(Task::Regression),
        ..ModelConfig::default()
    }
}

fn describe(model: &Model<f64>, name: &str, r: &GradCheckReport) -> String {
    let p = model.params.entries().get(r.worst.0).map(|(n, _)| n.as_str()).unwrap_or("input");
    format!(
        "{name}: worst {p}[{}] analytic {:.6e} numeric {:.6e} over {} coords",
        r.worst.1, r.worst_values.0, r.worst_values.1, r.checked
    )
}

/// Every block on a small model, then the full desk model.
pub fn gradient_checks(fx: &Fixtures) -> Result<Vec<CheckResult>> {
    let records: Vec<Record> = fx.with_coords(3).into_iter().cloned().collect();
    let samples = fx.samples(&records)?;
    let batch = ModelBatch::collate(&samples.iter().collect::<Vec<_>>())?;
    let blocks = timed("gradcheck blocks", 1e-4, || {
        let model = Model::<f64>::new(small_config(fx.vocab.len()), 5)?;
        let params = perturbed(&model, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = model.cfg.d;
        let (b, len) = (batch.batch, batch.len);
        let (nv, ne, ng) = (batch.global.n_nodes(), batch.global.n_edges(), batch.global.cg.len());
        let h = random_input(vec![b, len, d], &mut rng);
        let z = random_input(vec![b, len, d], &mut rng);
        let g = random_input(vec![b, d], &mut rng);
        let hv = random_input(vec![nv, d], &mut rng);
        let hv2 = random_input(vec![nv, d], &mut rng);
        let he = random_input(vec![ne, d], &mut rng);
        let hg = random_input(vec![ng, d], &mut rng);
        let pooled_in = random_input(vec![b, d], &mut rng);
        let cases: Vec<(&str, Vec<Tensor<f64>>, Block)> = vec![
            ("embed_geometry", vec![], |m, c, bt, _| Ok(m.embed_geometry(c, &bt.global)?)),
            ("mpnn_pass", vec![hv.clone(), he.clone(), hg.clone()], |m, c, bt, x| {
                let (v, e) = m.mpnn_pass(c, &bt.global, x[0], x[1], x[2])?;
                Ok(Var::concat(&[v.sum_axis(0).map_err(ModelError::from)?, e.sum_axis(0).map_err(ModelError::from)?], 0)
                    .map_err(ModelError::from)?)
            }),
            ("gated_fuse", vec![hv.clone(), hv2.clone()], |m, c, _, x| Ok(m.gated_fuse(c, x[0], x[1])?)),
            ("structural_prior", vec![], |m, c, bt, _| Ok(m.structural_prior(c, bt)?)),
            ("ssm_step", vec![h.clone(), z.clone(), g.clone()], |m, c, _, x| {
                let (h, z) = m.ssm_step(c, 1, x[0], x[1], Some(x[2]))?;
                Ok(Var::concat(&[h, z], 2).map_err(ModelError::from)?)
            }),
            ("self_attention_block", vec![h.clone()], |m, c, bt, x| Ok(m.self_attention_block(c, 1, x[0], &bt.mask)?)),
            ("ffn", vec![h.clone()], |m, c, _, x| Ok(m.ffn(c, 1, x[0])?)),
            ("iea_layer", vec![h.clone(), hv.clone()], |m, c, bt, x| {
                let o = m.iea_layer(c, 2, x[0], x[1], &bt.mask, &bt.global)?;
                let t = o.tokens.sum_axis(1).map_err(ModelError::from)?;
                Ok(Var::concat(&[t, o.nodes.sum_axis(0).map_err(ModelError::from)?.reshape(&[1, m.cfg.d]).map_err(ModelError::from)?, o.prior], 0)
                    .map_err(ModelError::from)?)
            }),
            ("pool", vec![h.clone()], |m, c, bt, x| {
                let parts: Vec<Var<'_, f64>> = [Pooling::Gtk, Pooling::Mean, Pooling::Max, Pooling::Sep, Pooling::Combined]
                    .into_iter()
                    .map(|p| m.pool(c, x[0], bt, p))
                    .collect::<std::result::Result<_, _>>()?;
                Ok(Var::concat(&parts, 1).map_err(ModelError::from)?)
            }),
            ("head", vec![pooled_in.clone()], |m, c, _, x| Ok(m.head(c, x[0])?)),
            ("mlm_loss", vec![h.clone()], |m, c, bt, x| {
                let mlm = mlm_mask(&bt.ids, &bt.mask, bt.len, m.cfg.vocab_size, 4);
                Ok(mlm_loss(m, c, x[0], &mlm)?)
            }),
        ];
        let mut worst = (0.0f64, String::new());
        for (name, inputs, block) in cases {
            let r = check_block(&model, &batch, &params, &inputs, block, 12)?;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, describe(&model, name, &r));
            }
        }
        Ok(worst)
    })?;
    let full = timed("gradcheck desk model", 1e-4, || {
        let report = desk_gradcheck(fx, &batch)?;
        Ok((report.0.max_rel_error, report.1))
    })?;
    Ok(vec![blocks, full])
}

/// Full forward, combined pooling and regression head of the desk model.
pub fn desk_gradcheck(fx: &Fixtures, batch: &ModelBatch) -> Result<(GradCheckReport, String)> {
    let cfg = ModelConfig {
        pooling: Pooling::Combined,
        task: Some(Task::Regression),
        attn_dropout: 0.0,
        ..fx.run.model.clone()
    };
    let model = Model::<f64>::new(cfg, 3)?;
    let params = perturbed(&model, 4);
    let r = normalized_check(
        |tape, vars| -> Result<Var<'_, f64>> {
            let ctx = Ctx::new(vars.to_vec(), false, 0);
            let f = model.forward(&ctx, batch)?;
            let pooled = model.pool(&ctx, f.tokens, batch, Pooling::Combined)?;
            projection(tape, model.head(&ctx, pooled)?, 17)
        },
        &params,
        3,
        1,
    )?;
    let detail = describe(&model, "desk", &r);
    Ok((r, detail))
}

/// Lossless tokenization of the corpus and the category exemplars, with
/// bracket atoms and `%NN` closures kept whole.
pub fn tokenizer_roundtrip(fx: &Fixtures) -> Result<CheckResult> {
    timed("tokenizer round trip", 0.5, || {
        let mut bad = Vec::new();
        let strings = fx.records.iter().map(|r| r.smiles.as_str()).chain(TOKEN_EXEMPLARS);
        let mut total = 0usize;
        for s in strings {
            total += 1;
            let toks = tokenize(s)?;
            let whole = toks.concat() == s;
            let atomic = toks.iter().all(|t| {
                (!t.starts_with('[') || t.ends_with(']')) && (!t.starts_with('%') || t.len() == 3)
            });
            let brackets = s.matches('[').count() == toks.iter().filter(|t| t.starts_with('[')).count();
            let closures = s.matches('%').count() == toks.iter().filter(|t| t.starts_with('%')).count();
            if !(whole && atomic && brackets && closures) {
                bad.push(s.to_string());
            }
        }
        let detail = if bad.is_empty() {
            format!("{total} strings")
        } else {
            format!("failing: {}", bad.join(" "))
        };
        Ok((bad.len() as f64, detail))
    })
}

/// Overlap measures against a plain loop over bits, plus the worked case
/// `|A| = |B| = 4`, `|A ∩ B| = 2`.
pub fn similarity_exactness(n_pairs: usize) -> Result<CheckResult> {
    timed("similarity exactness", 0.5, || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bad = 0usize;
        for _ in 0..n_pairs {
            let width = rng.random_range(1..=256);
            let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let a: Vec<bool> = (0..width).map(|_| rng.random_bool(pa)).collect();
            let b: Vec<bool> = (0..width).map(|_| rng.random_bool(pb)).collect();
            let fa = Fingerprint::from_bits(width, (0..width).filter(|&i| a[i]));
            let fb = Fingerprint::from_bits(width, (0..width).filter(|&i| b[i]));
            let s = similarity(&fa, &fb)?;
            let (mut na, mut nb, mut c, mut u) = (0u32, 0u32, 0u32, 0u32);
            for i in 0..width {
                na += a[i] as u32;
                nb += b[i] as u32;
                c += (a[i] && b[i]) as u32;
                u += (a[i] || b[i]) as u32;
            }
            let (na, nb, c, u) = (na as f64, nb as f64, c as f64, u as f64);
            let (t, d, cos) = if u == 0.0 {
                (1.0, 1.0, 1.0)
            } else if na == 0.0 || nb == 0.0 {
                (c / u, 2.0 * c / (na + nb), 0.0)
            } else {
                (c / u, 2.0 * c / (na + nb), c / (na * nb).sqrt())
            };
            if s.tanimoto != t || s.dice != d || s.cosine != cos {
                bad += 1;
            }
        }
        let a = Fingerprint::from_bits(16, [0, 1, 2, 3]);
        let b = Fingerprint::from_bits(16, [2, 3, 4, 5]);
        let s = similarity(&a, &b)?;
        if s.tanimoto != 1.0 / 3.0 || s.dice != 0.5 || s.cosine != 0.5 {
            bad += 1;
        }
        Ok((bad as f64, format!("{n_pairs} random pairs plus the worked case")))
    })
}

/// save → load → save of a desk checkpoint, compared byte for byte.
pub fn checkpoint_roundtrip(fx: &Fixtures) -> Result<CheckResult> {
    timed("checkpoint round trip", 0.5, || {
        let model = Model::<f32>::new(fx.run.model.clone(), 21)?;
        let dir = std::env::temp_dir().join(format!("mumo-verify-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (p1, p2) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
        checkpoint::save(&p1, &model.params)?;
        let loaded = checkpoint::load::<f32>(&p1)?;
        checkpoint::save(&p2, &loaded)?;
        let a = std::fs::read(&p1).map_err(|e| Error::io(&p1, e))?;
        let b = std::fs::read(&p2).map_err(|e| Error::io(&p2, e))?;
        let _ = std::fs::remove_dir_all(&dir);
        let same = a == b && loaded == model.params;
        let mut bad = usize::from(!same);
        // Every strict prefix must be rejected.
        bad += (0..a.len()).step_by(997).filter(|&n| checkpoint::decode::<f32>(&a[..n]).is_ok()).count();
        Ok((bad as f64, format!("{} bytes", a.len())))
    })
}

/// Runs every suite, reporting each result through `on_result` as it lands.
pub fn run_all(records: Vec<Record>, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let fx = Fixtures::new(records)?;
    let mut out = Vec::new();
    let mut push = |r: CheckResult| {
        on_result(&r);
        out.push(r);
    };
    push(descriptor_invariance(&fx, 100, 20)?);
    push(forward_invariance(&fx, 100, 20)?);
    push(batching_equivalence(&fx, 50)?);
    for r in torsion_checks(1000)? {
        push(r);
    }
    for r in gradient_checks(&fx)? {
        push(r);
    }
    push(tokenizer_roundtrip(&fx)?);
    push(similarity_exactness(10_000)?);
    push(checkpoint_roundtrip(&fx)?);
    Ok(out)
}
