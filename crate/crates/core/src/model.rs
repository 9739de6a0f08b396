//! The two-stream network: message passing over the unified graph, gated
//! multiscale fusion, a stack of state-space + attention layers on the token
//! sequence, and injection-enhanced attention in the late (fusion) layers.
//!
//! Parameters live in a flat, named [`ParamStore`]. Every forward pass binds
//! them onto a fresh [`Tape`] through a [`Ctx`], so the same code serves
//! training (`f32`) and verification (`f64`).
//!
//! All parameters are created in one fixed order whatever the mode flags say,
//! so two configurations that differ only in flags start from identical
//! weights for the parts they share.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::f64::consts::PI;

#[allow(unused_imports)] // Supplies float math when std is absent.
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::GeomTriplet;
use crate::partition::{compute_cut_set, segment_graph, CutRuleSet, PartitionError};
use crate::smiles::{parse_smiles, Point3, SmilesError, ATOM_FEATURE_DIM, BOND_FEATURE_DIM};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{encode, TokenizerError, TokenizerKind, Vocab};
use crate::unigraph::{batch_graphs, build_unified_graph, GraphConfig, GraphError, PaddingLayout, UnifiedGraph};

/// Additive mask value for disallowed attention keys.
pub const MASK_FILL: f64 = -1e9;
const INIT_STD: f64 = 0.02;
const RBF_MIN: f64 = 0.8;
const RBF_MAX: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("layer {0} is not a fusion layer")]
    NotAFusionLayer(usize),
    #[error("missing or misshapen parameter {0}")]
    BadParameter(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("conformer has {got} points for {expected} atoms")]
    ConformerLength { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injection {
    /// Graph node states are carried forward and updated by every fusion layer.
    #[default]
    Progressive,
    /// Every fusion layer re-reads the initial fused node states.
    Fixed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Gtk,
    Mean,
    Max,
    Sep,
    /// GTK, mean, max and SEP concatenated and mapped back to `d`.
    Combined,
}

/// Which structure keys the sequence attends to in a fusion layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKeys {
    /// Keys and values from the node states entering the layer.
    #[default]
    Pre,
    /// Keys and values recomputed from the node states after they attended
    /// to the sequence.
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Binary,
    MultiLabel { n: usize },
    Regression,
}

impl Task {
    pub fn out_dim(self) -> usize {
        match self {
            Task::Binary | Task::Regression => 1,
            Task::MultiLabel { n } => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// 1-based index of the first fusion layer; `n_layers + 1` disables injection.
    pub fusion_start: usize,
    pub mpnn_iters: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub rbf_bins: usize,
    pub abf_bins: usize,
    pub use_graph: bool,
    pub use_geometry: bool,
    pub injection: Injection,
    pub pooling: Pooling,
    pub structure_keys: StructureKeys,
    pub attn_dropout: f64,
    pub task: Option<Task>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_layers: 8,
            n_heads: 4,
            fusion_start: 5,
            mpnn_iters: 2,
            ffn_mult: 4,
            vocab_size: 64,
            max_len: 128,
            rbf_bins: 16,
            abf_bins: 12,
            use_graph: true,
            use_geometry: true,
            injection: Injection::Progressive,
            pooling: Pooling::Gtk,
            structure_keys: StructureKeys::Pre,
            attn_dropout: 0.1,
            task: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad("d must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.fusion_start == 0 || self.fusion_start > self.n_layers + 1 {
            return bad("fusion_start must lie in 1..=n_layers+1");
        }
        if self.ffn_mult == 0 || self.vocab_size == 0 || self.max_len < 2 {
            return bad("ffn_mult, vocab_size must be positive and max_len at least 2");
        }
        if self.rbf_bins < 2 || self.abf_bins < 2 {
            return bad("rbf_bins and abf_bins must be at least 2");
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return bad("attn_dropout must lie in [0, 1)");
        }
        if let Some(Task::MultiLabel { n: 0 }) = self.task {
            return bad("multi-label task needs at least one label");
        }
        Ok(())
    }

    /// Whether layer `t` (1-based) runs injection-enhanced attention.
    pub fn is_fusion_layer(&self, t: usize) -> bool {
        self.use_graph && t >= self.fusion_start && t <= self.n_layers
    }

    fn graph_active(&self) -> bool {
        self.use_graph && self.fusion_start <= self.n_layers
    }

    pub fn geometry_feature_dim(&self) -> usize {
        2 * self.rbf_bins + self.abf_bins + 2
    }
}

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        ParamStore { entries }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    a: Lin,
    b: Lin,
}

#[derive(Clone, Debug)]
struct MpnnIter {
    edge_msg: Mlp,
    edge_upd: Mlp,
    edge_norm: Norm,
    node_msg: Mlp,
    node_upd: Mlp,
    node_norm: Norm,
}

#[derive(Clone, Debug)]
struct GraphParams {
    node_in: Lin,
    edge_in: Lin,
    geom: Lin,
    no_geom: usize,
    iters: Vec<MpnnIter>,
    gate: Lin,
    mix: Lin,
}

#[derive(Clone, Copy, Debug)]
struct Ssm {
    raw_a: usize,
    b_s: usize,
    b_g: usize,
    c: usize,
    d: usize,
}

#[derive(Clone, Copy, Debug)]
struct Fusion {
    q: Lin,
    k: Lin,
    v: Lin,
    out_f: Lin,
    out_s: Lin,
    norm_inj: Norm,
    alpha: usize,
}

#[derive(Clone, Debug)]
struct Layer {
    ssm: Ssm,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    norm_attn: Norm,
    fusion: Fusion,
    ffn: Mlp,
    norm_ffn: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    graph: GraphParams,
    layers: Vec<Layer>,
    pool_combine: Lin,
    mlm: Lin,
    head: Option<Lin>,
}

struct Init {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn normal(&mut self, name: String, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.store.push(name, Tensor::from_vec(shape, data))
    }

    fn fill(&mut self, name: String, shape: Vec<usize>, v: f64) -> usize {
        self.store.push(name, Tensor::full(shape, v))
    }

    fn lin(&mut self, name: &str, i: usize, o: usize) -> Lin {
        Lin {
            w: self.normal(alloc::format!("{name}.w"), vec![i, o]),
            b: Some(self.fill(alloc::format!("{name}.b"), vec![o], 0.0)),
        }
    }

    /// Attention keys carry no bias: it shifts every score of a query by the
    /// same amount, which softmax ignores.
    fn key(&mut self, name: &str, d: usize) -> Lin {
        Lin {
            w: self.normal(alloc::format!("{name}.w"), vec![d, d]),
            b: None,
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.fill(alloc::format!("{name}.g"), vec![d], 1.0),
            b: self.fill(alloc::format!("{name}.b"), vec![d], 0.0),
        }
    }

    fn mlp(&mut self, name: &str, i: usize, h: usize, o: usize) -> Mlp {
        Mlp {
            a: self.lin(&alloc::format!("{name}.0"), i, h),
            b: self.lin(&alloc::format!("{name}.1"), h, o),
        }
    }
}

fn build_layout(cfg: &ModelConfig, init: &mut Init) -> Layout {
    let d = cfg.d;
    let tok_emb = init.normal("tok_emb".into(), vec![cfg.vocab_size, d]);
    let pos_emb = init.normal("pos_emb".into(), vec![cfg.max_len, d]);
    let node_in = init.lin("graph.node_in", ATOM_FEATURE_DIM, d);
    let edge_in = init.lin("graph.edge_in", BOND_FEATURE_DIM, d);
    let geom = init.lin("graph.geom", cfg.geometry_feature_dim(), d);
    let no_geom = init.normal("graph.no_geom".into(), vec![1, d]);
    let iters = (0..cfg.mpnn_iters)
        .map(|t| {
            let p = alloc::format!("graph.mpnn{t}");
            MpnnIter {
                edge_msg: init.mlp(&alloc::format!("{p}.edge_msg"), 3 * d, d, d),
                edge_upd: init.mlp(&alloc::format!("{p}.edge_upd"), 2 * d, d, d),
                edge_norm: init.norm(&alloc::format!("{p}.edge_norm"), d),
                node_msg: init.mlp(&alloc::format!("{p}.node_msg"), 3 * d, d, d),
                node_upd: init.mlp(&alloc::format!("{p}.node_upd"), 2 * d, d, d),
                node_norm: init.norm(&alloc::format!("{p}.node_norm"), d),
            }
        })
        .collect();
    let gate = init.lin("graph.gate", 3 * d, d);
    let mix = init.lin("graph.mix", 2 * d, d);
    let layers = (1..=cfg.n_layers)
        .map(|t| {
            let p = alloc::format!("layer{t}");
            let ssm = Ssm {
                raw_a: init.fill(alloc::format!("{p}.ssm.raw_a"), vec![d], 2.0),
                b_s: init.normal(alloc::format!("{p}.ssm.b_s"), vec![d, d]),
                b_g: init.normal(alloc::format!("{p}.ssm.b_g"), vec![d, d]),
                c: init.normal(alloc::format!("{p}.ssm.c"), vec![d, d]),
                d: init.normal(alloc::format!("{p}.ssm.d"), vec![d, d]),
            };
            let q = init.lin(&alloc::format!("{p}.attn.q"), d, d);
            let k = init.key(&alloc::format!("{p}.attn.k"), d);
            let v = init.lin(&alloc::format!("{p}.attn.v"), d, d);
            let o = init.lin(&alloc::format!("{p}.attn.o"), d, d);
            let norm_attn = init.norm(&alloc::format!("{p}.attn.norm"), d);
            let fusion = Fusion {
                q: init.lin(&alloc::format!("{p}.fuse.q"), d, d),
                k: init.key(&alloc::format!("{p}.fuse.k"), d),
                v: init.lin(&alloc::format!("{p}.fuse.v"), d, d),
                out_f: init.lin(&alloc::format!("{p}.fuse.out_f"), d, d),
                out_s: init.lin(&alloc::format!("{p}.fuse.out_s"), d, d),
                norm_inj: init.norm(&alloc::format!("{p}.fuse.norm_inj"), d),
                alpha: init.fill(alloc::format!("{p}.fuse.alpha"), vec![1], 0.1),
            };
            let ffn = init.mlp(&alloc::format!("{p}.ffn"), d, cfg.ffn_mult * d, d);
            let norm_ffn = init.norm(&alloc::format!("{p}.ffn.norm"), d);
            Layer {
                ssm,
                q,
                k,
                v,
                o,
                norm_attn,
                fusion,
                ffn,
                norm_ffn,
            }
        })
        .collect();
    let pool_combine = init.lin("pool.combine", 4 * d, d);
    let mlm = init.lin("mlm", d, cfg.vocab_size);
    let head = cfg.task.map(|t| init.lin("head", d, t.out_dim()));
    Layout {
        tok_emb,
        pos_emb,
        graph: GraphParams {
            node_in,
            edge_in,
            geom,
            no_geom,
            iters,
            gate,
            mix,
        },
        layers,
        pool_combine,
        mlm,
        head,
    }
}

/// Fresh parameters: weights `N(0, 0.02²)`, biases 0, norms (1, 0),
/// `alpha = 0.1`, `raw_a = 2`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f64>, ModelError> {
    cfg.validate()?;
    let mut init = Init {
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        normal: Normal::new(0.0, INIT_STD).expect("valid std"),
    };
    build_layout(cfg, &mut init);
    Ok(init.store)
}

/// Closed-form number of scalar parameters.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d;
    let lin = |i: usize, o: usize| i * o + o;
    let mlp = |i: usize, h: usize, o: usize| lin(i, h) + lin(h, o);
    let embeddings = cfg.vocab_size * d + cfg.max_len * d;
    let graph = lin(ATOM_FEATURE_DIM, d)
        + lin(BOND_FEATURE_DIM, d)
        + lin(cfg.geometry_feature_dim(), d)
        + d
        + cfg.mpnn_iters * (2 * mlp(3 * d, d, d) + 2 * mlp(2 * d, d, d) + 4 * d)
        + lin(3 * d, d)
        + lin(2 * d, d);
    let attn = 4 * lin(d, d) - d;
    let fusion = 5 * lin(d, d) - d + 2 * d + 1;
    let layer = (d + 4 * d * d) + attn + 2 * d + fusion + mlp(d, cfg.ffn_mult * d, d) + 2 * d;
    let head = cfg.task.map_or(0, |t| lin(d, t.out_dim()));
    embeddings + graph + cfg.n_layers * layer + lin(4 * d, d) + lin(d, cfg.vocab_size) + head
}

/// One molecule ready for batching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `[GTK] .. [SEP]` without padding.
    pub ids: Vec<usize>,
    pub global: UnifiedGraph,
    pub sub: UnifiedGraph,
    pub fragment_idx: Vec<usize>,
    pub label: Vec<f64>,
}

/// Everything needed to turn SMILES and coordinates into a [`Sample`].
#[derive(Clone, Debug)]
pub struct SampleBuilder<'a> {
    pub vocab: &'a Vocab,
    pub tokenizer: TokenizerKind,
    pub max_len: usize,
    pub graph: GraphConfig,
    pub rules: &'a CutRuleSet,
}

impl SampleBuilder<'_> {
    pub fn build(&self, smiles: &str, coords: Option<Vec<Point3>>, label: Vec<f64>) -> Result<Sample, ModelError> {
        let mut m = parse_smiles(smiles)?;
        if let Some(c) = coords {
            if c.len() != m.atom_count() {
                return Err(ModelError::ConformerLength {
                    expected: m.atom_count(),
                    got: c.len(),
                });
            }
            m.conformer = Some(c);
        }
        let seq = encode(smiles, self.vocab, self.max_len, self.tokenizer)?;
        let global = build_unified_graph(&m, &self.graph)?;
        let cut = compute_cut_set(&global, &m, self.rules);
        let seg = segment_graph(&global, &cut)?;
        Ok(Sample {
            ids: seq.ids[..seq.real_len()].to_vec(),
            global,
            sub: seg.sub,
            fragment_idx: seg.fragment_idx,
            label,
        })
    }
}

/// Padded token ids plus the batched global and segmented graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    /// True at real token positions, `[batch * len]`.
    pub mask: Vec<bool>,
    pub sep_pos: Vec<usize>,
    pub global: UnifiedGraph,
    pub sub: UnifiedGraph,
}

impl ModelBatch {
    /// Pads to the longest sequence in the batch.
    pub fn collate(samples: &[&Sample]) -> Result<ModelBatch, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let len = samples.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(samples.len() * len);
        let mut mask = Vec::with_capacity(samples.len() * len);
        for s in samples {
            ids.extend_from_slice(&s.ids);
            mask.extend(core::iter::repeat_n(true, s.ids.len()));
            for _ in s.ids.len()..len {
                ids.push(crate::tokenizer::PAD_ID);
                mask.push(false);
            }
        }
        let globals: Vec<UnifiedGraph> = samples.iter().map(|s| s.global.clone()).collect();
        let subs: Vec<UnifiedGraph> = samples.iter().map(|s| s.sub.clone()).collect();
        Ok(ModelBatch {
            batch: samples.len(),
            len,
            ids,
            mask,
            sep_pos: samples.iter().map(|s| s.ids.len() - 1).collect(),
            global: batch_graphs(&globals)?,
            sub: batch_graphs(&subs)?,
        })
    }

    /// Replaces the token ids, keeping padding and graphs.
    pub fn with_ids(&self, ids: Vec<usize>) -> ModelBatch {
        ModelBatch { ids, ..self.clone() }
    }
}

/// Attention weights captured during a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub kind: String,
    /// `[batch, heads, queries, keys]`
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Optional per-forward diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub attention: Vec<AttentionRecord>,
    /// `[batch, d]` GTK rows after each layer.
    pub layer_gtk: Vec<Vec<f64>>,
}

/// Parameters bound to one tape, plus per-pass settings.
pub struct Ctx<'t, T: Scalar> {
    pub vars: Vec<Var<'t, T>>,
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
    trace: Option<RefCell<Trace>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    /// Wraps already-registered parameter vars, in [`ParamStore`] order.
    pub fn new(vars: Vec<Var<'t, T>>, train: bool, seed: u64) -> Self {
        Ctx {
            vars,
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            trace: None,
        }
    }

    fn v(&self, i: usize) -> Var<'t, T> {
        self.vars[i]
    }

    fn tape(&self) -> &'t Tape<T> {
        self.vars[0].tape()
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Trace::default()));
        self
    }

    pub fn take_trace(&self) -> Option<Trace> {
        self.trace.as_ref().map(|t| core::mem::take(&mut *t.borrow_mut()))
    }

    fn lin(&self, l: Lin, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let y = x.matmul(self.v(l.w))?;
        match l.b {
            Some(b) => y.add(self.v(b)),
            None => Ok(y),
        }
    }

    fn mlp(&self, m: Mlp, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let h = self.lin(m.a, x)?.silu();
        self.lin(m.b, h)
    }

    fn norm(&self, n: Norm, x: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        x.layer_norm(self.v(n.g), self.v(n.b))
    }

    fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape().constant(t)
    }

    /// Multi-head attention of `q [B, Lq, d]` over `k, v [B, Lk, d]`;
    /// `key_mask [B * Lk]` marks keys that may be attended.
    fn attention(
        &self,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        key_mask: &[bool],
        heads: usize,
        dropout: f64,
        tag: (usize, &str),
    ) -> Result<Var<'t, T>, TensorError> {
        let (qs, ks) = (q.shape(), k.shape());
        let (b, lq, d, lk) = (qs[0], qs[1], qs[2], ks[1]);
        let dh = d / heads;
        let split = |x: Var<'t, T>, l: usize| x.reshape(&[b, l, heads, dh])?.permute(&[0, 2, 1, 3]);
        let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
        let scores = qh.matmul(kh.transpose()?)?.scale(T::of(1.0 / (dh as f64).sqrt()));
        let mut blocked = Vec::with_capacity(b * heads * lq * lk);
        for bi in 0..b {
            for _ in 0..heads * lq {
                blocked.extend(key_mask[bi * lk..(bi + 1) * lk].iter().map(|&m| !m));
            }
        }
        let p = scores.masked_fill(&blocked, T::of(MASK_FILL))?.softmax();
        if let Some(trace) = &self.trace {
            trace.borrow_mut().attention.push(AttentionRecord {
                layer: tag.0,
                kind: tag.1.to_string(),
                shape: vec![b, heads, lq, lk],
                weights: p.with_value(|t| t.data().iter().map(|x| x.as_f64()).collect()),
            });
        }
        let p = if self.train {
            p.dropout(dropout, &mut *self.rng.borrow_mut())
        } else {
            p
        };
        p.matmul(vh)?.permute(&[0, 2, 1, 3])?.reshape(&[b, lq, d])
    }
}

/// Output of [`Model::forward`].
pub struct Forward<'t, T: Scalar> {
    /// `[batch, len, d]`
    pub tokens: Var<'t, T>,
    /// Final graph node states, when the structural stream ran.
    pub nodes: Option<Var<'t, T>>,
}

/// Output of one injection-enhanced attention layer.
pub struct IeaOutput<'t, T: Scalar> {
    pub tokens: Var<'t, T>,
    pub nodes: Var<'t, T>,
    pub prior: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Gaussian basis over `[lo, hi]` with `bins` centers, width = spacing.
fn gaussian_basis(x: f64, lo: f64, hi: f64, bins: usize, out: &mut Vec<f64>) {
    let step = (hi - lo) / (bins - 1) as f64;
    for k in 0..bins {
        let c = lo + step * k as f64;
        let z = (x - c) / step;
        out.push((-z * z).exp());
    }
}

/// Invariant features of each triplet: RBF(l_ij) | RBF(l_jk) | angular basis(θ) | cos θ | sin θ.
pub fn geometry_features(geom: &[GeomTriplet], rbf_bins: usize, abf_bins: usize) -> Tensor<f64> {
    let width = 2 * rbf_bins + abf_bins + 2;
    let mut data = Vec::with_capacity(geom.len() * width);
    for t in geom {
        gaussian_basis(t.l_ij, RBF_MIN, RBF_MAX, rbf_bins, &mut data);
        gaussian_basis(t.l_jk, RBF_MIN, RBF_MAX, rbf_bins, &mut data);
        gaussian_basis(t.theta, 0.0, PI, abf_bins, &mut data);
        data.push(t.theta.cos());
        data.push(t.theta.sin());
    }
    Tensor::from_vec(vec![geom.len(), width], data)
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&cfg, seed)?.cast();
        Self::from_params(cfg, params)
    }

    /// Wraps existing parameters, checking names and shapes against `cfg`.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        let reference = init_params(&cfg, 0)?;
        if reference.len() != params.len() {
            return Err(ModelError::BadParameter(alloc::format!(
                "expected {} tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.entries().iter().zip(params.entries()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(ModelError::BadParameter(n.clone()));
            }
        }
        let mut init = Init {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let layout = build_layout(&cfg, &mut init);
        Ok(Model { cfg, params, layout })
    }

    /// Registers every parameter on `tape`; `seed` drives dropout.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, train: bool, seed: u64) -> Ctx<'t, T> {
        Ctx {
            vars: self.params.entries().iter().map(|(_, t)| tape.param(t.clone())).collect(),
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            trace: None,
        }
    }

    /// Per-pair geometric embeddings `[|cg|, d]`; pairs without a triplet
    /// (or all pairs when geometry is off) use the learned no-geometry row.
    pub fn embed_geometry<'t>(&self, ctx: &Ctx<'t, T>, g: &UnifiedGraph) -> Result<Var<'t, T>, ModelError> {
        let p = &self.layout.graph;
        let no_geom = ctx.v(p.no_geom);
        if !self.cfg.use_geometry || g.geom.is_empty() {
            return Ok(no_geom.gather_rows(&vec![0; g.cg.len()])?);
        }
        let feats = geometry_features(&g.geom, self.cfg.rbf_bins, self.cfg.abf_bins).cast::<T>();
        let rows = ctx.lin(p.geom, ctx.constant(feats))?;
        let table = Var::concat(&[rows, no_geom], 0)?;
        let idx: Vec<usize> = g.geom_slot.iter().map(|s| s.unwrap_or(g.geom.len())).collect();
        Ok(table.gather_rows(&idx)?)
    }

    /// Edge-centred then node-centred updates, `mpnn_iters` times.
    pub fn mpnn_pass<'t>(
        &self,
        ctx: &Ctx<'t, T>,
        g: &UnifiedGraph,
        mut h_v: Var<'t, T>,
        mut h_e: Var<'t, T>,
        h_g: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), ModelError> {
        let first: Vec<usize> = g.cg.iter().map(|p| p.0).collect();
        let second: Vec<usize> = g.cg.iter().map(|p| p.1).collect();
        let (src, dst) = g.endpoints();
        for it in &self.layout.graph.iters {
            let pair = Var::concat(&[h_e.gather_rows(&first)?, h_e.gather_rows(&second)?, h_g], 1)?;
            let m_e = ctx.mlp(it.edge_msg, pair)?.index_add(&first, g.n_edges())?;
            let upd = ctx.mlp(it.edge_upd, Var::concat(&[h_e, m_e], 1)?)?;
            h_e = ctx.norm(it.edge_norm, h_e.add(upd)?)?;

            let msg_in = Var::concat(&[h_v.gather_rows(&dst)?, h_v.gather_rows(&src)?, h_e], 1)?;
            let m_v = ctx.mlp(it.node_msg, msg_in)?.index_add(&dst, g.n_nodes())?;
            let upd = ctx.mlp(it.node_upd, Var::concat(&[h_v, m_v], 1)?)?;
            h_v = ctx.norm(it.node_norm, h_v.add(upd)?)?;
        }
        Ok((h_v, h_e))
    }

    /// `β = σ(φ[h, h_sub, h − h_sub])`, `h' = β h + (1 − β) ϕ[h, h_sub]`.
    pub fn gated_fuse<'t>(&self, ctx: &Ctx<'t, T>, h: Var<'t, T>, h_sub: Var<'t, T>) -> Result<Var<'t, T>, ModelError> {
        if h.shape() != h_sub.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "gated_fuse",
                lhs: h.shape(),
                rhs: h_sub.shape(),
            }
            .into());
        }
        let p = &self.layout.graph;
        let beta = ctx.lin(p.gate, Var::concat(&[h, h_sub, h.sub(h_sub)?], 1)?)?.sigmoid();
        let mixed = ctx.lin(p.mix, Var::concat(&[h, h_sub], 1)?)?;
        let one_minus = beta.scale(-T::one()).add_scalar(T::one());
        Ok(h.mul(beta)?.add(mixed.mul(one_minus)?)?)
    }

    /// Fused node states `h'_V` from message passing on both scales.
    pub fn structural_prior<'t>(&self, ctx: &Ctx<'t, T>, batch: &ModelBatch) -> Result<Var<'t, T>, ModelError> {
        let p = &self.layout.graph;
        let h_v0 = ctx.lin(p.node_in, ctx.constant(batch.global.node_feats.cast()))?;
        let run = |g: &UnifiedGraph| -> Result<Var<'t, T>, ModelError> {
            let h_e = ctx.lin(p.edge_in, ctx.constant(g.edge_feats.cast()))?;
            let h_g = self.embed_geometry(ctx, g)?;
            Ok(self.mpnn_pass(ctx, g, h_v0, h_e, h_g)?.0)
        };
        let h_global = run(&batch.global)?;
        let h_sub = run(&batch.sub)?;
        self.gated_fuse(ctx, h_global, h_sub)
    }

    /// `z' = σ(raw_a) ⊙ z + h B_s + g B_g`, `h' = z' C + h D`, per token;
    /// `g [B, d]` is broadcast over positions.
    pub fn ssm_step<'t>(
        &self,
        ctx: &Ctx<'t, T>,
        layer: usize,
        h: Var<'t, T>,
        z: Var<'t, T>,
        g: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), ModelError> {
        let s = self.layer(layer)?.ssm;
        let a = ctx.v(s.raw_a).sigmoid();
        let mut z_next = z.mul(a)?.add(h.matmul(ctx.v(s.b_s))?)?;
        if let Some(g) = g {
            let len = h.shape()[1];
            z_next = z_next.add(g.matmul(ctx.v(s.b_g))?.expand(1, len)?)?;
        }
        let h_next = z_next.matmul(ctx.v(s.c))?.add(h.matmul(ctx.v(s.d))?)?;
        Ok((h_next, z_next))
    }

    fn layer(&self, t: usize) -> Result<&Layer, ModelError> {
        t.checked_sub(1)
            .and_then(|i| self.layout.layers.get(i))
            .ok_or_else(|| ModelError::InvalidConfig(alloc::format!("no layer {t}")))
    }

    /// `LN(h + O · SelfAttention(h))`
    pub fn self_attention_block<'t>(
        &self,
        ctx: &Ctx<'t, T>,
        layer: usize,
        h: Var<'t, T>,
        mask: &[bool],
    ) -> Result<Var<'t, T>, ModelError> {
        let l = self.layer(layer)?;
        let (q, k, v) = (ctx.lin(l.q, h)?, ctx.lin(l.k, h)?, ctx.lin(l.v, h)?);
        let a = ctx.attention(q, k, v, mask, self.cfg.n_heads, self.cfg.attn_dropout, (layer, "self"))?;
        Ok(ctx.norm(l.norm_attn, h.add(ctx.lin(l.o, a)?)?)?)
    }

    /// `LN(h + MLP_silu(h))`
    pub fn ffn<'t>(&self, ctx: &Ctx<'t, T>, layer: usize, h: Var<'t, T>) -> Result<Var<'t, T>, ModelError> {
        let l = self.layer(layer)?;
        Ok(ctx.norm(l.norm_ffn, h.add(ctx.mlp(l.ffn, h)?)?)?)
    }

    /// Self-attention, bidirectional cross-attention between tokens and graph
    /// nodes, and injection of the pooled node states into the GTK row.
    pub fn iea_layer<'t>(
        &self,
        ctx: &Ctx<'t, T>,
        layer: usize,
        h: Var<'t, T>,
        nodes: Var<'t, T>,
        seq_mask: &[bool],
        graph: &UnifiedGraph,
    ) -> Result<IeaOutput<'t, T>, ModelError> {
        if !self.cfg.is_fusion_layer(layer) {
            return Err(ModelError::NotAFusionLayer(layer));
        }
        let l = self.layer(layer)?;
        let f = l.fusion;
        let heads = self.cfg.n_heads;
        let p = self.cfg.attn_dropout;
        let shape = h.shape();
        let (b, len, d) = (shape[0], shape[1], shape[2]);
        let layout = PaddingLayout::new(&graph.batch_idx, graph.n_graphs)?;
        let node_mask = layout.mask();

        let h_f = layout.unbatch(nodes)?;
        let (q_s, k_s, v_s) = (ctx.lin(l.q, h)?, ctx.lin(l.k, h)?, ctx.lin(l.v, h)?);
        let (q_f, k_f, v_f) = (ctx.lin(f.q, h_f)?, ctx.lin(f.k, h_f)?, ctx.lin(f.v, h_f)?);

        let sa = ctx.attention(q_s, k_s, v_s, seq_mask, heads, p, (layer, "self"))?;
        let h_sa = ctx.norm(l.norm_attn, h.add(ctx.lin(l.o, sa)?)?)?;

        let f_from_s = ctx.attention(q_f, k_s, v_s, seq_mask, heads, p, (layer, "structure_to_sequence"))?;
        let h_f_next = h_f.add(ctx.lin(f.out_f, f_from_s)?)?;

        let (k_f, v_f) = match self.cfg.structure_keys {
            StructureKeys::Pre => (k_f, v_f),
            StructureKeys::Post => (ctx.lin(f.k, h_f_next)?, ctx.lin(f.v, h_f_next)?),
        };
        let s_from_f = ctx.attention(q_s, k_f, v_f, &node_mask, heads, p, (layer, "sequence_to_structure"))?;
        let h_s = h_sa.add(ctx.lin(f.out_s, s_from_f)?)?;

        let nodes_next = layout.rebatch(h_f_next)?;
        let pooled_from = match self.cfg.injection {
            Injection::Progressive => nodes_next,
            Injection::Fixed => nodes,
        };
        let pooled = pooled_from.index_add(&graph.batch_idx, b)?;
        let gtk = h_s.slice(1, 0, 1)?.reshape(&[b, d])?;
        let gtk = ctx.norm(f.norm_inj, gtk.add(pooled.mul(ctx.v(f.alpha))?)?)?;
        let rest = h_s.slice(1, 1, len - 1)?;
        let tokens = Var::concat(&[gtk.reshape(&[b, 1, d])?, rest], 1)?;
        Ok(IeaOutput {
            tokens,
            nodes: match self.cfg.injection {
                Injection::Progressive => nodes_next,
                Injection::Fixed => nodes,
            },
            prior: pooled,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, T>, batch: &ModelBatch) -> Result<Forward<'t, T>, ModelError> {
        let (b, len, d) = (batch.batch, batch.len, self.cfg.d);
        if len > self.cfg.max_len {
            return Err(ModelError::InvalidConfig(alloc::format!(
                "sequence length {len} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let mut nodes = if self.cfg.graph_active() {
            Some(self.structural_prior(ctx, batch)?)
        } else {
            None
        };
        let tok = ctx.v(self.layout.tok_emb).gather_rows(&batch.ids)?.reshape(&[b, len, d])?;
        let pos = ctx.v(self.layout.pos_emb).slice(0, 0, len)?;
        let mut h = tok.add(pos)?;
        let mut z = ctx.constant(Tensor::zeros(vec![b, len, d]));
        let mut prior: Option<Var<'t, T>> = None;
        for t in 1..=self.cfg.n_layers {
            let (h_next, z_next) = self.ssm_step(ctx, t, h, z, prior)?;
            h = h_next;
            z = z_next;
            match nodes {
                Some(n) if self.cfg.is_fusion_layer(t) => {
                    let out = self.iea_layer(ctx, t, h, n, &batch.mask, &batch.global)?;
                    h = out.tokens;
                    nodes = Some(out.nodes);
                    prior = Some(out.prior);
                }
                _ => h = self.self_attention_block(ctx, t, h, &batch.mask)?,
            }
            h = self.ffn(ctx, t, h)?;
            if let Some(trace) = &ctx.trace {
                let gtk = h.slice(1, 0, 1)?.value();
                trace.borrow_mut().layer_gtk.push(gtk.data().iter().map(|x| x.as_f64()).collect());
            }
        }
        Ok(Forward { tokens: h, nodes })
    }

    /// Sequence-level embedding `[batch, d]`.
    pub fn pool<'t>(
        &self,
        ctx: &Ctx<'t, T>,
        tokens: Var<'t, T>,
        batch: &ModelBatch,
        mode: Pooling,
    ) -> Result<Var<'t, T>, ModelError> {
        let (b, len, d) = (batch.batch, batch.len, self.cfg.d);
        let gtk = || -> Result<Var<'t, T>, TensorError> { tokens.slice(1, 0, 1)?.reshape(&[b, d]) };
        let mean = || -> Result<Var<'t, T>, TensorError> {
            let m: Vec<T> = batch
                .mask
                .iter()
                .flat_map(|&x| core::iter::repeat_n(if x { T::one() } else { T::zero() }, d))
                .collect();
            let summed = tokens.mul(ctx.constant(Tensor::from_vec(vec![b, len, d], m)))?.sum_axis(1)?;
            let inv: Vec<T> = (0..b)
                .flat_map(|i| {
                    let n = batch.mask[i * len..(i + 1) * len].iter().filter(|&&x| x).count();
                    core::iter::repeat_n(T::one() / T::of(n as f64), d)
                })
                .collect();
            summed.mul(ctx.constant(Tensor::from_vec(vec![b, d], inv)))
        };
        let max = || -> Result<Var<'t, T>, TensorError> {
            let blocked: Vec<bool> = batch.mask.iter().flat_map(|&x| core::iter::repeat_n(!x, d)).collect();
            tokens.masked_fill(&blocked, T::of(MASK_FILL))?.max_axis(1)
        };
        let sep = || -> Result<Var<'t, T>, TensorError> {
            let rows: Vec<usize> = batch.sep_pos.iter().enumerate().map(|(i, &p)| i * len + p).collect();
            tokens.reshape(&[b * len, d])?.gather_rows(&rows)
        };
        Ok(match mode {
            Pooling::Gtk => gtk()?,
            Pooling::Mean => mean()?,
            Pooling::Max => max()?,
            Pooling::Sep => sep()?,
            Pooling::Combined => {
                let cat = Var::concat(&[gtk()?, mean()?, max()?, sep()?], 1)?;
                ctx.lin(self.layout.pool_combine, cat)?
            }
        })
    }

    /// Task logits or scores `[batch, out_dim]`.
    pub fn head<'t>(&self, ctx: &Ctx<'t, T>, pooled: Var<'t, T>) -> Result<Var<'t, T>, ModelError> {
        let h = self
            .layout
            .head
            .ok_or_else(|| ModelError::InvalidConfig("model has no task head".into()))?;
        Ok(ctx.lin(h, pooled)?)
    }

    /// Vocabulary logits for the flat token rows `rows` of `tokens`.
    pub fn mlm_logits<'t>(&self, ctx: &Ctx<'t, T>, tokens: Var<'t, T>, rows: &[usize]) -> Result<Var<'t, T>, ModelError> {
        let s = tokens.shape();
        let flat = tokens.reshape(&[s[0] * s[1], s[2]])?.gather_rows(rows)?;
        Ok(ctx.lin(self.layout.mlm, flat)?)
    }

    /// Index of the named parameter.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.entries().iter().position(|(n, _)| n == name)
    }
}
