//! Modality and injection ablations on a synthetic task whose target, the
//! mean bond angle of the conformer, can only be read from geometry.
//!
//! Molecules are random acyclic C/N/O trees. Each gets one angle
//! `θ_m ~ U[95°, 125°]`; atoms are placed breadth-first with 1.5 Å bonds so
//! that every parent-atom-child angle equals `θ_m` and siblings spread evenly
//! around the parent bond. The label is the mean over all bond-angle
//! triplets measured from the coordinates.

use std::collections::BTreeMap;

use mumo_core::geometry::geometric_triplet;
use mumo_core::model::{Injection, Model, ModelConfig, Sample, Task};
use mumo_core::smiles::{parse_smiles, Point3};
use mumo_core::tokenizer::{TokenizerKind, Vocab};
use mumo_core::unigraph::GraphConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FinetuneConfig, RunConfig};
use crate::corpus::{Label, Record};
use crate::error::Result;
use crate::run::{build_samples, evaluate, finetune};

pub const BOND_LENGTH: f64 = 1.5;
pub const ANGLE_RANGE_DEG: (f64, f64) = (95.0, 125.0);

const ELEMENTS: [(&str, usize); 3] = [("C", 4), ("N", 3), ("O", 2)];

/// A random tree: `parent[i] < i` for every non-root atom.
struct Tree {
    elements: Vec<usize>,
    parent: Vec<Option<usize>>,
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Tree {
    let mut elements = vec![0usize];
    let mut parent = vec![None];
    let mut degree = vec![0usize];
    while elements.len() < n {
        let el = match rng.random_range(0..10) {
            0..=6 => 0,
            7 | 8 => 1,
            _ => 2,
        };
        let open: Vec<usize> = (0..elements.len()).filter(|&i| degree[i] < ELEMENTS[elements[i]].1).collect();
        let p = open[rng.random_range(0..open.len())];
        degree[p] += 1;
        elements.push(el);
        parent.push(Some(p));
        degree.push(1);
    }
    Tree { elements, parent }
}

fn children(t: &Tree) -> Vec<Vec<usize>> {
    let mut ch = vec![Vec::new(); t.elements.len()];
    for (i, p) in t.parent.iter().enumerate() {
        if let Some(p) = p {
            ch[*p].push(i);
        }
    }
    ch
}

/// Depth-first SMILES whose atom order is `0..n` when every atom's children
/// are visited in index order; returns the SMILES and that atom order.
fn tree_smiles(t: &Tree) -> (String, Vec<usize>) {
    fn walk(t: &Tree, ch: &[Vec<usize>], a: usize, out: &mut String, order: &mut Vec<usize>) {
        out.push_str(ELEMENTS[t.elements[a]].0);
        order.push(a);
        let kids = &ch[a];
        for (k, &c) in kids.iter().enumerate() {
            let last = k + 1 == kids.len();
            if !last {
                out.push('(');
            }
            walk(t, ch, c, out, order);
            if !last {
                out.push(')');
            }
        }
    }
    let ch = children(t);
    let (mut s, mut order) = (String::new(), Vec::new());
    walk(t, &ch, 0, &mut s, &mut order);
    (s, order)
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(a: Point3) -> Point3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Two unit vectors orthogonal to `u` and to each other.
fn frame(u: Point3) -> (Point3, Point3) {
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = unit(cross(u, helper));
    (e1, cross(u, e1))
}

/// Places the tree so every parent-atom-child angle equals `theta`.
fn place(t: &Tree, theta: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let n = t.elements.len();
    let ch = children(t);
    let mut pos = vec![[0.0; 3]; n];
    let mut placed = vec![false; n];
    placed[0] = true;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(a) = queue.pop_front() {
        let kids = &ch[a];
        if kids.is_empty() {
            continue;
        }
        // Axis to spread children around: the bond back to the parent, or for
        // the root a fixed axis with its first child straight along it.
        let (axis, rest) = match t.parent[a] {
            Some(p) => (unit(sub(pos[p], pos[a])), &kids[..]),
            None => {
                let first = kids[0];
                pos[first] = [BOND_LENGTH, 0.0, 0.0];
                placed[first] = true;
                queue.push_back(first);
                ([1.0, 0.0, 0.0], &kids[1..])
            }
        };
        let (e1, e2) = frame(axis);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let k = rest.len();
        for (m, &c) in rest.iter().enumerate() {
            let phi = phase + std::f64::consts::TAU * m as f64 / k as f64;
            let (s, co) = (theta.sin(), theta.cos());
            let dir = [
                co * axis[0] + s * (phi.cos() * e1[0] + phi.sin() * e2[0]),
                co * axis[1] + s * (phi.cos() * e1[1] + phi.sin() * e2[1]),
                co * axis[2] + s * (phi.cos() * e1[2] + phi.sin() * e2[2]),
            ];
            pos[c] = [
                pos[a][0] + BOND_LENGTH * dir[0],
                pos[a][1] + BOND_LENGTH * dir[1],
                pos[a][2] + BOND_LENGTH * dir[2],
            ];
            placed[c] = true;
            queue.push_back(c);
        }
    }
    debug_assert!(placed.iter().all(|&p| p));
    pos
}

/// Mean angle in degrees over every pair of bonds sharing an atom.
pub fn mean_bond_angle(smiles: &str, coords: &[Point3]) -> Option<f64> {
    let m = parse_smiles(smiles).ok()?;
    let adj = m.adjacency();
    let (mut sum, mut n) = (0.0, 0usize);
    for (j, nb) in adj.iter().enumerate() {
        for x in 0..nb.len() {
            for y in x + 1..nb.len() {
                let (_, _, th) = geometric_triplet(coords, nb[x].0, j, nb[y].0).ok()?;
                sum += th.to_degrees();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// `n` labelled molecules with 6 to 14 heavy atoms.
pub fn synthetic_dataset(n: usize, seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let size = rng.random_range(6..=14);
        let tree = random_tree(&mut rng, size);
        let theta = rng.random_range(ANGLE_RANGE_DEG.0..ANGLE_RANGE_DEG.1).to_radians();
        let pos = place(&tree, theta, &mut rng);
        let (smiles, order) = tree_smiles(&tree);
        let coords: Vec<Point3> = order.iter().map(|&a| pos[a]).collect();
        if let Some(label) = mean_bond_angle(&smiles, &coords) {
            out.push(Record {
                smiles,
                coords: Some(coords),
                label: Some(Label::One(label)),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Graph, geometry and progressive injection from the middle layer.
    Full,
    /// Token sequence only.
    SequenceOnly,
    /// Graph without geometric triplets.
    NoGeometry,
    /// Graph built but never injected (`fusion_start = L + 1`).
    NoInjection,
    /// Injection that re-reads the initial node states every fusion layer.
    FixedInjection,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SequenceOnly,
        Variant::NoGeometry,
        Variant::NoInjection,
        Variant::FixedInjection,
    ];

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::SequenceOnly => c.use_graph = false,
            Variant::NoGeometry => c.use_geometry = false,
            Variant::NoInjection => c.fusion_start = c.n_layers + 1,
            Variant::FixedInjection => c.injection = Injection::Fixed,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: FinetuneConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            model: ModelConfig {
                d: 32,
                n_layers: 8,
                n_heads: 4,
                fusion_start: 5,
                mpnn_iters: 2,
                ffn_mult: 2,
                max_len: 64,
                task: Some(Task::Regression),
                ..ModelConfig::default()
            },
            train: FinetuneConfig {
                lr: 1e-3,
                warmup: 20,
                epochs: 40,
                batch_size: 32,
                clip: Some(1.0),
            },
            n_train: 384,
            n_test: 128,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Held-out RMSE in degrees.
    pub rmse: BTreeMap<Variant, f64>,
    /// Standard deviation of the held-out labels: the RMSE of predicting the mean.
    pub label_std: f64,
}

/// Trains and scores `variants` on one seeded dataset.
pub fn run_seed(cfg: &AblationConfig, variants: &[Variant], seed: u64) -> Result<SeedResult> {
    let records = synthetic_dataset(cfg.n_train + cfg.n_test, seed.wrapping_add(10_000));
    let vocab = Vocab::build(records.iter().map(|r| r.smiles.as_str()), TokenizerKind::Substructure)?;
    let run_cfg = RunConfig {
        model: ModelConfig {
            vocab_size: vocab.len(),
            ..cfg.model.clone()
        },
        graph: GraphConfig::default(),
        ..RunConfig::default()
    };
    let samples = build_samples(&run_cfg, &records, &vocab)?;
    let (train, test): (Vec<Sample>, Vec<Sample>) = (samples[..cfg.n_train].to_vec(), samples[cfg.n_train..].to_vec());
    let labels: Vec<f64> = test.iter().map(|s| s.label[0]).collect();
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let label_std = (labels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / labels.len() as f64).sqrt();
    let mut rmse = BTreeMap::new();
    for &v in variants {
        let mut model = Model::<f32>::new(v.apply(&run_cfg.model), seed)?;
        let (scale, _) = finetune(&mut model, &cfg.train, &train, seed, |_| Ok(()))?;
        let m = evaluate(&model, &test, &scale, 64)?;
        rmse.insert(v, m["rmse"]);
    }
    Ok(SeedResult { seed, rmse, label_std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<SeedResult>,
    /// Full RMSE at least 30% below sequence-only, with no-geometry strictly
    /// between, on a majority of seeds.
    pub modality_direction: bool,
    /// Middle-layer injection beats no injection on every seed.
    pub injection_timing: bool,
    /// Progressive beats fixed injection on a majority of seeds.
    pub progressive_over_fixed: bool,
}

pub fn judge(seeds: Vec<SeedResult>) -> AblationReport {
    let majority = seeds.len() / 2 + 1;
    let count = |f: &dyn Fn(&BTreeMap<Variant, f64>) -> bool| seeds.iter().filter(|s| f(&s.rmse)).count();
    let modality = count(&|r| {
        let (full, seq, nogeo) = (r[&Variant::Full], r[&Variant::SequenceOnly], r[&Variant::NoGeometry]);
        full <= 0.7 * seq && full < nogeo && nogeo < seq
    });
    let timing = count(&|r| r[&Variant::Full] < r[&Variant::NoInjection]);
    let progressive = count(&|r| r[&Variant::Full] < r[&Variant::FixedInjection]);
    AblationReport {
        modality_direction: modality >= majority,
        injection_timing: timing == seeds.len(),
        progressive_over_fixed: progressive >= majority,
        seeds,
    }
}

pub fn run_ablation(cfg: &AblationConfig, mut on_seed: impl FnMut(&SeedResult)) -> Result<AblationReport> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let r = run_seed(cfg, &Variant::ALL, seed)?;
        on_seed(&r);
        out.push(r);
    }
    Ok(judge(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_realizes_the_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(3..=14);
            let t = random_tree(&mut rng, n);
            let theta = rng.random_range(95f64..125.0).to_radians();
            let pos = place(&t, theta, &mut rng);
            for (c, p) in t.parent.iter().enumerate() {
                if let Some(a) = p {
                    let d = sub(pos[c], pos[*a]);
                    assert!(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - BOND_LENGTH).abs() < 1e-12);
                    if let Some(pp) = t.parent[*a] {
                        let (_, _, th) = geometric_triplet(&pos, pp, *a, c).unwrap();
                        assert!((th - theta).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn smiles_order_matches_coordinates() {
        let data = synthetic_dataset(40, 5);
        for r in &data {
            let m = parse_smiles(&r.smiles).unwrap();
            let c = r.coords.as_ref().unwrap();
            assert_eq!(m.atom_count(), c.len());
            for b in &m.bonds {
                let d = sub(c[b.a], c[b.b]);
                assert!(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - BOND_LENGTH).abs() < 1e-9);
            }
            let Some(Label::One(y)) = r.label else { panic!() };
            assert!((60.0..180.0).contains(&y));
        }
        assert_eq!(data, synthetic_dataset(40, 5));
    }

    #[test]
    fn linear_chain_label_is_the_angle() {
        let t = Tree {
            elements: vec![0; 5],
            parent: vec![None, Some(0), Some(1), Some(2), Some(3)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = place(&t, 100f64.to_radians(), &mut rng);
        let (s, order) = tree_smiles(&t);
        assert_eq!(s, "CCCCC");
        let coords: Vec<Point3> = order.iter().map(|&a| pos[a]).collect();
        assert!((mean_bond_angle(&s, &coords).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn judge_rules() {
        let r = |full, seq, nogeo, noinj, fixed| SeedResult {
            seed: 0,
            label_std: 1.0,
            rmse: BTreeMap::from([
                (Variant::Full, full),
                (Variant::SequenceOnly, seq),
                (Variant::NoGeometry, nogeo),
                (Variant::NoInjection, noinj),
                (Variant::FixedInjection, fixed),
            ]),
        };
        let rep = judge(vec![r(1.0, 2.0, 1.5, 2.0, 1.1), r(1.0, 2.0, 2.5, 2.0, 0.9), r(1.0, 1.2, 1.1, 1.1, 1.2)]);
        assert!(!rep.modality_direction);
        assert!(rep.injection_timing);
        assert!(rep.progressive_over_fixed);
    }
}
