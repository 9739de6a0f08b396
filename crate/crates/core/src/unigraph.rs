//! The unified 2D/3D graph: construction, batching and the graph/padded
//! sequence round trip used by the fusion layers.
//!
//! Each bond `b` becomes two directed edge rows, `2b` (a→b) and `2b+1` (b→a).
//! Radius-graph edges follow the bond edges in the same paired layout.
//! `cg` lists ordered edge pairs `(i→j, j→k)` with `k ≠ i`, enumerated by the
//! first edge and then by the second. `geom_slot[p]` points at the triplet of
//! pair `p`, if one was computed.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{self, GeomTriplet, GeometryError};
use crate::smiles::{featurize_atoms, featurize_bonds, spatial_bond_features, Molecule, BOND_FEATURE_DIM};
use crate::tensor::{Scalar, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("graphs disagree on feature widths: {0:?} vs {1:?}")]
    DimensionMismatch(Vec<usize>, Vec<usize>),
    #[error("cannot batch zero graphs")]
    EmptyBatch,
    #[error("{rows} state rows for {nodes} nodes")]
    LengthMismatch { rows: usize, nodes: usize },
    #[error("padding mask does not match the batch layout")]
    MaskMismatch,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Append non-bonded edges up to this distance when a conformer exists.
    pub radius_cutoff: Option<f64>,
    /// Fail on degenerate triplets instead of dropping them.
    pub strict_geometry: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedGraph {
    pub node_feats: Tensor<f64>,
    pub edge_feats: Tensor<f64>,
    /// Directed `(source, target)` per edge row.
    pub edges: Vec<(usize, usize)>,
    pub cg: Vec<(usize, usize)>,
    pub geom: Vec<GeomTriplet>,
    pub geom_slot: Vec<Option<usize>>,
    pub batch_idx: Vec<usize>,
    pub n_graphs: usize,
    /// Edge rows that come from chemical bonds; the rest are spatial.
    pub n_bond_edges: usize,
    /// Triplets dropped as degenerate.
    pub skipped_triplets: usize,
}

impl UnifiedGraph {
    pub fn n_nodes(&self) -> usize {
        self.batch_idx.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_geometry(&self) -> bool {
        !self.geom.is_empty()
    }

    /// Sources and targets as separate index lists.
    pub fn endpoints(&self) -> (Vec<usize>, Vec<usize>) {
        self.edges.iter().copied().unzip()
    }

    /// Nodes per graph.
    pub fn graph_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_graphs];
        for &g in &self.batch_idx {
            sizes[g] += 1;
        }
        sizes
    }
}

/// Ordered edge pairs sharing a center, excluding immediate reversals.
pub fn enumerate_cg(edges: &[(usize, usize)], n_nodes: usize) -> Vec<(usize, usize)> {
    let mut out_edges = vec![Vec::new(); n_nodes];
    for (e, &(s, _)) in edges.iter().enumerate() {
        out_edges[s].push(e);
    }
    let mut cg = Vec::new();
    for (e1, &(i, j)) in edges.iter().enumerate() {
        for &e2 in &out_edges[j] {
            if edges[e2].1 != i {
                cg.push((e1, e2));
            }
        }
    }
    cg
}

pub fn build_unified_graph(m: &Molecule, cfg: &GraphConfig) -> Result<UnifiedGraph, GraphError> {
    let n = m.atom_count();
    let bond_feats = featurize_bonds(m);
    let mut edges = Vec::with_capacity(2 * m.bonds.len());
    let mut feats = Vec::with_capacity(2 * m.bonds.len() * BOND_FEATURE_DIM);
    for (b, bond) in m.bonds.iter().enumerate() {
        edges.push((bond.a, bond.b));
        edges.push((bond.b, bond.a));
        feats.extend_from_slice(bond_feats.row(b));
        feats.extend_from_slice(bond_feats.row(b));
    }
    let n_bond_edges = edges.len();
    if let (Some(cutoff), Some(_)) = (cfg.radius_cutoff, &m.conformer) {
        for (a, b) in geometry::radius_edges(m, cutoff)? {
            edges.push((a, b));
            edges.push((b, a));
            feats.extend_from_slice(&spatial_bond_features());
            feats.extend_from_slice(&spatial_bond_features());
        }
    }
    let cg = enumerate_cg(&edges, n);
    let mut geom = Vec::new();
    let mut geom_slot = vec![None; cg.len()];
    let mut skipped = 0;
    if let Some(coords) = &m.conformer {
        for (p, &(e1, e2)) in cg.iter().enumerate() {
            let (i, j) = edges[e1];
            let k = edges[e2].1;
            match geometry::geometric_triplet(coords, i, j, k) {
                Ok((l_ij, l_jk, theta)) => {
                    geom_slot[p] = Some(geom.len());
                    geom.push(GeomTriplet {
                        edge_ij: e1,
                        edge_jk: e2,
                        l_ij,
                        l_jk,
                        theta,
                    });
                }
                Err(e) if cfg.strict_geometry => return Err(e.into()),
                Err(_) => skipped += 1,
            }
        }
    }
    let n_edges = edges.len();
    Ok(UnifiedGraph {
        node_feats: featurize_atoms(m),
        edge_feats: Tensor::from_vec(vec![n_edges, BOND_FEATURE_DIM], feats),
        edges,
        cg,
        geom,
        geom_slot,
        batch_idx: vec![0; n],
        n_graphs: 1,
        n_bond_edges,
        skipped_triplets: skipped,
    })
}

/// Concatenates graphs, shifting node, edge and triplet references by the
/// running offsets of the graphs before them.
pub fn batch_graphs(graphs: &[UnifiedGraph]) -> Result<UnifiedGraph, GraphError> {
    let first = graphs.first().ok_or(GraphError::EmptyBatch)?;
    let (dv, de) = (first.node_feats.last_dim(), first.edge_feats.last_dim());
    let mut out = UnifiedGraph {
        node_feats: Tensor::zeros(vec![0, dv]),
        edge_feats: Tensor::zeros(vec![0, de]),
        edges: Vec::new(),
        cg: Vec::new(),
        geom: Vec::new(),
        geom_slot: Vec::new(),
        batch_idx: Vec::new(),
        n_graphs: 0,
        n_bond_edges: 0,
        skipped_triplets: 0,
    };
    let mut node_data = Vec::new();
    let mut edge_data = Vec::new();
    let (mut off_v, mut off_e, mut off_g) = (0, 0, 0);
    for g in graphs {
        if g.node_feats.last_dim() != dv || g.edge_feats.last_dim() != de {
            return Err(GraphError::DimensionMismatch(
                first.node_feats.shape().to_vec(),
                g.node_feats.shape().to_vec(),
            ));
        }
        node_data.extend_from_slice(g.node_feats.data());
        edge_data.extend_from_slice(g.edge_feats.data());
        out.edges.extend(g.edges.iter().map(|&(s, t)| (s + off_v, t + off_v)));
        out.cg.extend(g.cg.iter().map(|&(a, b)| (a + off_e, b + off_e)));
        out.geom.extend(g.geom.iter().map(|t| GeomTriplet {
            edge_ij: t.edge_ij + off_e,
            edge_jk: t.edge_jk + off_e,
            ..*t
        }));
        out.geom_slot.extend(g.geom_slot.iter().map(|s| s.map(|x| x + off_g)));
        out.batch_idx.extend(g.batch_idx.iter().map(|&b| b + out.n_graphs));
        out.n_graphs += g.n_graphs;
        out.n_bond_edges += g.n_bond_edges;
        out.skipped_triplets += g.skipped_triplets;
        off_v += g.n_nodes();
        off_e += g.n_edges();
        off_g += g.geom.len();
    }
    out.node_feats = Tensor::from_vec(vec![off_v, dv], node_data);
    out.edge_feats = Tensor::from_vec(vec![off_e, de], edge_data);
    Ok(out)
}

/// Where each node lives in the padded `[n_graphs, max_nodes]` layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddingLayout {
    pub n_graphs: usize,
    pub max_nodes: usize,
    /// Flat padded slot of each node.
    pub slot_of_node: Vec<usize>,
    /// Node in each padded slot, if any.
    pub node_of_slot: Vec<Option<usize>>,
}

impl PaddingLayout {
    pub fn new(batch_idx: &[usize], n_graphs: usize) -> Result<Self, GraphError> {
        let mut sizes = vec![0usize; n_graphs];
        for &g in batch_idx {
            if g >= n_graphs {
                return Err(GraphError::MaskMismatch);
            }
            sizes[g] += 1;
        }
        let max_nodes = sizes.iter().copied().max().unwrap_or(0);
        let mut fill = vec![0usize; n_graphs];
        let mut slot_of_node = Vec::with_capacity(batch_idx.len());
        let mut node_of_slot = vec![None; n_graphs * max_nodes];
        for (v, &g) in batch_idx.iter().enumerate() {
            let slot = g * max_nodes + fill[g];
            fill[g] += 1;
            slot_of_node.push(slot);
            node_of_slot[slot] = Some(v);
        }
        Ok(PaddingLayout {
            n_graphs,
            max_nodes,
            slot_of_node,
            node_of_slot,
        })
    }

    pub fn mask(&self) -> Vec<bool> {
        self.node_of_slot.iter().map(Option::is_some).collect()
    }

    /// Differentiable unbatch: `[n_V, d]` to `[n_graphs, max_nodes, d]`.
    pub fn unbatch<'t, T: Scalar>(&self, states: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let shape = states.shape();
        let (n, d) = (shape[0], shape[1]);
        let zero = states.tape().constant(Tensor::zeros(vec![1, d]));
        let padded = Var::concat(&[states, zero], 0)?;
        let idx: Vec<usize> = self.node_of_slot.iter().map(|s| s.unwrap_or(n)).collect();
        padded.gather_rows(&idx)?.reshape(&[self.n_graphs, self.max_nodes, d])
    }

    /// Differentiable rebatch: `[n_graphs, max_nodes, d]` to `[n_V, d]`.
    pub fn rebatch<'t, T: Scalar>(&self, padded: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let d = *padded.shape().last().unwrap_or(&0);
        padded
            .reshape(&[self.n_graphs * self.max_nodes, d])?
            .gather_rows(&self.slot_of_node)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaddedNodeSeq<T> {
    pub states: Tensor<T>,
    pub mask: Vec<bool>,
}

pub fn unbatch_node_states<T: Scalar>(
    states: &Tensor<T>,
    batch_idx: &[usize],
    n_graphs: usize,
) -> Result<PaddedNodeSeq<T>, GraphError> {
    if states.rank() != 2 || states.shape()[0] != batch_idx.len() {
        return Err(GraphError::LengthMismatch {
            rows: states.shape().first().copied().unwrap_or(0),
            nodes: batch_idx.len(),
        });
    }
    let layout = PaddingLayout::new(batch_idx, n_graphs)?;
    let d = states.last_dim();
    let mut data = vec![T::zero(); n_graphs * layout.max_nodes * d];
    for (v, &slot) in layout.slot_of_node.iter().enumerate() {
        data[slot * d..(slot + 1) * d].copy_from_slice(states.row(v));
    }
    Ok(PaddedNodeSeq {
        states: Tensor::from_vec(vec![n_graphs, layout.max_nodes, d], data),
        mask: layout.mask(),
    })
}

pub fn rebatch_node_states<T: Scalar>(p: &PaddedNodeSeq<T>, batch_idx: &[usize]) -> Result<Tensor<T>, GraphError> {
    let shape = p.states.shape();
    if shape.len() != 3 {
        return Err(GraphError::MaskMismatch);
    }
    let layout = PaddingLayout::new(batch_idx, shape[0])?;
    if layout.max_nodes != shape[1] || layout.mask() != p.mask {
        return Err(GraphError::MaskMismatch);
    }
    let d = shape[2];
    let mut data = Vec::with_capacity(batch_idx.len() * d);
    for &slot in &layout.slot_of_node {
        data.extend_from_slice(&p.states.data()[slot * d..(slot + 1) * d]);
    }
    Ok(Tensor::from_vec(vec![batch_idx.len(), d], data))
}

pub fn global_add_pool<T: Scalar>(states: &Tensor<T>, batch_idx: &[usize], n_graphs: usize) -> Tensor<T> {
    let d = states.last_dim();
    let mut out = vec![T::zero(); n_graphs * d];
    for (v, &g) in batch_idx.iter().enumerate() {
        for (o, &x) in out[g * d..(g + 1) * d].iter_mut().zip(states.row(v)) {
            *o += x;
        }
    }
    Tensor::from_vec(vec![n_graphs, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;
    use crate::tensor::Tape;
    use core::f64::consts::PI;
    use proptest::prelude::*;

    fn graph(s: &str) -> UnifiedGraph {
        build_unified_graph(&parse_smiles(s).unwrap(), &GraphConfig::default()).unwrap()
    }

    #[test]
    fn two_atoms_have_no_pairs() {
        let g = graph("CO");
        assert_eq!((g.n_nodes(), g.n_edges()), (2, 2));
        assert!(g.cg.is_empty());
    }

    #[test]
    fn propane_pairs() {
        let g = graph("CCC");
        assert_eq!(g.n_edges(), 4);
        // edges: 0:0→1 1:1→0 2:1→2 3:2→1; pairs through atom 1 are (0→1,1→2) and (2→1,1→0).
        assert_eq!(g.cg, vec![(0, 2), (3, 1)]);
        for &(a, b) in &g.cg {
            assert_eq!(g.edges[a].1, g.edges[b].0);
        }
    }

    #[test]
    fn propane_triplet() {
        let m = parse_smiles("CCC")
            .unwrap()
            .with_conformer(vec![[0.0; 3], [1.5, 0.0, 0.0], [1.5, 1.5, 0.0]])
            .unwrap();
        let g = build_unified_graph(&m, &GraphConfig::default()).unwrap();
        assert_eq!(g.geom.len(), 2);
        for t in &g.geom {
            assert!((t.l_ij - 1.5).abs() < 1e-12 && (t.l_jk - 1.5).abs() < 1e-12);
            assert!((t.theta - PI / 2.0).abs() < 1e-12);
        }
        assert_eq!(g.geom_slot, vec![Some(0), Some(1)]);
    }

    #[test]
    fn degenerate_triplets_skip_or_fail() {
        let m = parse_smiles("CCC")
            .unwrap()
            .with_conformer(vec![[0.0; 3], [1.5, 0.0, 0.0], [1.5, 0.0, 0.0]])
            .unwrap();
        let g = build_unified_graph(&m, &GraphConfig::default()).unwrap();
        assert_eq!((g.geom.len(), g.skipped_triplets), (0, 2));
        let strict = GraphConfig {
            strict_geometry: true,
            ..GraphConfig::default()
        };
        assert!(matches!(build_unified_graph(&m, &strict), Err(GraphError::Geometry(_))));
    }

    #[test]
    fn radius_edges_are_spatial() {
        let m = parse_smiles("CCC")
            .unwrap()
            .with_conformer(vec![[0.0; 3], [1.5, 0.0, 0.0], [1.5, 1.5, 0.0]])
            .unwrap();
        let cfg = GraphConfig {
            radius_cutoff: Some(6.0),
            ..GraphConfig::default()
        };
        let g = build_unified_graph(&m, &cfg).unwrap();
        assert_eq!((g.n_bond_edges, g.n_edges()), (4, 6));
        assert_eq!(g.edges[4], (0, 2));
        assert_eq!(g.edge_feats.row(4)[crate::smiles::SPATIAL_SLOT], 1.0);
    }

    #[test]
    fn batch_of_one_is_identity() {
        let g = graph("CC(=O)O");
        assert_eq!(batch_graphs(&[g.clone()]).unwrap(), g);
    }

    #[test]
    fn two_ethanes() {
        let g = graph("CC");
        let b = batch_graphs(&[g.clone(), g]).unwrap();
        assert_eq!(b.edges, vec![(0, 1), (1, 0), (2, 3), (3, 2)]);
        assert_eq!(b.batch_idx, vec![0, 0, 1, 1]);
        assert_eq!(b.n_graphs, 2);
    }

    #[test]
    fn batch_offsets_pairs_and_triplets() {
        let mk = |s: &str, c: Vec<[f64; 3]>| {
            build_unified_graph(&parse_smiles(s).unwrap().with_conformer(c).unwrap(), &GraphConfig::default()).unwrap()
        };
        let a = mk("CCC", vec![[0.0; 3], [1.5, 0.0, 0.0], [1.5, 1.5, 0.0]]);
        let b = mk("CCCC", vec![[0.0; 3], [1.5, 0.0, 0.0], [1.5, 1.5, 0.0], [3.0, 1.5, 0.5]]);
        let batch = batch_graphs(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.cg[a.cg.len()..], b.cg.iter().map(|&(x, y)| (x + 4, y + 4)).collect::<Vec<_>>()[..]);
        assert_eq!(batch.geom[2].edge_ij, b.geom[0].edge_ij + 4);
        assert_eq!(batch.geom_slot[2], Some(2));
    }

    #[test]
    fn batch_rejects_width_mismatch() {
        let a = graph("CC");
        let mut b = graph("CC");
        b.node_feats = Tensor::zeros(vec![2, 3]);
        assert!(matches!(batch_graphs(&[a, b]), Err(GraphError::DimensionMismatch(..))));
        assert_eq!(batch_graphs(&[]), Err(GraphError::EmptyBatch));
    }

    #[test]
    fn unbatch_shapes_and_masks() {
        let s = Tensor::from_vec(vec![6, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = unbatch_node_states(&s, &[0, 0, 1, 1, 1, 1], 2).unwrap();
        assert_eq!(p.states.shape(), &[2, 4, 1]);
        assert_eq!(p.mask, vec![true, true, false, false, true, true, true, true]);
        assert_eq!(p.states.data(), &[1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 5.0, 6.0]);
        let single = unbatch_node_states(&Tensor::<f64>::zeros(vec![3, 2]), &[0, 0, 0], 1).unwrap();
        assert!(single.mask.iter().all(|&m| m));
    }

    #[test]
    fn padding_never_leaks() {
        let s = Tensor::from_vec(vec![3, 1], vec![1.0, 2.0, 3.0]);
        let mut p = unbatch_node_states(&s, &[0, 1, 1], 2).unwrap();
        p.states.data_mut()[1] = f64::NAN;
        let back = rebatch_node_states(&p, &[0, 1, 1]).unwrap();
        assert_eq!(back, s);
        p.mask[1] = true;
        assert_eq!(rebatch_node_states(&p, &[0, 1, 1]), Err(GraphError::MaskMismatch));
    }

    #[test]
    fn pooling_matches_loop() {
        let s = Tensor::from_vec(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let p = global_add_pool(&s, &[0, 1, 1, 1], 2);
        assert_eq!(p.data(), &[1.0, 2.0, 15.0, 18.0]);
    }

    #[test]
    fn differentiable_layout_matches_tensor_version() {
        let batch_idx = [0, 1, 1, 2, 2, 2];
        let s = Tensor::from_vec(vec![6, 2], (0..12).map(f64::from).collect());
        let layout = PaddingLayout::new(&batch_idx, 3).unwrap();
        let tape = Tape::new();
        let v = tape.param(s.clone());
        let padded = layout.unbatch(v).unwrap();
        assert_eq!(padded.value(), unbatch_node_states(&s, &batch_idx, 3).unwrap().states);
        assert_eq!(layout.rebatch(padded).unwrap().value(), s);
    }

    fn ids() -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(1usize..6, 1..6).prop_map(|sizes| {
            sizes.iter().enumerate().flat_map(|(g, &n)| core::iter::repeat_n(g, n)).collect()
        })
    }

    proptest! {
        #[test]
        fn unbatch_rebatch_roundtrip(batch_idx in ids(), seed in 0u64..1000) {
            let n_graphs = batch_idx.last().unwrap() + 1;
            let data: Vec<f64> = (0..batch_idx.len() * 3).map(|i| ((i as u64 * 7919 + seed) % 101) as f64).collect();
            let s = Tensor::from_vec(vec![batch_idx.len(), 3], data);
            let p = unbatch_node_states(&s, &batch_idx, n_graphs).unwrap();
            for (slot, &m) in p.mask.iter().enumerate() {
                if !m {
                    prop_assert!(p.states.data()[slot * 3..slot * 3 + 3].iter().all(|&x| x == 0.0));
                }
            }
            prop_assert_eq!(rebatch_node_states(&p, &batch_idx).unwrap(), s);
        }

        #[test]
        fn batched_constraints_slice_back(picks in proptest::collection::vec(0usize..5, 1..8)) {
            let pool = ["CCO", "c1ccccc1", "CC(=O)N", "C", "C1CC1C"];
            let graphs: Vec<UnifiedGraph> = picks.iter().map(|&i| graph(pool[i])).collect();
            let b = batch_graphs(&graphs).unwrap();
            prop_assert!(b.batch_idx.windows(2).all(|w| w[0] <= w[1]));
            let max_node = b.edges.iter().map(|&(s, t)| s.max(t)).max();
            if let Some(m) = max_node {
                prop_assert!(m < b.n_nodes());
            }
            let (mut ov, mut oe, mut op) = (0, 0, 0);
            for g in &graphs {
                let e: Vec<_> = b.edges[oe..oe + g.n_edges()].iter().map(|&(s, t)| (s - ov, t - ov)).collect();
                prop_assert_eq!(&e, &g.edges);
                let c: Vec<_> = b.cg[op..op + g.cg.len()].iter().map(|&(x, y)| (x - oe, y - oe)).collect();
                prop_assert_eq!(&c, &g.cg);
                ov += g.n_nodes();
                oe += g.n_edges();
                op += g.cg.len();
            }
        }
    }
}
