//! Rule-based bond cutting, the segmented graph and fragment annotation.
//!
//! Every rule only ever fires on single, non-aromatic, acyclic bonds.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::smiles::{Atom, BondOrder, Molecule};
use crate::unigraph::UnifiedGraph;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CutRule {
    /// Bond from a ring atom to a non-ring atom.
    RingToChain,
    /// Bonds leaving a `C(=O)N` group.
    AmideFlank,
    /// Bonds leaving a `C(=O)OC` group.
    EsterFlank,
    /// One `O–C` bond of an acyclic `C–O–C` ether (the higher-index carbon).
    EtherLink,
    /// Any eligible bond joining the two elements, in either order.
    ElementPair { a: String, b: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutRuleSet {
    pub rules: Vec<CutRule>,
}

impl Default for CutRuleSet {
    fn default() -> Self {
        CutRuleSet {
            rules: vec![
                CutRule::RingToChain,
                CutRule::AmideFlank,
                CutRule::EsterFlank,
                CutRule::EtherLink,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PartitionError {
    #[error("edge index {0} is out of range")]
    InvalidEdgeIndex(usize),
}

struct Chem<'a> {
    m: &'a Molecule,
    adj: Vec<Vec<(usize, usize)>>,
}

impl<'a> Chem<'a> {
    fn new(m: &'a Molecule) -> Self {
        Chem { m, adj: m.adjacency() }
    }

    fn is(&self, atom: usize, symbol: &str) -> bool {
        self.m.atoms[atom].element.symbol() == symbol
    }

    /// Carbon with a double bond to oxygen.
    fn is_carbonyl(&self, c: usize) -> bool {
        self.is(c, "C")
            && self.adj[c]
                .iter()
                .any(|&(o, b)| self.is(o, "O") && self.m.bonds[b].order == BondOrder::Double)
    }

    fn single_neighbors(&self, atom: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adj[atom]
            .iter()
            .copied()
            .filter(|&(_, b)| self.m.bonds[b].order == BondOrder::Single)
    }

    /// Bonds leaving every `C(=O)–X` group, where `x_ok` accepts the
    /// heteroatom `X` and its neighbors.
    fn flank(&self, hetero: &str, x_ok: impl Fn(usize) -> bool, out: &mut BTreeSet<usize>) {
        for c in 0..self.m.atom_count() {
            if !self.is_carbonyl(c) {
                continue;
            }
            for (x, cx) in self.single_neighbors(c) {
                if !self.is(x, hetero) || !x_ok(x) {
                    continue;
                }
                for &(_, b) in &self.adj[c] {
                    if b != cx {
                        out.insert(b);
                    }
                }
                for &(_, b) in &self.adj[x] {
                    if b != cx {
                        out.insert(b);
                    }
                }
            }
        }
    }

    fn eligible(&self, b: usize) -> bool {
        let bond = &self.m.bonds[b];
        let aromatic = |a: &Atom| a.aromatic;
        bond.order == BondOrder::Single
            && !bond.in_ring
            && !(aromatic(&self.m.atoms[bond.a]) && aromatic(&self.m.atoms[bond.b]))
    }

    fn apply(&self, rule: &CutRule, out: &mut BTreeSet<usize>) {
        match rule {
            CutRule::RingToChain => {
                for (b, bond) in self.m.bonds.iter().enumerate() {
                    if self.m.atoms[bond.a].in_ring != self.m.atoms[bond.b].in_ring {
                        out.insert(b);
                    }
                }
            }
            CutRule::AmideFlank => self.flank("N", |_| true, out),
            CutRule::EsterFlank => self.flank(
                "O",
                |o| self.adj[o].len() == 2 && self.adj[o].iter().all(|&(n, _)| self.is(n, "C")),
                out,
            ),
            CutRule::EtherLink => {
                for o in 0..self.m.atom_count() {
                    let atom = &self.m.atoms[o];
                    if !self.is(o, "O") || atom.in_ring || self.adj[o].len() != 2 {
                        continue;
                    }
                    let carbons: Vec<(usize, usize)> = self.single_neighbors(o).filter(|&(n, _)| self.is(n, "C")).collect();
                    if carbons.len() != 2 || carbons.iter().any(|&(c, _)| self.is_carbonyl(c)) {
                        continue;
                    }
                    let &(_, b) = carbons.iter().max_by_key(|&&(c, _)| c).expect("two carbons");
                    out.insert(b);
                }
            }
            CutRule::ElementPair { a, b } => {
                for (bi, bond) in self.m.bonds.iter().enumerate() {
                    let (x, y) = (self.m.atoms[bond.a].element.symbol(), self.m.atoms[bond.b].element.symbol());
                    if (x == a && y == b) || (x == b && y == a) {
                        out.insert(bi);
                    }
                }
            }
        }
    }
}

/// Bond indices selected by the rules.
pub fn cut_bonds(m: &Molecule, rules: &CutRuleSet) -> Vec<usize> {
    let chem = Chem::new(m);
    let mut picked = BTreeSet::new();
    for rule in &rules.rules {
        chem.apply(rule, &mut picked);
    }
    picked.into_iter().filter(|&b| chem.eligible(b)).collect()
}

/// Directed edge rows to remove: both rows of every cut bond, plus every
/// spatial edge that would otherwise reconnect two fragments.
pub fn compute_cut_set(g: &UnifiedGraph, m: &Molecule, rules: &CutRuleSet) -> Vec<usize> {
    let bonds = cut_bonds(m, rules);
    let mut cut: BTreeSet<usize> = bonds.iter().flat_map(|&b| [2 * b, 2 * b + 1]).collect();
    if g.n_edges() > g.n_bond_edges {
        let kept: Vec<(usize, usize)> = (0..g.n_bond_edges)
            .filter(|e| !cut.contains(e))
            .map(|e| g.edges[e])
            .collect();
        let (comp, _) = components(g.n_nodes(), &kept);
        for e in g.n_bond_edges..g.n_edges() {
            let (s, t) = g.edges[e];
            if comp[s] != comp[t] {
                cut.insert(e);
            }
        }
    }
    cut.into_iter().collect()
}

/// Connected components numbered in order of their lowest node.
pub fn components(n: usize, edges: &[(usize, usize)]) -> (Vec<usize>, usize) {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut ids = vec![0; n];
    let mut count = 0;
    for v in 0..n {
        let r = find(&mut parent, v);
        if label[r] == usize::MAX {
            label[r] = count;
            count += 1;
        }
        ids[v] = label[r];
    }
    (ids, count)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentedGraph {
    pub sub: UnifiedGraph,
    pub fragment_idx: Vec<usize>,
    pub n_fragments: usize,
}

/// Removes the cut edges together with every pair and triplet that uses
/// one; nodes are untouched.
pub fn segment_graph(g: &UnifiedGraph, cut: &[usize]) -> Result<SegmentedGraph, PartitionError> {
    let mut removed = vec![false; g.n_edges()];
    for &e in cut {
        *removed.get_mut(e).ok_or(PartitionError::InvalidEdgeIndex(e))? = true;
    }
    let mut new_index = vec![None; g.n_edges()];
    let mut edges = Vec::new();
    let mut feats = Vec::new();
    let mut n_bond_edges = 0;
    for e in 0..g.n_edges() {
        if removed[e] {
            continue;
        }
        new_index[e] = Some(edges.len());
        edges.push(g.edges[e]);
        feats.extend_from_slice(g.edge_feats.row(e));
        if e < g.n_bond_edges {
            n_bond_edges += 1;
        }
    }
    let mut geom_index = vec![None; g.geom.len()];
    let mut geom = Vec::new();
    for (t, tri) in g.geom.iter().enumerate() {
        if let (Some(a), Some(b)) = (new_index[tri.edge_ij], new_index[tri.edge_jk]) {
            geom_index[t] = Some(geom.len());
            geom.push(crate::geometry::GeomTriplet {
                edge_ij: a,
                edge_jk: b,
                ..*tri
            });
        }
    }
    let mut cg = Vec::new();
    let mut geom_slot = Vec::new();
    for (p, &(a, b)) in g.cg.iter().enumerate() {
        if let (Some(x), Some(y)) = (new_index[a], new_index[b]) {
            cg.push((x, y));
            geom_slot.push(g.geom_slot[p].and_then(|s| geom_index[s]));
        }
    }
    let (fragment_idx, n_fragments) = components(g.n_nodes(), &edges);
    let width = g.edge_feats.last_dim();
    let n_edges = edges.len();
    Ok(SegmentedGraph {
        sub: UnifiedGraph {
            node_feats: g.node_feats.clone(),
            edge_feats: crate::tensor::Tensor::from_vec(vec![n_edges, width], feats),
            edges,
            cg,
            geom,
            geom_slot,
            batch_idx: g.batch_idx.clone(),
            n_graphs: g.n_graphs,
            n_bond_edges,
            skipped_triplets: g.skipped_triplets,
        },
        fragment_idx,
        n_fragments,
    })
}

const ORGANIC: [&str; 10] = ["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"];

fn atom_text(a: &Atom) -> String {
    let plain = a.formal_charge == 0
        && a.isotope.is_none()
        && a.explicit_h.is_none()
        && ORGANIC.contains(&a.element.symbol())
        && (!a.aromatic || matches!(a.element.symbol(), "B" | "C" | "N" | "O" | "P" | "S"));
    let mut sym = a.element.symbol().to_string();
    if a.aromatic {
        sym = sym.to_lowercase();
    }
    if plain {
        return sym;
    }
    let mut s = String::from("[");
    if let Some(iso) = a.isotope {
        let _ = write!(s, "{iso}");
    }
    s.push_str(&sym);
    match a.explicit_h {
        Some(0) | None => {}
        Some(1) => s.push('H'),
        Some(h) => {
            let _ = write!(s, "H{h}");
        }
    }
    match a.formal_charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => {
            let _ = write!(s, "+{c}");
        }
        c => {
            let _ = write!(s, "-{}", -c);
        }
    }
    s.push(']');
    s
}

fn bond_text(m: &Molecule, b: usize) -> &'static str {
    let bond = &m.bonds[b];
    let both_aromatic = m.atoms[bond.a].aromatic && m.atoms[bond.b].aromatic;
    match bond.order {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic if both_aromatic => "",
        BondOrder::Aromatic => ":",
    }
}

fn ring_label(n: usize) -> String {
    if n < 10 {
        n.to_string()
    } else {
        alloc::format!("%{n:02}")
    }
}

enum Branch {
    Child(usize, usize),
    Marker,
}

struct Writer<'a> {
    m: &'a Molecule,
    adj: Vec<Vec<(usize, usize)>>,
    cut: &'a BTreeSet<usize>,
    visited: Vec<bool>,
    /// Per atom: (ring bond, partner) in discovery order.
    rings: Vec<Vec<(usize, usize)>>,
    children: Vec<Vec<Branch>>,
    labels: Vec<Option<usize>>,
    free: BTreeSet<usize>,
    next_label: usize,
}

impl<'a> Writer<'a> {
    fn discover(&mut self, root: usize) {
        let mut stack = vec![(root, usize::MAX)];
        let mut seen_bond = vec![false; self.m.bonds.len()];
        // Iterative DFS that preserves recursive visiting order.
        while let Some((u, via)) = stack.pop() {
            if self.visited[u] {
                // Reached again through `via`: a ring closure.
                if via != usize::MAX && !seen_bond[via] {
                    seen_bond[via] = true;
                    let other = self.m.bonds[via].other(u);
                    self.rings[other].push((via, u));
                    self.rings[u].push((via, other));
                    self.children[other].retain(|c| !matches!(c, Branch::Child(_, b) if *b == via));
                }
                continue;
            }
            self.visited[u] = true;
            if via != usize::MAX {
                seen_bond[via] = true;
                let parent = self.m.bonds[via].other(u);
                self.children[parent].push(Branch::Child(u, via));
            }
            let mut next: Vec<(usize, usize)> = Vec::new();
            for &(v, b) in &self.adj[u] {
                if self.cut.contains(&b) {
                    continue;
                }
                if !seen_bond[b] {
                    next.push((v, b));
                }
            }
            for &(v, b) in next.iter().rev() {
                stack.push((v, b));
            }
        }
    }

    fn write(&mut self, u: usize, out: &mut String) {
        out.push_str(&atom_text(&self.m.atoms[u]));
        for (b, _) in self.rings[u].clone() {
            match self.labels[b] {
                Some(l) => {
                    out.push_str(bond_text(self.m, b));
                    out.push_str(&ring_label(l));
                    self.free.insert(l);
                }
                None => {
                    let l = match self.free.pop_first() {
                        Some(l) => l,
                        None => {
                            self.next_label += 1;
                            self.next_label
                        }
                    };
                    self.labels[b] = Some(l);
                    out.push_str(bond_text(self.m, b));
                    out.push_str(&ring_label(l));
                }
            }
        }
        let mut branches: Vec<(usize, Branch)> = Vec::new();
        for &(v, b) in &self.adj[u] {
            if self.cut.contains(&b) {
                branches.push((v, Branch::Marker));
            }
        }
        for c in core::mem::take(&mut self.children[u]) {
            let key = match c {
                Branch::Child(v, _) => v,
                Branch::Marker => 0,
            };
            branches.push((key, c));
        }
        branches.sort_by_key(|(k, _)| *k);
        let n = branches.len();
        for (i, (_, br)) in branches.into_iter().enumerate() {
            let last = i + 1 == n;
            if !last {
                out.push('(');
            }
            match br {
                Branch::Marker => out.push_str("[*]"),
                Branch::Child(v, b) => {
                    out.push_str(bond_text(self.m, b));
                    self.write(v, out);
                }
            }
            if !last {
                out.push(')');
            }
        }
    }
}

/// One SMILES string per fragment, with `[*]` wherever a cut bond attached.
/// Fragments are listed by lowest atom index; chirality is not written.
pub fn annotate_fragments(m: &Molecule, cut_edges: &[usize]) -> Vec<String> {
    let cut: BTreeSet<usize> = cut_edges
        .iter()
        .map(|&e| e / 2)
        .filter(|&b| b < m.bonds.len())
        .collect();
    let n = m.atom_count();
    let mut w = Writer {
        m,
        adj: m.adjacency(),
        cut: &cut,
        visited: vec![false; n],
        rings: vec![Vec::new(); n],
        children: (0..n).map(|_| Vec::new()).collect(),
        labels: vec![None; m.bonds.len()],
        free: BTreeSet::new(),
        next_label: 0,
    };
    for list in w.adj.iter_mut() {
        list.sort();
    }
    let mut out = Vec::new();
    for root in 0..n {
        if w.visited[root] {
            continue;
        }
        w.discover(root);
        let mut s = String::new();
        w.write(root, &mut s);
        out.push(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;
    use crate::unigraph::{build_unified_graph, GraphConfig};
    use proptest::prelude::*;

    fn setup(s: &str) -> (Molecule, UnifiedGraph) {
        let m = parse_smiles(s).unwrap();
        let g = build_unified_graph(&m, &GraphConfig::default()).unwrap();
        (m, g)
    }

    fn cut_of(s: &str) -> Vec<usize> {
        let (m, g) = setup(s);
        compute_cut_set(&g, &m, &CutRuleSet::default())
    }

    #[test]
    fn benzene_is_not_cut() {
        assert!(cut_of("c1ccccc1").is_empty());
    }

    #[test]
    fn toluene_methyl_is_cut() {
        // Bond 0 joins the methyl to the ring.
        assert_eq!(cut_of("Cc1ccccc1"), vec![0, 1]);
    }

    #[test]
    fn amide_and_ester_flanks() {
        // CC(=O)NC: bonds 0 C-C(=O), 1 C=O, 2 C-N, 3 N-C
        assert_eq!(cut_bonds(&setup("CC(=O)NC").0, &CutRuleSet::default()), vec![0, 3]);
        // CC(=O)OC: ester flanks are bonds 0 and 3.
        assert_eq!(cut_bonds(&setup("CC(=O)OC").0, &CutRuleSet::default()), vec![0, 3]);
        // Acid OH has one neighbor: not an ester.
        assert!(cut_bonds(&setup("CC(=O)O").0, &CutRuleSet::default()).is_empty());
    }

    #[test]
    fn ether_cuts_one_side() {
        // CCOCC: O is atom 2, carbons 1 and 3; bond 2 is O-C3.
        assert_eq!(cut_bonds(&setup("CCOCC").0, &CutRuleSet::default()), vec![2]);
    }

    #[test]
    fn element_pair_rule_from_json() {
        let rules: CutRuleSet =
            serde_json::from_str(r#"{"rules":[{"rule":"ELEMENT_PAIR","a":"C","b":"N"},{"rule":"RING_TO_CHAIN"}]}"#)
                .unwrap();
        assert_eq!(rules.rules[1], CutRule::RingToChain);
        assert_eq!(cut_bonds(&setup("CCN").0, &rules), vec![1]);
        // Multiple-order bonds are never cut.
        assert!(cut_bonds(&setup("CC#N").0, &rules).is_empty());
        let defaults: CutRuleSet = serde_json::from_str(&serde_json::to_string(&CutRuleSet::default()).unwrap()).unwrap();
        assert_eq!(defaults, CutRuleSet::default());
    }

    #[test]
    fn ring_bonds_never_cut() {
        let rules = CutRuleSet {
            rules: vec![CutRule::ElementPair {
                a: "C".into(),
                b: "C".into(),
            }],
        };
        let (m, _) = setup("C1CCCCC1CC");
        assert_eq!(cut_bonds(&m, &rules), vec![6, 7]);
    }

    #[test]
    fn segmentation_basics() {
        let (_, g) = setup("CCO");
        let s = segment_graph(&g, &[]).unwrap();
        assert_eq!(s.sub, g);
        assert_eq!(s.n_fragments, 1);
        let all: Vec<usize> = (0..g.n_edges()).collect();
        let s = segment_graph(&g, &all).unwrap();
        assert_eq!(s.n_fragments, 3);
        assert!(s.sub.cg.is_empty() && s.sub.geom.is_empty());
        assert_eq!(segment_graph(&g, &[9]), Err(PartitionError::InvalidEdgeIndex(9)));
    }

    #[test]
    fn segmentation_drops_dependent_triplets() {
        let m = parse_smiles("CCCC")
            .unwrap()
            .with_conformer(vec![[0.0; 3], [1.5, 0.0, 0.0], [1.5, 1.5, 0.0], [3.0, 1.5, 0.3]])
            .unwrap();
        let g = build_unified_graph(&m, &GraphConfig::default()).unwrap();
        assert_eq!(g.geom.len(), 4);
        let s = segment_graph(&g, &[4, 5]).unwrap();
        assert_eq!(s.sub.n_edges(), 4);
        assert_eq!(s.sub.geom.len(), 2);
        assert_eq!(s.fragment_idx, vec![0, 0, 0, 1]);
        for (p, &(a, b)) in s.sub.cg.iter().enumerate() {
            let t = &s.sub.geom[s.sub.geom_slot[p].unwrap()];
            assert_eq!((t.edge_ij, t.edge_jk), (a, b));
        }
    }

    #[test]
    fn benzoic_acid_fragments() {
        let (m, g) = setup("c1ccccc1C(=O)O");
        let frags = annotate_fragments(&m, &compute_cut_set(&g, &m, &CutRuleSet::default()));
        // Phenyl and carboxyl, each with one attachment marker.
        assert_eq!(frags, vec!["c1ccccc1[*]", "C([*])(=O)O"]);
        // The methylated form also loses its methyl.
        let (m, g) = setup("CC1=CC=CC=C1C(=O)O");
        let frags = annotate_fragments(&m, &compute_cut_set(&g, &m, &CutRuleSet::default()));
        assert_eq!(frags.len(), 3);
        assert_eq!(frags.iter().map(|f| f.matches("[*]").count()).sum::<usize>(), 4);
    }

    #[test]
    fn fragment_writer() {
        let m = parse_smiles("CCO").unwrap();
        let frags = annotate_fragments(&m, &[2, 3]);
        assert_eq!(frags, vec!["CC[*]", "O[*]"]);
        assert_eq!(annotate_fragments(&m, &[]), vec!["CCO"]);
    }

    #[test]
    fn uncut_writer_round_trips_topology() {
        for s in ["c1ccccc1C(=O)O", "C1CC2CCC1CC2", "[NH4+].[Cl-]", "CC(C)(C)c1ccc(-c2ccccc2)cc1", "C%10CC%10"] {
            let m = parse_smiles(s).unwrap();
            let out = annotate_fragments(&m, &[]).join(".");
            let back = parse_smiles(&out).unwrap();
            assert_eq!(back.atom_count(), m.atom_count(), "{s} -> {out}");
            assert_eq!(back.bonds.len(), m.bonds.len(), "{s} -> {out}");
            let orders = |x: &Molecule| {
                let mut v: Vec<_> = x.bonds.iter().map(|b| b.order).collect();
                v.sort();
                v
            };
            assert_eq!(orders(&back), orders(&m), "{s} -> {out}");
        }
    }

    proptest! {
        #[test]
        fn segmentation_invariants(pick in 0usize..6, mask in proptest::collection::vec(any::<bool>(), 12)) {
            let pool = ["CCOC(=O)c1ccccc1", "CC(=O)NCC1CC1", "c1ccccc1OCC", "CCCCCC", "C1CCCCC1CCN", "CC(C)CO"];
            let (_, g) = setup(pool[pick]);
            let n_bonds = g.n_edges() / 2;
            let cut: Vec<usize> = (0..n_bonds).filter(|&b| mask[b % 12]).flat_map(|b| [2 * b, 2 * b + 1]).collect();
            let s = segment_graph(&g, &cut).unwrap();
            prop_assert_eq!(&s.sub.node_feats, &g.node_feats);
            prop_assert_eq!(s.fragment_idx.len(), g.n_nodes());
            for &(a, b) in &s.sub.cg {
                prop_assert!(a < s.sub.n_edges() && b < s.sub.n_edges());
            }
            // Brute-force component count by repeated relaxation.
            let mut label: Vec<usize> = (0..g.n_nodes()).collect();
            loop {
                let mut changed = false;
                for &(x, y) in &s.sub.edges {
                    let l = label[x].min(label[y]);
                    if label[x] != l || label[y] != l {
                        label[x] = l;
                        label[y] = l;
                        changed = true;
                    }
                }
                if !changed { break; }
            }
            let distinct: BTreeSet<usize> = label.iter().copied().collect();
            prop_assert_eq!(distinct.len(), s.n_fragments);
            for &(x, y) in &s.sub.edges {
                prop_assert_eq!(s.fragment_idx[x], s.fragment_idx[y]);
            }
        }
    }
}
