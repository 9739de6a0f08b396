//! SMILES parsing into a heavy-atom molecular graph, plus atom and bond
//! featurization.
//!
//! The grammar covers the practical subset used by drug-like corpora:
//! organic-subset atoms, bracket atoms (`[isotope? symbol chirality? Hn? charge? class?]`),
//! bond symbols `- = # : / \`, branches, ring closures `0-9` / `%NN`, the
//! `*` wildcard and `.` disconnections. Hydrogens are never materialized and
//! aromaticity is read syntactically from lowercase symbols.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Element symbols recognised inside brackets.
const PERIODIC_TABLE: &[&str] = &[
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr",
];

/// Aromatic (lowercase) symbols allowed inside brackets.
const AROMATIC_BRACKET: &[(&str, &str)] = &[
    ("se", "Se"),
    ("as", "As"),
    ("te", "Te"),
    ("b", "B"),
    ("c", "C"),
    ("n", "N"),
    ("o", "O"),
    ("p", "P"),
    ("s", "S"),
];

/// Element vocabulary of the atom feature one-hot; everything else is OTHER.
pub const FEATURE_ELEMENTS: [&str; 16] = [
    "B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "Si", "Na", "K", "Fe", "Zn", "Se",
];

/// Width of an atom feature row.
pub const ATOM_FEATURE_DIM: usize = 30;
/// Width of a bond feature row.
pub const BOND_FEATURE_DIM: usize = 6;

const MAX_ABS_CHARGE: i8 = 4;

/// A chemical element symbol, or [`Element::OTHER`] for the `*` wildcard.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Element(&'static str);

impl Element {
    pub const OTHER: Element = Element("*");

    pub fn from_symbol(symbol: &str) -> Option<Element> {
        if symbol == "*" {
            return Some(Element::OTHER);
        }
        PERIODIC_TABLE
            .iter()
            .find(|&&s| s == symbol)
            .map(|&s| Element(s))
    }

    pub fn symbol(&self) -> &'static str {
        self.0
    }

    pub fn is_other(&self) -> bool {
        self.0 == "*"
    }
}

impl fmt::Debug for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chirality {
    /// `@@`
    Clockwise,
    /// `@`
    CounterClockwise,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i8,
    pub isotope: Option<u16>,
    pub explicit_h: Option<u8>,
    pub chirality: Option<Chirality>,
    pub in_ring: bool,
}

impl Atom {
    fn organic(element: Element, aromatic: bool) -> Atom {
        Atom {
            element,
            aromatic,
            formal_charge: 0,
            isotope: None,
            explicit_h: None,
            chirality: None,
            in_ring: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Stable small code used by fingerprint hashing and feature slots.
    pub fn code(self) -> u8 {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }
}

/// Direction tag of a `/` or `\` bond. Stored, never featurized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BondDirection {
    Up,
    Down,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub direction: Option<BondDirection>,
    pub in_ring: bool,
}

impl Bond {
    /// The endpoint that is not `atom`.
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

/// A 3-vector in Ångström.
pub type Point3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub conformer: Option<Vec<Point3>>,
    pub source_smiles: String,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SmilesError {
    #[error("empty SMILES input")]
    EmptyInput,
    #[error("unclosed bracket atom starting at byte {offset}")]
    UnclosedBracket { offset: usize },
    #[error("unclosed branch opened at byte {offset}")]
    UnclosedBranch { offset: usize },
    #[error("ring closure at byte {offset} is never matched")]
    UnmatchedRingClosure { offset: usize },
    #[error("unknown element at byte {offset}")]
    UnknownElement { offset: usize },
    #[error("unexpected character {ch:?} at byte {offset}")]
    UnexpectedChar { ch: char, offset: usize },
    #[error("bond symbol at byte {offset} is not followed by an atom")]
    DanglingBond { offset: usize },
    #[error("ring closure at byte {offset} bonds an atom to itself or duplicates a bond")]
    InvalidRingBond { offset: usize },
    #[error("formal charge out of range at byte {offset}")]
    ChargeOutOfRange { offset: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MoleculeError {
    #[error("conformer has {got} points for {expected} atoms")]
    ConformerLength { expected: usize, got: usize },
}

impl Molecule {
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Attaches 3D coordinates listed in heavy-atom order.
    pub fn with_conformer(mut self, coords: Vec<Point3>) -> Result<Molecule, MoleculeError> {
        if coords.len() != self.atoms.len() {
            return Err(MoleculeError::ConformerLength {
                expected: self.atoms.len(),
                got: coords.len(),
            });
        }
        self.conformer = Some(coords);
        Ok(self)
    }

    /// Per-atom neighbor lists `(neighbor, bond index)` in bond order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for (bi, bond) in self.bonds.iter().enumerate() {
            adj[bond.a].push((bond.b, bi));
            adj[bond.b].push((bond.a, bi));
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.atoms.len()];
        for bond in &self.bonds {
            deg[bond.a] += 1;
            deg[bond.b] += 1;
        }
        deg
    }

    /// Index of the bond joining `a` and `b`, if any.
    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.bonds
            .iter()
            .position(|bond| (bond.a == a && bond.b == b) || (bond.a == b && bond.b == a))
    }
}

#[derive(Clone, Copy)]
struct BondSymbol {
    order: BondOrder,
    direction: Option<BondDirection>,
}

fn bond_symbol(c: u8) -> Option<BondSymbol> {
    let (order, direction) = match c {
        b'-' => (BondOrder::Single, None),
        b'=' => (BondOrder::Double, None),
        b'#' => (BondOrder::Triple, None),
        b':' => (BondOrder::Aromatic, None),
        b'/' => (BondOrder::Single, Some(BondDirection::Up)),
        b'\\' => (BondOrder::Single, Some(BondDirection::Down)),
        _ => return None,
    };
    Some(BondSymbol {
        order,
        direction,
    })
}

struct OpenRing {
    atom: usize,
    bond: Option<BondSymbol>,
    offset: usize,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
}

/// Parses a SMILES string into a heavy-atom graph with ring flags set.
pub fn parse_smiles(s: &str) -> Result<Molecule, SmilesError> {
    if s.is_empty() {
        return Err(SmilesError::EmptyInput);
    }
    let mut p = Parser {
        src: s.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
    };
    p.run()?;
    let mut mol = Molecule {
        atoms: p.atoms,
        bonds: p.bonds,
        conformer: None,
        source_smiles: String::from(s),
    };
    perceive_rings(&mut mol);
    Ok(mol)
}

impl<'a> Parser<'a> {
    fn run(&mut self) -> Result<(), SmilesError> {
        let mut prev: Option<usize> = None;
        let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
        let mut pending: Option<(BondSymbol, usize)> = None;
        let mut rings: BTreeMap<u32, OpenRing> = BTreeMap::new();

        while self.pos < self.src.len() {
            let start = self.pos;
            let c = self.src[self.pos];
            if let Some(sym) = bond_symbol(c) {
                if pending.is_some() || prev.is_none() {
                    return Err(SmilesError::UnexpectedChar {
                        ch: c as char,
                        offset: start,
                    });
                }
                pending = Some((sym, start));
                self.pos += 1;
                continue;
            }
            match c {
                b'(' => {
                    if prev.is_none() || pending.is_some() {
                        return Err(SmilesError::UnexpectedChar { ch: '(', offset: start });
                    }
                    branches.push((prev, start));
                    self.pos += 1;
                }
                b')' => {
                    if pending.is_some() {
                        return Err(SmilesError::DanglingBond {
                            offset: pending.map(|p| p.1).unwrap_or(start),
                        });
                    }
                    match branches.pop() {
                        Some((open, _)) => prev = open,
                        None => return Err(SmilesError::UnexpectedChar { ch: ')', offset: start }),
                    }
                    self.pos += 1;
                }
                b'.' => {
                    if pending.is_some() {
                        return Err(SmilesError::DanglingBond {
                            offset: pending.map(|p| p.1).unwrap_or(start),
                        });
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let label = self.ring_label()?;
                    let atom = prev.ok_or(SmilesError::UnexpectedChar {
                        ch: c as char,
                        offset: start,
                    })?;
                    let bond = pending.take().map(|p| p.0);
                    if let Some(open) = rings.remove(&label) {
                        let sym = bond.or(open.bond);
                        self.close_ring(open.atom, atom, sym, start)?;
                    } else {
                        rings.insert(
                            label,
                            OpenRing {
                                atom,
                                bond,
                                offset: start,
                            },
                        );
                    }
                }
                _ => {
                    let atom = self.atom()?;
                    let idx = self.atoms.len();
                    self.atoms.push(atom);
                    if let Some(from) = prev {
                        let sym = pending.take().map(|p| p.0);
                        self.add_bond(from, idx, sym);
                    }
                    prev = Some(idx);
                }
            }
        }
        if let Some((_, offset)) = pending {
            return Err(SmilesError::DanglingBond { offset });
        }
        if let Some(&(_, offset)) = branches.last() {
            return Err(SmilesError::UnclosedBranch { offset });
        }
        if let Some(open) = rings.values().min_by_key(|r| r.offset) {
            return Err(SmilesError::UnmatchedRingClosure { offset: open.offset });
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, SmilesError> {
        let start = self.pos;
        let c = self.src[self.pos];
        if c == b'%' {
            let digits = self.src.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0'))
                }
                _ => Err(SmilesError::UnexpectedChar { ch: '%', offset: start }),
            }
        } else {
            self.pos += 1;
            Ok(u32::from(c - b'0'))
        }
    }

    fn implicit_order(&self, a: usize, b: usize) -> BondOrder {
        if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, sym: Option<BondSymbol>) {
        let (order, direction) = match sym {
            Some(s) => (s.order, s.direction),
            None => (self.implicit_order(a, b), None),
        };
        self.bonds.push(Bond {
            a,
            b,
            order,
            direction,
            in_ring: false,
        });
    }

    fn close_ring(
        &mut self,
        a: usize,
        b: usize,
        sym: Option<BondSymbol>,
        offset: usize,
    ) -> Result<(), SmilesError> {
        let duplicate = self
            .bonds
            .iter()
            .any(|bond| (bond.a == a && bond.b == b) || (bond.a == b && bond.b == a));
        if a == b || duplicate {
            return Err(SmilesError::InvalidRingBond { offset });
        }
        self.add_bond(a, b, sym);
        Ok(())
    }

    fn atom(&mut self) -> Result<Atom, SmilesError> {
        let start = self.pos;
        let c = self.src[start];
        if c == b'[' {
            return self.bracket_atom();
        }
        let next = self.src.get(start + 1).copied();
        let (symbol, aromatic, width) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", false, 2),
            (b'B', Some(b'r')) => ("Br", false, 2),
            (b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I', _) => {
                (PERIODIC_TABLE.iter().find(|s| s.as_bytes() == [c]).copied().unwrap_or("*"), false, 1)
            }
            (b'b' | b'c' | b'n' | b'o' | b'p' | b's', _) => {
                let upper = c.to_ascii_uppercase();
                (PERIODIC_TABLE.iter().find(|s| s.as_bytes() == [upper]).copied().unwrap_or("*"), true, 1)
            }
            (b'*', _) => ("*", false, 1),
            (c, _) if c.is_ascii_alphabetic() => {
                return Err(SmilesError::UnknownElement { offset: start });
            }
            (c, _) => {
                return Err(SmilesError::UnexpectedChar {
                    ch: c as char,
                    offset: start,
                })
            }
        };
        self.pos += width;
        let element = Element::from_symbol(symbol).ok_or(SmilesError::UnknownElement { offset: start })?;
        Ok(Atom::organic(element, aromatic))
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let open = self.pos;
        let close = self.src[open..]
            .iter()
            .position(|&b| b == b']')
            .map(|p| open + p)
            .ok_or(SmilesError::UnclosedBracket { offset: open })?;
        let body = &self.src[open + 1..close];
        let at = |i: usize| body.get(i).copied();
        let mut i = 0;

        let mut isotope: Option<u16> = None;
        while let Some(d @ b'0'..=b'9') = at(i) {
            let v = isotope.unwrap_or(0).saturating_mul(10).saturating_add(u16::from(d - b'0'));
            isotope = Some(v);
            i += 1;
        }

        let sym_offset = open + 1 + i;
        let (element, aromatic) = {
            let rest = &body[i..];
            let mut found = None;
            for &(lower, upper) in AROMATIC_BRACKET {
                if rest.starts_with(lower.as_bytes()) {
                    found = Some((upper, true, lower.len()));
                    break;
                }
            }
            if found.is_none() {
                if rest.first() == Some(&b'*') {
                    found = Some(("*", false, 1));
                } else if rest.first().is_some_and(u8::is_ascii_uppercase) {
                    let two = rest.get(..2).filter(|t| t[1].is_ascii_lowercase());
                    let hit2 = two.and_then(|t| PERIODIC_TABLE.iter().find(|s| s.as_bytes() == t));
                    if let Some(s) = hit2 {
                        found = Some((*s, false, 2));
                    } else if let Some(s) = PERIODIC_TABLE.iter().find(|s| s.as_bytes() == &rest[..1]) {
                        found = Some((*s, false, 1));
                    }
                }
            }
            let (sym, arom, w) = found.ok_or(SmilesError::UnknownElement { offset: sym_offset })?;
            i += w;
            (
                Element::from_symbol(sym).ok_or(SmilesError::UnknownElement { offset: sym_offset })?,
                arom,
            )
        };

        let mut chirality = None;
        if at(i) == Some(b'@') {
            if at(i + 1) == Some(b'@') {
                chirality = Some(Chirality::Clockwise);
                i += 2;
            } else {
                chirality = Some(Chirality::CounterClockwise);
                i += 1;
            }
            // Extended classes (@TH1, @SP2, @OH12 ...) are accepted and dropped.
            let class = body.get(i..i + 2);
            if matches!(class, Some(b"TH" | b"AL" | b"SP" | b"TB" | b"OH")) {
                i += 2;
                while at(i).is_some_and(|b| b.is_ascii_digit()) {
                    i += 1;
                }
            }
        }

        let mut explicit_h = None;
        if at(i) == Some(b'H') {
            i += 1;
            let mut count = 1u8;
            if let Some(d @ b'0'..=b'9') = at(i) {
                count = d - b'0';
                i += 1;
            }
            explicit_h = Some(count);
        }

        let mut formal_charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = at(i) {
            let unit = if sign == b'+' { 1 } else { -1 };
            i += 1;
            if at(i) == Some(sign) {
                let mut n = 2;
                i += 1;
                while at(i) == Some(sign) {
                    n += 1;
                    i += 1;
                }
                formal_charge = unit * n;
            } else {
                let mut mag: i32 = 0;
                let mut any = false;
                while let Some(d @ b'0'..=b'9') = at(i) {
                    mag = mag.saturating_mul(10).saturating_add(i32::from(d - b'0'));
                    any = true;
                    i += 1;
                }
                formal_charge = unit * if any { mag } else { 1 };
            }
        }
        if formal_charge.abs() > i32::from(MAX_ABS_CHARGE) {
            return Err(SmilesError::ChargeOutOfRange { offset: open });
        }

        if at(i) == Some(b':') {
            i += 1;
            while at(i).is_some_and(|b| b.is_ascii_digit()) {
                i += 1;
            }
        }
        if i != body.len() {
            return Err(SmilesError::UnexpectedChar {
                ch: body[i] as char,
                offset: open + 1 + i,
            });
        }
        self.pos = close + 1;
        Ok(Atom {
            element,
            aromatic,
            formal_charge: formal_charge as i8,
            isotope,
            explicit_h,
            chirality,
            in_ring: false,
        })
    }
}

/// Marks ring bonds (non-bridges) and their atoms.
///
/// Iterative Tarjan bridge search; a bond lies on a simple cycle exactly when
/// it is not a bridge.
fn perceive_rings(mol: &mut Molecule) {
    let n = mol.atoms.len();
    let adj = mol.adjacency();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut is_bridge = vec![false; mol.bonds.len()];
    let mut timer = 0;

    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // (atom, bond used to enter, next neighbor cursor)
        let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(top) = stack.last_mut() {
            let (v, parent_bond) = (top.0, top.1);
            if top.2 < adj[v].len() {
                let (w, bi) = adj[v][top.2];
                top.2 += 1;
                if Some(bi) == parent_bond {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = timer;
                    low[w] = timer;
                    timer += 1;
                    stack.push((w, Some(bi), 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let (Some(bi), Some(&(parent, _, _))) = (parent_bond, stack.last()) {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > disc[parent] {
                        is_bridge[bi] = true;
                    }
                }
            }
        }
    }

    for (bond, bridge) in mol.bonds.iter_mut().zip(&is_bridge) {
        bond.in_ring = !bridge;
    }
    for atom in mol.atoms.iter_mut() {
        atom.in_ring = false;
    }
    for bi in 0..mol.bonds.len() {
        if mol.bonds[bi].in_ring {
            let (a, b) = (mol.bonds[bi].a, mol.bonds[bi].b);
            mol.atoms[a].in_ring = true;
            mol.atoms[b].in_ring = true;
        }
    }
}

fn element_slot(element: Element) -> usize {
    FEATURE_ELEMENTS
        .iter()
        .position(|&s| s == element.symbol())
        .unwrap_or(FEATURE_ELEMENTS.len())
}

/// One row per atom: element(17) | degree 0-5 (6) | charge -2..+2 (5) | aromatic | in_ring.
pub fn featurize_atoms(m: &Molecule) -> Tensor<f64> {
    let degrees = m.degrees();
    let mut data = vec![0.0; m.atoms.len() * ATOM_FEATURE_DIM];
    for (i, atom) in m.atoms.iter().enumerate() {
        let row = &mut data[i * ATOM_FEATURE_DIM..(i + 1) * ATOM_FEATURE_DIM];
        row[element_slot(atom.element)] = 1.0;
        row[17 + degrees[i].min(5)] = 1.0;
        row[23 + (atom.formal_charge.clamp(-2, 2) + 2) as usize] = 1.0;
        row[28] = if atom.aromatic { 1.0 } else { 0.0 };
        row[29] = if atom.in_ring { 1.0 } else { 0.0 };
    }
    Tensor::from_vec(vec![m.atoms.len(), ATOM_FEATURE_DIM], data)
}

/// Bond feature slot of radius-graph edges.
pub const SPATIAL_SLOT: usize = 4;

/// One row per bond: order {single, double, triple, aromatic, spatial} | in_ring.
pub fn featurize_bonds(m: &Molecule) -> Tensor<f64> {
    let mut data = vec![0.0; m.bonds.len() * BOND_FEATURE_DIM];
    for (i, bond) in m.bonds.iter().enumerate() {
        let row = &mut data[i * BOND_FEATURE_DIM..(i + 1) * BOND_FEATURE_DIM];
        row[bond.order.code() as usize] = 1.0;
        row[5] = if bond.in_ring { 1.0 } else { 0.0 };
    }
    Tensor::from_vec(vec![m.bonds.len(), BOND_FEATURE_DIM], data)
}

/// Feature row of a radius-graph (spatial) edge.
pub fn spatial_bond_features() -> [f64; BOND_FEATURE_DIM] {
    let mut row = [0.0; BOND_FEATURE_DIM];
    row[SPATIAL_SLOT] = 1.0;
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn elements(m: &Molecule) -> Vec<&'static str> {
        m.atoms.iter().map(|a| a.element.symbol()).collect()
    }

    #[test]
    fn linear_chain() {
        let m = parse_smiles("CCO").unwrap();
        assert_eq!(elements(&m), ["C", "C", "O"]);
        assert_eq!(m.bonds.len(), 2);
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Single && !b.in_ring));
    }

    #[test]
    fn kekule_benzoic_acid() {
        // Hand count: six ring carbons, then C, =O, O -> 9 atoms, 6 ring + 3 chain bonds.
        let m = parse_smiles("C1=CC=CC=C1C(=O)O").unwrap();
        assert_eq!(m.atom_count(), 9);
        assert_eq!(m.bonds.len(), 9);
        let ring_atoms: Vec<bool> = m.atoms.iter().map(|a| a.in_ring).collect();
        assert_eq!(ring_atoms, [true, true, true, true, true, true, false, false, false]);
        assert_eq!(m.bonds.iter().filter(|b| b.in_ring).count(), 6);
        let carbonyl = m.bond_between(6, 7).unwrap();
        assert_eq!(m.bonds[carbonyl].order, BondOrder::Double);
        assert_eq!(m.bonds[m.bond_between(6, 8).unwrap()].order, BondOrder::Single);
        assert!(m.bond_between(5, 0).is_some());
    }

    #[test]
    fn charged_bracket_atom() {
        let m = parse_smiles("[N+]").unwrap();
        assert_eq!(m.atom_count(), 1);
        assert_eq!(m.atoms[0].element.symbol(), "N");
        assert_eq!(m.atoms[0].formal_charge, 1);
    }

    #[test]
    fn bracket_details() {
        let m = parse_smiles("[13CH3:2][C@@H](N)[O-]").unwrap();
        assert_eq!(m.atoms[0].isotope, Some(13));
        assert_eq!(m.atoms[0].explicit_h, Some(3));
        assert_eq!(m.atoms[1].chirality, Some(Chirality::Clockwise));
        assert_eq!(m.atoms[1].explicit_h, Some(1));
        assert_eq!(m.atoms[3].formal_charge, -1);
        let m = parse_smiles("[Fe++]").unwrap();
        assert_eq!(m.atoms[0].formal_charge, 2);
        let m = parse_smiles("[Sn+2]").unwrap();
        assert_eq!(m.atoms[0].formal_charge, 2);
        let m = parse_smiles("c1cc[nH]c1").unwrap();
        assert!(m.atoms[3].aromatic);
        assert_eq!(m.atoms[3].explicit_h, Some(1));
        let m = parse_smiles("[se]1cccc1").unwrap();
        assert_eq!(m.atoms[0].element.symbol(), "Se");
        assert!(m.atoms[0].aromatic);
    }

    #[test]
    fn unmatched_ring_closure() {
        assert_eq!(
            parse_smiles("C1CC"),
            Err(SmilesError::UnmatchedRingClosure { offset: 1 })
        );
    }

    #[test]
    fn error_offsets() {
        assert_eq!(parse_smiles(""), Err(SmilesError::EmptyInput));
        assert_eq!(parse_smiles("CC[N+"), Err(SmilesError::UnclosedBracket { offset: 2 }));
        assert_eq!(parse_smiles("CC(C"), Err(SmilesError::UnclosedBranch { offset: 2 }));
        assert_eq!(parse_smiles("CCX"), Err(SmilesError::UnknownElement { offset: 2 }));
        assert_eq!(parse_smiles("C[Xx]"), Err(SmilesError::UnknownElement { offset: 2 }));
        assert_eq!(parse_smiles("C="), Err(SmilesError::DanglingBond { offset: 1 }));
        assert_eq!(parse_smiles("C11"), Err(SmilesError::InvalidRingBond { offset: 2 }));
        assert_eq!(parse_smiles("C)"), Err(SmilesError::UnexpectedChar { ch: ')', offset: 1 }));
        assert_eq!(parse_smiles("[C+5]"), Err(SmilesError::ChargeOutOfRange { offset: 0 }));
    }

    #[test]
    fn two_letter_organic_subset() {
        let m = parse_smiles("ClCCBr").unwrap();
        assert_eq!(elements(&m), ["Cl", "C", "C", "Br"]);
        // Outside brackets "Sc" is S followed by aromatic c.
        let m = parse_smiles("Sc1ccccc1").unwrap();
        assert_eq!(m.atoms[0].element.symbol(), "S");
        assert!(m.atoms[1].aromatic);
    }

    #[test]
    fn aromatic_implicit_bonds_and_explicit_single() {
        let m = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        let biaryl = m.bond_between(5, 6).unwrap();
        assert_eq!(m.bonds[biaryl].order, BondOrder::Single);
        assert!(!m.bonds[biaryl].in_ring);
        assert_eq!(m.bonds.iter().filter(|b| b.order == BondOrder::Aromatic).count(), 12);
    }

    #[test]
    fn percent_ring_labels_and_disconnection() {
        let m = parse_smiles("C%10CC%10").unwrap();
        assert_eq!(m.atom_count(), 3);
        assert_eq!(m.bonds.len(), 3);
        assert!(m.atoms.iter().all(|a| a.in_ring));
        let m = parse_smiles("CC(=O)[O-].[Na+]").unwrap();
        assert_eq!(m.atom_count(), 5);
        assert_eq!(m.bonds.len(), 3);
        assert_eq!(m.degrees()[4], 0);
    }

    #[test]
    fn stereo_bonds_are_single_with_direction() {
        let m = parse_smiles("F/C=C\\F").unwrap();
        assert_eq!(m.bonds[0].order, BondOrder::Single);
        assert_eq!(m.bonds[0].direction, Some(BondDirection::Up));
        assert_eq!(m.bonds[2].direction, Some(BondDirection::Down));
        assert_eq!(featurize_bonds(&m).row(0), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ring_bond_symbol_on_either_side() {
        let m = parse_smiles("C=1CCCCC1").unwrap();
        assert_eq!(m.bonds[m.bond_between(0, 5).unwrap()].order, BondOrder::Double);
        let m = parse_smiles("C1CCCCC=1").unwrap();
        assert_eq!(m.bonds[m.bond_between(0, 5).unwrap()].order, BondOrder::Double);
    }

    #[test]
    fn methane_features() {
        let f = featurize_atoms(&parse_smiles("C").unwrap());
        let mut expected = [0.0; ATOM_FEATURE_DIM];
        expected[1] = 1.0; // C
        expected[17] = 1.0; // degree 0
        expected[25] = 1.0; // charge 0
        assert_eq!(f.row(0), &expected);
    }

    #[test]
    fn aromatic_carbon_features() {
        let f = featurize_atoms(&parse_smiles("c1ccccc1").unwrap());
        for i in 0..6 {
            let row = f.row(i);
            assert_eq!(row[1], 1.0);
            assert_eq!(row[17 + 2], 1.0, "degree 2 slot");
            assert_eq!(row[28], 1.0);
            assert_eq!(row[29], 1.0);
        }
    }

    #[test]
    fn oxide_charge_slot_and_other_element() {
        let f = featurize_atoms(&parse_smiles("[O-]").unwrap());
        assert_eq!(f.row(0)[23 + 1], 1.0);
        let f = featurize_atoms(&parse_smiles("[Cu]").unwrap());
        assert_eq!(f.row(0)[16], 1.0);
        let f = featurize_atoms(&parse_smiles("[Fe+3]").unwrap());
        assert_eq!(f.row(0)[13], 1.0);
        assert_eq!(f.row(0)[27], 1.0, "charge clipped to +2");
    }

    #[test]
    fn bond_features() {
        let f = featurize_bonds(&parse_smiles("C=O").unwrap());
        assert_eq!(f.row(0), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let f = featurize_bonds(&parse_smiles("c1ccccc1").unwrap());
        for i in 0..6 {
            assert_eq!(f.row(i), &[0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        }
        assert_eq!(spatial_bond_features(), [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn conformer_length_checked() {
        let m = parse_smiles("CC").unwrap();
        assert!(m.clone().with_conformer(vec![[0.0; 3]]).is_err());
        assert!(m.with_conformer(vec![[0.0; 3], [1.5, 0.0, 0.0]]).is_ok());
    }
}
