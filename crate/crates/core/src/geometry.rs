//! Invariant geometric descriptors, rigid transforms and radius graphs.

use alloc::vec::Vec;
use core::f64::consts::PI;

// Supplies float math when std is absent.
#[allow(unused_imports)]
use num_traits::Float;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::smiles::{Molecule, Point3};

/// Vectors shorter than this are treated as zero.
pub const DEGENERATE_EPS: f64 = 1e-9;
pub const DEFAULT_RADIUS_CUTOFF: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate geometry at atoms {0:?}")]
    DegenerateGeometry(Vec<usize>),
    #[error("molecule has no conformer")]
    NoConformer,
    #[error("matrix is not a proper rotation (deviation {0:e})")]
    NotARotation(f64),
    #[error("atom index {0} out of range")]
    IndexOutOfRange(usize),
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

/// Bond lengths and angle of a bonded pair `(i, j)`, `(j, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomTriplet {
    pub edge_ij: usize,
    pub edge_jk: usize,
    pub l_ij: f64,
    pub l_jk: f64,
    pub theta: f64,
}

fn point(coords: &[Point3], i: usize) -> Result<Point3, GeometryError> {
    coords.get(i).copied().ok_or(GeometryError::IndexOutOfRange(i))
}

/// `(|p_i - p_j|, |p_k - p_j|, angle at j)`.
pub fn geometric_triplet(coords: &[Point3], i: usize, j: usize, k: usize) -> Result<(f64, f64, f64), GeometryError> {
    let (pi, pj, pk) = (point(coords, i)?, point(coords, j)?, point(coords, k)?);
    let (u, v) = (sub(pi, pj), sub(pk, pj));
    let (lu, lv) = (norm(u), norm(v));
    if i == j || j == k || i == k || lu < DEGENERATE_EPS || lv < DEGENERATE_EPS {
        return Err(GeometryError::DegenerateGeometry(alloc::vec![i, j, k]));
    }
    let c = (dot(u, v) / (lu * lv)).clamp(-1.0, 1.0);
    Ok((lu, lv, c.acos()))
}

/// Bond vectors `r_ij = p_j - p_i`, `r_jk`, `r_kl` of a four-atom chain.
fn chain(coords: &[Point3], idx: [usize; 4]) -> Result<[Point3; 3], GeometryError> {
    let p = [
        point(coords, idx[0])?,
        point(coords, idx[1])?,
        point(coords, idx[2])?,
        point(coords, idx[3])?,
    ];
    let r = [sub(p[1], p[0]), sub(p[2], p[1]), sub(p[3], p[2])];
    let distinct = (0..4).all(|a| (a + 1..4).all(|b| idx[a] != idx[b]));
    let n1 = cross(r[0], r[1]);
    let n2 = cross(r[1], r[2]);
    if !distinct
        || r.iter().any(|v| norm(*v) < DEGENERATE_EPS)
        || norm(n1) < DEGENERATE_EPS
        || norm(n2) < DEGENERATE_EPS
    {
        return Err(GeometryError::DegenerateGeometry(idx.to_vec()));
    }
    Ok(r)
}

fn fold_angle(a: f64) -> f64 {
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// `atan2((r_ij × r_jk)·r_kl, (r_ij × r_jk)·(r_jk × r_kl))`, in `(-π, π]`.
pub fn torsion_paper(coords: &[Point3], i: usize, j: usize, k: usize, l: usize) -> Result<f64, GeometryError> {
    let [a, b, c] = chain(coords, [i, j, k, l])?;
    let n1 = cross(a, b);
    Ok(fold_angle(dot(n1, c).atan2(dot(n1, cross(b, c)))))
}

/// Textbook dihedral `atan2(|r_jk| r_ij·(r_jk × r_kl), (r_ij × r_jk)·(r_jk × r_kl))`.
pub fn torsion_standard(coords: &[Point3], i: usize, j: usize, k: usize, l: usize) -> Result<f64, GeometryError> {
    let [a, b, c] = chain(coords, [i, j, k, l])?;
    let n2 = cross(b, c);
    Ok(fold_angle((norm(b) * dot(a, n2)).atan2(dot(cross(a, b), n2))))
}

/// `p ↦ R p + b` with `R` a proper rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    r: [[f64; 3]; 3],
    b: Point3,
}

impl RigidTransform {
    /// Rejects `R` unless `RᵀR = I` and `det R = 1` within 1e-12.
    pub fn new(r: [[f64; 3]; 3], b: Point3) -> Result<Self, GeometryError> {
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((rtr - id).abs());
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        dev = dev.max((det - 1.0).abs());
        if dev.is_nan() || dev >= 1e-12 {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(RigidTransform { r, b })
    }

    pub fn identity() -> Self {
        RigidTransform {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            b: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        self.r
    }

    pub fn translation(&self) -> Point3 {
        self.b
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let mut out = self.b;
        for (o, row) in out.iter_mut().zip(&self.r) {
            *o += dot(*row, p);
        }
        out
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (0..3).map(|k| self.r[i][k] * other.r[k][j]).sum();
            }
        }
        RigidTransform {
            r,
            b: self.apply(other.b),
        }
    }
}

pub fn apply_rigid_transform(coords: &[Point3], t: &RigidTransform) -> Vec<Point3> {
    coords.iter().map(|&p| t.apply(p)).collect()
}

/// Rotation from a normalized Gaussian quaternion, translation from `U[-10, 10]³`.
pub fn random_rotation(seed: u64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: [f64; 4] = loop {
        let q: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            break q.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let u = Uniform::new_inclusive(-10.0, 10.0).expect("valid range");
    let b = [u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)];
    RigidTransform::new(r, b).expect("unit quaternion yields a rotation")
}

/// Non-bonded pairs `(a, b)`, `a < b`, no farther apart than `cutoff`.
pub fn radius_edges(m: &Molecule, cutoff: f64) -> Result<Vec<(usize, usize)>, GeometryError> {
    let coords = m.conformer.as_ref().ok_or(GeometryError::NoConformer)?;
    let mut bonded = alloc::collections::BTreeSet::new();
    for b in &m.bonds {
        bonded.insert((b.a.min(b.b), b.a.max(b.b)));
    }
    let mut out = Vec::new();
    for a in 0..coords.len() {
        for b in a + 1..coords.len() {
            if !bonded.contains(&(a, b)) && distance(coords[a], coords[b]) <= cutoff {
                out.push((a, b));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(seed: u64, n: usize) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect()
    }

    #[test]
    fn right_angle() {
        let c = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        let (a, b, t) = geometric_triplet(&c, 0, 1, 2).unwrap();
        assert_eq!((a, b), (1.0, 1.0));
        assert!((t - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn collinear_is_pi() {
        let c = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(geometric_triplet(&c, 0, 1, 2).unwrap().2, PI);
    }

    #[test]
    fn degenerate_triplet() {
        let c = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(matches!(geometric_triplet(&c, 0, 1, 2), Err(GeometryError::DegenerateGeometry(_))));
    }

    const TRANS: [Point3; 4] = [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, -1.0, 0.0]];
    const CIS: [Point3; 4] = [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]];

    #[test]
    fn planar_fixtures() {
        assert_eq!(torsion_paper(&TRANS, 0, 1, 2, 3).unwrap(), PI);
        assert_eq!(torsion_standard(&TRANS, 0, 1, 2, 3).unwrap(), PI);
        assert_eq!(torsion_paper(&CIS, 0, 1, 2, 3).unwrap(), 0.0);
        assert_eq!(torsion_standard(&CIS, 0, 1, 2, 3).unwrap(), 0.0);
    }

    #[test]
    fn torsion_gauche_magnitude() {
        // Fourth atom rotated 90 degrees out of plane.
        let c = [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 1.0]];
        let t = torsion_standard(&c, 0, 1, 2, 3).unwrap();
        assert!((t.abs() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_torsion_is_degenerate() {
        let c = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [2.0, 1.0, 0.0]];
        assert!(torsion_paper(&c, 0, 1, 2, 3).is_err());
    }

    #[test]
    fn random_rotation_is_proper_and_seeded() {
        for seed in 0..50 {
            let t = random_rotation(seed);
            assert!(RigidTransform::new(t.rotation(), t.translation()).is_ok());
            assert_eq!(t, random_rotation(seed));
            assert!(t.translation().iter().all(|x| x.abs() <= 10.0));
        }
    }

    #[test]
    fn rejects_reflection() {
        let r = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidTransform::new(r, [0.0; 3]).is_err());
    }

    #[test]
    fn identity_and_translation() {
        let c = cloud(1, 10);
        assert_eq!(apply_rigid_transform(&c, &RigidTransform::identity()), c);
        let t = RigidTransform::new(RigidTransform::identity().rotation(), [3.0, -2.0, 7.5]).unwrap();
        let moved = apply_rigid_transform(&c, &t);
        for a in 0..10 {
            for b in 0..10 {
                assert!((distance(c[a], c[b]) - distance(moved[a], moved[b])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composition() {
        let (s, t) = (random_rotation(3), random_rotation(4));
        let c = cloud(5, 20);
        let two_step = apply_rigid_transform(&apply_rigid_transform(&c, &t), &s);
        let one_step = apply_rigid_transform(&c, &s.compose(&t));
        for (p, q) in two_step.iter().zip(&one_step) {
            for d in 0..3 {
                assert!((p[d] - q[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn radius_edges_fixtures() {
        let far = parse_smiles("C.C").unwrap().with_conformer(vec![[0.0; 3], [7.0, 0.0, 0.0]]).unwrap();
        assert!(radius_edges(&far, 6.0).unwrap().is_empty());
        let h = 3f64.sqrt();
        let tri = parse_smiles("C.C.C")
            .unwrap()
            .with_conformer(vec![[0.0; 3], [2.0, 0.0, 0.0], [1.0, h, 0.0]])
            .unwrap();
        assert_eq!(radius_edges(&tri, 2.0 + 1e-9).unwrap(), vec![(0, 1), (0, 2), (1, 2)]);
        let bonded = parse_smiles("CC").unwrap().with_conformer(vec![[0.0; 3], [1.5, 0.0, 0.0]]).unwrap();
        assert!(radius_edges(&bonded, 6.0).unwrap().is_empty());
        assert_eq!(radius_edges(&parse_smiles("CC").unwrap(), 6.0), Err(GeometryError::NoConformer));
    }

    #[test]
    fn radius_edges_match_brute_force() {
        for seed in 0..5 {
            let coords = cloud(100 + seed, 50);
            let smiles = alloc::vec!["C"; 50].join(".");
            let m = parse_smiles(&smiles).unwrap().with_conformer(coords.clone()).unwrap();
            let mut expected = Vec::new();
            for a in 0..50 {
                for b in 0..50 {
                    let d2: f64 = (0..3).map(|k| (coords[a][k] - coords[b][k]).powi(2)).sum();
                    if a < b && d2.sqrt() <= 4.0 {
                        expected.push((a, b));
                    }
                }
            }
            assert_eq!(radius_edges(&m, 4.0).unwrap(), expected);
        }
    }

    #[test]
    fn torsion_signs_agree_on_random_chains() {
        let mut checked = 0;
        for seed in 0..1000 {
            let c = cloud(seed, 4);
            if let (Ok(a), Ok(b)) = (torsion_paper(&c, 0, 1, 2, 3), torsion_standard(&c, 0, 1, 2, 3)) {
                assert_eq!(a.signum(), b.signum(), "seed {seed}");
                checked += 1;
            }
        }
        assert_eq!(checked, 1000);
    }

    proptest! {
        #[test]
        fn triplet_invariance(seed in 0u64..10_000, rot in 0u64..10_000) {
            let c = cloud(seed, 3);
            let t = random_rotation(rot);
            let moved = apply_rigid_transform(&c, &t);
            let a = geometric_triplet(&c, 0, 1, 2).unwrap();
            let b = geometric_triplet(&moved, 0, 1, 2).unwrap();
            prop_assert!((a.0 - b.0).abs() < 1e-9);
            prop_assert!((a.1 - b.1).abs() < 1e-9);
            prop_assert!((a.2 - b.2).abs() < 1e-9);
            prop_assert!((0.0..=PI).contains(&a.2));
        }

        #[test]
        fn torsion_invariance(seed in 0u64..10_000, rot in 0u64..10_000) {
            let c = cloud(seed, 4);
            let moved = apply_rigid_transform(&c, &random_rotation(rot));
            let a = torsion_paper(&c, 0, 1, 2, 3).unwrap();
            let b = torsion_paper(&moved, 0, 1, 2, 3).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            let a = torsion_standard(&c, 0, 1, 2, 3).unwrap();
            let b = torsion_standard(&moved, 0, 1, 2, 3).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn angle_in_range(x in -1e3f64..1e3, y in -1e3f64..1e3, z in -1e3f64..1e3) {
            let c = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [x, y, z]];
            if let Ok((_, _, t)) = geometric_triplet(&c, 0, 1, 2) {
                prop_assert!((0.0..=PI).contains(&t));
            }
        }
    }
}
