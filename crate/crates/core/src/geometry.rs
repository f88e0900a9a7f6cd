//! 3D primitives, rigid transforms and weighted Kabsch alignment.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Rotation = Matrix3<f64>;

/// Relative singular-value floor below which the cross-covariance is treated as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Proper rigid motion `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    /// Rotation by `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        Self::new(axis_angle_matrix(axis, angle), translation)
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    /// Rotation entries in row-major order.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Self {
        Self::new(
            Rotation::from_row_slice(&rotation),
            Vec3::new(translation[0], translation[1], translation[2]),
        )
    }

    /// Checks orthonormality and `det = +1` within `tol` per entry.
    pub fn is_proper(&self, tol: f64) -> bool {
        is_proper_rotation(&self.rotation, tol)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("RigidTransform", 2)?;
        st.serialize_field("rotation", &self.rotation_row_major())?;
        st.serialize_field(
            "translation",
            &[self.translation.x, self.translation.y, self.translation.z],
        )?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            rotation: [f64; 9],
            translation: [f64; 3],
        }
        let raw = Raw::deserialize(d)?;
        Ok(RigidTransform::from_row_major(raw.rotation, raw.translation))
    }
}

pub fn is_proper_rotation(r: &Rotation, tol: f64) -> bool {
    let rtr = r.transpose() * r;
    let ortho = (rtr - Rotation::identity()).iter().all(|e| e.abs() <= tol);
    ortho && (r.determinant() - 1.0).abs() <= tol
}

/// Rodrigues rotation matrix.
pub fn axis_angle_matrix(axis: Vec3, angle: f64) -> Rotation {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Rotation::identity();
    }
    let k = axis / n;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Rotation::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// A putative source/target point pair with per-round bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Correspondence {
    pub source: Vec3,
    pub target: Vec3,
    pub source_normal: Option<Vec3>,
    pub target_normal: Option<Vec3>,
    pub weight: u32,
    pub prev_residual: Option<f64>,
    pub curr_residual: Option<f64>,
}

impl Correspondence {
    pub fn new(source: Vec3, target: Vec3) -> Self {
        Self {
            source,
            target,
            ..Default::default()
        }
    }

    pub fn with_normals(mut self, source_normal: Vec3, target_normal: Vec3) -> Self {
        self.source_normal = Some(source_normal);
        self.target_normal = Some(target_normal);
        self
    }

    /// Shifts the current residual into the previous slot and stores `r`.
    pub fn push_residual(&mut self, r: f64) {
        self.prev_residual = self.curr_residual;
        self.curr_residual = Some(r);
    }
}

#[inline]
pub fn apply_transform(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

/// Euclidean distance between the transformed source and the target.
#[inline]
pub fn residual(t: &RigidTransform, c: &Correspondence) -> f64 {
    (t.apply(&c.source) - c.target).norm()
}

/// Geodesic distance between two rotations, in radians.
///
/// Evaluated as `atan2(sin, cos)` of the relative rotation; `acos` of the
/// trace alone loses about eight digits near zero.
pub fn rotation_geodesic_angle(r1: &Rotation, r2: &Rotation) -> f64 {
    let rel = r1 * r2.transpose();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sin = 0.5
        * Vec3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        )
        .norm();
    sin.atan2(cos)
}

/// Least-squares rigid transform from weighted point pairs (centroids removed).
///
/// Entries with non-positive weight are ignored exactly. Fails with
/// `DegenerateInput` when fewer than three pairs carry weight or the
/// weighted cross-covariance has rank below two.
pub fn weighted_kabsch(corrs: &[Correspondence], weights: &[f64]) -> Result<RigidTransform> {
    let pairs: Vec<(Vec3, Vec3, f64)> = corrs
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(c, &w)| (c.source, c.target, w))
        .collect();
    kabsch_pairs(&pairs)
}

/// Same as [`weighted_kabsch`] over raw `(source, target, weight)` triples.
pub fn kabsch_pairs(pairs: &[(Vec3, Vec3, f64)]) -> Result<RigidTransform> {
    let active: Vec<&(Vec3, Vec3, f64)> = pairs.iter().filter(|p| p.2 > 0.0).collect();
    if active.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "weighted Kabsch needs at least 3 positively weighted correspondences, got {}",
            active.len()
        )));
    }
    let wsum: f64 = active.iter().map(|p| p.2).sum();
    let src_c = active.iter().fold(Vec3::zeros(), |acc, p| acc + p.0 * p.2) / wsum;
    let tgt_c = active.iter().fold(Vec3::zeros(), |acc, p| acc + p.1 * p.2) / wsum;

    let mut h = Matrix3::zeros();
    for (s, t, w) in active.iter().map(|p| (p.0 - src_c, p.1 - tgt_c, p.2 / wsum)) {
        h += w * s * t.transpose();
    }
    let rotation = rotation_from_cross_covariance(&h)?;
    Ok(RigidTransform::new(rotation, tgt_c - rotation * src_c))
}

/// Rotation maximizing `tr(R·H)` where `H = Σ w·a·bᵀ`, with reflection correction.
pub(crate) fn rotation_from_cross_covariance(h: &Matrix3<f64>) -> Result<Rotation> {
    let svd = SVD::new(*h, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInput("SVD failed to converge".into())),
    };
    // nalgebra does not guarantee sorted singular values
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s_max = svd.singular_values[order[0]];
    let s_mid = svd.singular_values[order[1]];
    if !(s_max > 0.0) || s_mid <= RANK_TOL * s_max {
        return Err(Error::DegenerateInput(
            "cross-covariance has rank below 2 (points collinear or coincident)".into(),
        ));
    }
    let v = v_t.transpose();
    let ut = u.transpose();
    let d = (v * ut).determinant().signum();
    let mut diag = Vector3::new(1.0, 1.0, 1.0);
    diag[order[2]] = d;
    Ok(v * Matrix3::from_diagonal(&diag) * ut)
}
