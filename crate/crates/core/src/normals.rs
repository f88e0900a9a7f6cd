//! PCA normal estimation for correspondence endpoints.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{Correspondence, Vec3};
use crate::knn::{PointCloud, SpatialIndex};
use crate::par;

pub const DEFAULT_K_NORMALS: usize = 20;

/// Covariance (divided by n) of the given points about their mean.
pub fn covariance(points: &[Vec3]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    }) / n
}

/// Flips `n` so that its largest-magnitude component is positive (first wins on ties).
pub fn canonicalize_sign(n: Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if n[i].abs() > n[best].abs() {
            best = i;
        }
    }
    if n[best] < 0.0 {
        -n
    } else {
        n
    }
}

/// Unit eigenvector of the smallest eigenvalue of the neighborhood covariance.
pub fn normal_from_neighborhood(points: &[Vec3]) -> Result<Vec3> {
    if points.len() < 2 {
        return Err(Error::DegenerateNeighborhood { point_index: None });
    }
    let cov = covariance(points);
    let scale = points
        .iter()
        .map(|p| p.norm_squared())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    if cov.trace() <= 1e-24 * scale {
        return Err(Error::DegenerateNeighborhood { point_index: None });
    }
    let eig = SymmetricEigen::new(cov);
    let smallest = eig.eigenvalues.imin();
    let n = eig.eigenvectors.column(smallest).into_owned();
    Ok(canonicalize_sign(n.normalize()))
}

pub fn estimate_normal(index: &SpatialIndex, point: &Vec3, k: usize) -> Result<Vec3> {
    if index.len() < 3 {
        return Err(Error::DegenerateNeighborhood { point_index: None });
    }
    let neighbors: Vec<Vec3> = index.knn(point, k).into_iter().map(|i| *index.point(i)).collect();
    normal_from_neighborhood(&neighbors)
}

/// Fills `source_normal` / `target_normal` of every correspondence.
///
/// On failure the error carries the offending correspondence index.
pub fn annotate_normals(
    corrs: &mut [Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    k: usize,
) -> Result<()> {
    if corrs.is_empty() {
        return Ok(());
    }
    let src_index = SpatialIndex::build(source)?;
    let tgt_index = SpatialIndex::build(target)?;
    let normals = par::map(corrs, |c| {
        Ok((
            estimate_normal(&src_index, &c.source, k)?,
            estimate_normal(&tgt_index, &c.target, k)?,
        ))
    });
    for (i, (c, n)) in corrs.iter_mut().zip(normals).enumerate() {
        let (ns, nt) = n.map_err(|e| match e {
            Error::DegenerateNeighborhood { .. } => Error::DegenerateNeighborhood { point_index: Some(i) },
            other => other,
        })?;
        c.source_normal = Some(ns);
        c.target_normal = Some(nt);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle_matrix, Rotation};
    use crate::knn::brute_force_knn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn plane_z0(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> Vec<Vec3> {
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        (0..n)
            .map(|_| {
                let z = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), z)
            })
            .collect()
    }

    /// Independent route: brute-force neighborhood plus the min-eigenvector of
    /// `Σ (p - mean)(p - mean)ᵀ` found by inverse power iteration.
    fn oracle_normal(points: &[Vec3], q: &Vec3, k: usize) -> Vec3 {
        let nb: Vec<Vec3> = brute_force_knn(points, q, k).into_iter().map(|i| points[i]).collect();
        let mean = nb.iter().sum::<Vec3>() / nb.len() as f64;
        let mut c = Matrix3::zeros();
        for p in &nb {
            let d = p - mean;
            c += d * d.transpose();
        }
        c /= nb.len() as f64;
        let inv = (c + Matrix3::identity() * 1e-300).try_inverse().unwrap();
        let mut v = Vec3::new(0.3, 0.5, 0.8);
        for _ in 0..200 {
            v = (inv * v).normalize();
        }
        canonicalize_sign(v)
    }

    #[test]
    fn plane_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = plane_z0(&mut rng, 400, 0.0);
        let idx = SpatialIndex::build(&pts.clone().into()).unwrap();
        let n = estimate_normal(&idx, &Vec3::new(0.1, -0.2, 0.0), 20).unwrap();
        assert!((n - Vec3::z()).norm() < 1e-9);

        let pts_x: Vec<_> = pts.iter().map(|p| Vec3::new(2.0, p.x, p.y)).collect();
        let idx = SpatialIndex::build(&pts_x.into()).unwrap();
        let n = estimate_normal(&idx, &Vec3::new(2.0, 0.3, 0.3), 20).unwrap();
        assert!((n - Vec3::x()).norm() < 1e-9);
    }

    #[test]
    fn noisy_plane_within_five_degrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = plane_z0(&mut rng, 2000, 0.01);
        let idx = SpatialIndex::build(&pts.into()).unwrap();
        for q in [Vec3::zeros(), Vec3::new(0.5, 0.5, 0.0), Vec3::new(-0.7, 0.2, 0.0)] {
            let n = estimate_normal(&idx, &q, 20).unwrap();
            assert!(n.z.abs().acos().to_degrees() < 5.0, "{n:?}");
            assert!((n.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn coincident_neighborhood_is_degenerate() {
        let pts = vec![Vec3::new(1.0, 1.0, 1.0); 25];
        let idx = SpatialIndex::build(&pts.into()).unwrap();
        assert!(matches!(
            estimate_normal(&idx, &Vec3::new(1.0, 1.0, 1.0), 20),
            Err(Error::DegenerateNeighborhood { .. })
        ));
    }

    #[test]
    fn annotate_reports_offending_index() {
        let mut pts: Vec<Vec3> = (0..30).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.0)).collect();
        pts.extend(vec![Vec3::new(500.0, 500.0, 500.0); 25]);
        let cloud = PointCloud::new(pts);
        let mut corrs = vec![
            Correspondence::new(Vec3::new(1.0, 1.0, 0.0), Vec3::new(1.0, 1.0, 0.0)),
            Correspondence::new(Vec3::new(500.0, 500.0, 500.0), Vec3::new(2.0, 4.0, 0.0)),
        ];
        let err = annotate_normals(&mut corrs, &cloud, &cloud, 20).unwrap_err();
        assert!(matches!(err, Error::DegenerateNeighborhood { point_index: Some(1) }));
    }

    #[test]
    fn annotate_empty_is_noop() {
        let mut corrs: Vec<Correspondence> = Vec::new();
        annotate_normals(&mut corrs, &PointCloud::default(), &PointCloud::default(), 20).unwrap();
    }

    #[test]
    fn annotate_matches_independent_pca() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // two curved surfaces: a paraboloid cap and a sphere
        let src: Vec<Vec3> = (0..800)
            .map(|_| {
                let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                Vec3::new(x, y, 0.3 * (x * x - y * y))
            })
            .collect();
        let tgt: Vec<Vec3> = (0..800)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize()
            })
            .collect();
        let mut corrs: Vec<_> = (0..100).map(|i| Correspondence::new(src[i * 7], tgt[i * 5])).collect();
        annotate_normals(&mut corrs, &src.clone().into(), &tgt.clone().into(), 20).unwrap();
        for c in &corrs {
            let ns = c.source_normal.unwrap();
            let nt = c.target_normal.unwrap();
            assert!((ns - oracle_normal(&src, &c.source, 20)).norm() < 1e-9);
            assert!((nt - oracle_normal(&tgt, &c.target, 20)).norm() < 1e-9);
        }
    }

    #[test]
    fn rotated_neighborhood_rotates_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let pts: Vec<Vec3> = (0..20)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.1..0.1),
                    )
                })
                .collect();
            let r: Rotation = axis_angle_matrix(
                Vec3::new(rng.random_range(-1.0..1.0), 1.0, rng.random_range(-1.0..1.0)),
                rng.random_range(0.0..3.0),
            );
            let rotated: Vec<Vec3> = pts.iter().map(|p| r * p).collect();
            let n = normal_from_neighborhood(&pts).unwrap();
            let nr = normal_from_neighborhood(&rotated).unwrap();
            let expect = r * n;
            assert!((nr - expect).norm() < 1e-6 || (nr + expect).norm() < 1e-6);
        }
    }

    #[test]
    fn eigen_decomposition_reconstructs_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let pts: Vec<Vec3> = (0..20)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                .collect();
            let c = covariance(&pts);
            let eig = SymmetricEigen::new(c);
            let rebuilt = eig.recompose();
            assert!((rebuilt - c).abs().max() < 1e-9);
        }
    }
}
