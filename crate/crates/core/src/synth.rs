//! Synthetic source/target pairs with known transform and inlier labels.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{residual, Correspondence, RigidTransform, Vec3};
use crate::knn::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceModel {
    /// Surfaces of a few random ellipsoids.
    RandomBlobs,
    /// A few randomly oriented rectangular patches.
    MultiPlane,
}

impl std::str::FromStr for SurfaceModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-blobs" => Ok(Self::RandomBlobs),
            "multi-plane" => Ok(Self::MultiPlane),
            _ => Err(Error::InvalidConfig(format!(
                "unknown surface model {s:?} (expected random-blobs or multi-plane)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_points: usize,
    pub n_correspondences: usize,
    pub outlier_rate: f64,
    pub noise_sigma: f64,
    pub rotation_magnitude_deg: f64,
    pub translation_magnitude: f64,
    pub scene_extent: f64,
    pub surface_model: SurfaceModel,
    /// Inlier labels use this threshold; outliers are kept at least 3× beyond it.
    pub residual_threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_points: 1000,
            n_correspondences: 500,
            outlier_rate: 0.5,
            noise_sigma: 0.003,
            rotation_magnitude_deg: 30.0,
            translation_magnitude: 0.3,
            scene_extent: 1.0,
            surface_model: SurfaceModel::RandomBlobs,
            residual_threshold: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_points == 0 || self.n_correspondences == 0 {
            return bad("n_points and n_correspondences must be positive");
        }
        if self.n_correspondences > self.n_points {
            return bad("n_correspondences must not exceed n_points");
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return bad("outlier_rate must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0) || !(self.translation_magnitude >= 0.0) {
            return bad("noise_sigma and translation_magnitude must be non-negative");
        }
        if !(0.0..=180.0).contains(&self.rotation_magnitude_deg) {
            return bad("rotation_magnitude_deg must lie in [0, 180]");
        }
        if !(self.residual_threshold > 0.0) || !(self.scene_extent >= 10.0 * self.residual_threshold) {
            return bad("scene_extent must be at least 10 residual thresholds");
        }
        Ok(())
    }

    pub fn n_inliers(&self) -> usize {
        let n_out = (self.outlier_rate * self.n_correspondences as f64).round() as usize;
        self.n_correspondences - n_out.min(self.n_correspondences)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub correspondences: Vec<Correspondence>,
    /// `(source index, target index)` of every correspondence.
    pub pairs: Vec<(usize, usize)>,
    pub gt: RigidTransform,
    /// Ascending indices into `correspondences`.
    pub true_inliers: Vec<usize>,
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn sample_surface<R: Rng + ?Sized>(rng: &mut R, model: SurfaceModel, n: usize, extent: f64) -> Vec<Vec3> {
    let half = extent / 2.0;
    match model {
        SurfaceModel::RandomBlobs => {
            let n_blobs = rng.random_range(3..=6);
            let blobs: Vec<(Vec3, Vec3)> = (0..n_blobs)
                .map(|_| {
                    let radii = Vec3::from_fn(|_, _| rng.random_range(0.1..0.25) * extent);
                    let center = Vec3::from_fn(|k, _| rng.random_range(-half + radii[k]..half - radii[k]));
                    (center, radii)
                })
                .collect();
            (0..n)
                .map(|_| {
                    let (c, r) = blobs[rng.random_range(0..blobs.len())];
                    c + unit_vector(rng).component_mul(&r)
                })
                .collect()
        }
        SurfaceModel::MultiPlane => {
            let n_planes = rng.random_range(3..=5);
            let planes: Vec<(Vec3, Vec3, Vec3, f64, f64)> = (0..n_planes)
                .map(|_| {
                    let normal = unit_vector(rng);
                    let u = normal.cross(&unit_vector(rng)).normalize();
                    let v = normal.cross(&u);
                    let (a, b) = (
                        rng.random_range(0.2..0.35) * extent,
                        rng.random_range(0.2..0.35) * extent,
                    );
                    let reach = a + b;
                    let center =
                        Vec3::from_fn(|_, _| rng.random_range(-(half - reach).max(0.0)..=(half - reach).max(0.0)));
                    (center, u, v, a, b)
                })
                .collect();
            (0..n)
                .map(|_| {
                    let (c, u, v, a, b) = planes[rng.random_range(0..planes.len())];
                    c + u * rng.random_range(-a..a) + v * rng.random_range(-b..b)
                })
                .collect()
        }
    }
}

/// Transform rotating by exactly `angle_deg` about a uniform axis and
/// translating by exactly `translation` in a uniform direction.
pub fn random_transform<R: Rng + ?Sized>(rng: &mut R, angle_deg: f64, translation: f64) -> RigidTransform {
    let axis = unit_vector(rng);
    RigidTransform::from_axis_angle(axis, angle_deg.to_radians().min(PI), unit_vector(rng) * translation)
}

const MAX_OUTLIER_DRAWS: usize = 1_000_000;

pub fn synthesize_pair(spec: &SyntheticSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tr = spec.residual_threshold;
    let source_pts = sample_surface(&mut rng, spec.surface_model, spec.n_points, spec.scene_extent);
    let gt = random_transform(&mut rng, spec.rotation_magnitude_deg, spec.translation_magnitude);

    let n_in = spec.n_inliers();
    let inlier_points: Vec<usize> = sample(&mut rng, spec.n_points, n_in).into_vec();
    let mut truncated = vec![false; spec.n_points];
    for &i in &inlier_points {
        truncated[i] = true;
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let target_pts: Vec<Vec3> = source_pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut n = Vec3::from_fn(|_, _| noise.sample(&mut rng));
            if truncated[i] {
                // inlier endpoints keep their noise inside the threshold so labels are exact
                let mut tries = 0;
                while n.norm() >= tr && tries < 64 {
                    n = Vec3::from_fn(|_, _| noise.sample(&mut rng));
                    tries += 1;
                }
                if n.norm() >= tr {
                    n *= 0.5 * tr / n.norm();
                }
            }
            gt.apply(p) + n
        })
        .collect();

    let mut pairs: Vec<(usize, usize, bool)> = inlier_points.iter().map(|&i| (i, i, true)).collect();
    for _ in n_in..spec.n_correspondences {
        let mut draws = 0;
        loop {
            let (i, j) = (rng.random_range(0..spec.n_points), rng.random_range(0..spec.n_points));
            if (gt.apply(&source_pts[i]) - target_pts[j]).norm() >= 3.0 * tr {
                pairs.push((i, j, false));
                break;
            }
            draws += 1;
            if draws >= MAX_OUTLIER_DRAWS {
                return Err(Error::DegenerateInput(
                    "could not place an outlier correspondence beyond the residual margin".into(),
                ));
            }
        }
    }
    pairs.shuffle(&mut rng);

    let correspondences: Vec<Correspondence> = pairs
        .iter()
        .map(|&(i, j, _)| Correspondence::new(source_pts[i], target_pts[j]))
        .collect();
    let true_inliers: Vec<usize> = pairs.iter().enumerate().filter_map(|(k, p)| p.2.then_some(k)).collect();
    debug_assert!(true_inliers.iter().all(|&k| residual(&gt, &correspondences[k]) < tr));
    Ok(SyntheticPair {
        source: PointCloud::new(source_pts),
        target: PointCloud::new(target_pts),
        correspondences,
        pairs: pairs.iter().map(|&(i, j, _)| (i, j)).collect(),
        gt,
        true_inliers,
    })
}
