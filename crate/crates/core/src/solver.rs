//! Local transform estimation from line vectors: graduated non-convexity over a
//! truncated-least-squares loss for rotation, per-axis median for translation.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_from_cross_covariance, Correspondence, RigidTransform, Rotation, Vec3};
use crate::local_sets::LineVector;

/// Relative eigenvalue floor for "all source directions parallel".
const PARALLEL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GncConfig {
    /// Residual bound τ (scene units).
    pub noise_bound: f64,
    pub mu_update_factor: f64,
    pub max_iterations: usize,
    /// Stop once no weight moves by more than this.
    pub convergence_tol: f64,
}

impl Default for GncConfig {
    fn default() -> Self {
        Self {
            noise_bound: 0.05,
            mu_update_factor: 1.4,
            max_iterations: 100,
            convergence_tol: 1e-6,
        }
    }
}

impl GncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_bound > 0.0)
            || !(self.mu_update_factor > 1.0)
            || self.max_iterations == 0
            || !(self.convergence_tol > 0.0)
        {
            return Err(Error::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GncReport {
    pub rotation: Rotation,
    /// Final TLS weights, one per input vector, each in `[0, 1]`.
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// TLS objective of every accepted iterate, in order.
    pub objective_trace: Vec<f64>,
    /// Smallest and largest weight seen at any iteration.
    pub weight_bounds: (f64, f64),
}

impl GncReport {
    /// Indices whose final weight marks them as inliers.
    pub fn inlier_indices(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.5)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `Σ min(‖R·a − b‖², τ²)`.
pub fn tls_objective(lvs: &[LineVector], rotation: &Rotation, noise_bound: f64) -> f64 {
    let cap = noise_bound * noise_bound;
    lvs.iter()
        .map(|l| (rotation * l.v_source - l.v_target).norm_squared().min(cap))
        .sum()
}

fn weighted_rotation(lvs: &[LineVector], weights: &[f64]) -> Result<Rotation> {
    let mut h = Matrix3::zeros();
    for (l, &w) in lvs.iter().zip(weights) {
        if w > 0.0 {
            h += w * l.v_source * l.v_target.transpose();
        }
    }
    rotation_from_cross_covariance(&h)
}

fn check_not_parallel(lvs: &[LineVector]) -> Result<()> {
    if lvs.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "rotation estimation needs at least 2 line vectors, got {}",
            lvs.len()
        )));
    }
    let mut scatter = Matrix3::zeros();
    for l in lvs {
        let d = l.v_source.normalize();
        scatter += d * d.transpose();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[1] <= PARALLEL_TOL * ev[0] {
        return Err(Error::DegenerateInput("all source line vectors are parallel".into()));
    }
    Ok(())
}

/// TLS weight for squared residual `r2` at continuation parameter `mu`.
fn tls_weight(r2: f64, mu: f64, noise2: f64) -> f64 {
    let upper = (mu + 1.0) / mu * noise2;
    let lower = mu / (mu + 1.0) * noise2;
    if r2 >= upper {
        0.0
    } else if r2 <= lower {
        1.0
    } else {
        ((noise2 * mu * (mu + 1.0) / r2).sqrt() - mu).clamp(0.0, 1.0)
    }
}

/// Robust rotation aligning `v_source` onto `v_target`, started from `initial`.
///
/// The returned rotation is the iterate with the lowest TLS objective; it is a
/// proper rotation whether or not the continuation converged.
pub fn estimate_rotation_gnc(lvs: &[LineVector], initial: &Rotation, cfg: &GncConfig) -> Result<GncReport> {
    check_not_parallel(lvs)?;
    let noise2 = cfg.noise_bound * cfg.noise_bound;
    let sq_residuals = |r: &Rotation| -> Vec<f64> {
        lvs.iter()
            .map(|l| (r * l.v_source - l.v_target).norm_squared())
            .collect()
    };

    let mut rotation = *initial;
    let mut r2 = sq_residuals(&rotation);
    let mut best_rotation = rotation;
    let mut best_objective = tls_objective(lvs, &rotation, cfg.noise_bound);
    let mut objective_trace = vec![best_objective];
    let mut weights = vec![1.0; lvs.len()];
    let mut weight_bounds = (1.0f64, 1.0f64);

    let max_r2 = r2.iter().copied().fold(0.0, f64::max);
    if 2.0 * max_r2 <= noise2 {
        // every residual already inside the bound: plain least squares
        let r = weighted_rotation(lvs, &weights)?;
        let obj = tls_objective(lvs, &r, cfg.noise_bound);
        if obj <= best_objective {
            best_rotation = r;
            objective_trace.push(obj);
        }
        return Ok(GncReport {
            rotation: best_rotation,
            weights,
            iterations: 1,
            converged: true,
            objective_trace,
            weight_bounds,
        });
    }
    let mut mu = 1.0 / (2.0 * max_r2 / noise2 - 1.0);

    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut max_change = 0.0f64;
        for (w, &r) in weights.iter_mut().zip(&r2) {
            let nw = tls_weight(r, mu, noise2);
            max_change = max_change.max((nw - *w).abs());
            *w = nw;
            weight_bounds.0 = weight_bounds.0.min(nw);
            weight_bounds.1 = weight_bounds.1.max(nw);
        }
        rotation = match weighted_rotation(lvs, &weights) {
            Ok(r) => r,
            // too few vectors kept weight to pin a rotation
            Err(_) => break,
        };
        r2 = sq_residuals(&rotation);
        let obj = tls_objective(lvs, &rotation, cfg.noise_bound);
        if obj <= best_objective {
            best_objective = obj;
            best_rotation = rotation;
            objective_trace.push(obj);
        }
        if iterations > 1 && max_change < cfg.convergence_tol {
            converged = true;
            break;
        }
        mu *= cfg.mu_update_factor;
    }

    // report binary inlier weights for the returned rotation
    let final_r2 = sq_residuals(&best_rotation);
    let final_weights = final_r2.iter().map(|&r| if r <= noise2 { 1.0 } else { 0.0 }).collect();
    Ok(GncReport {
        rotation: best_rotation,
        weights: final_weights,
        iterations,
        converged,
        objective_trace,
        weight_bounds,
    })
}

/// Median of a non-empty slice; even counts average the two middle values.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Component-wise median of `y − R·x` over the correspondences.
pub fn estimate_translation(corrs: &[Correspondence], rotation: &Rotation) -> Result<Vec3> {
    if corrs.is_empty() {
        return Err(Error::DegenerateInput(
            "translation estimation needs at least one correspondence".into(),
        ));
    }
    let diffs: Vec<Vec3> = corrs.iter().map(|c| c.target - rotation * c.source).collect();
    let mut out = Vec3::zeros();
    let mut axis = vec![0.0; diffs.len()];
    for k in 0..3 {
        for (a, d) in axis.iter_mut().zip(&diffs) {
            *a = d[k];
        }
        out[k] = median(&mut axis);
    }
    Ok(out)
}

/// Rotation from the basic line-vector set, translation from `local_corrs`.
pub fn estimate_local_transform(
    basic: &[LineVector],
    local_corrs: &[Correspondence],
    initial: &RigidTransform,
    cfg: &GncConfig,
) -> Result<(RigidTransform, GncReport)> {
    let report = estimate_rotation_gnc(basic, &initial.rotation, cfg)?;
    let translation = estimate_translation(local_corrs, &report.rotation)?;
    Ok((RigidTransform::new(report.rotation, translation), report))
}
