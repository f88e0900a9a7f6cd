//! Evaluation metrics against a ground-truth transform and inlier labeling.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_geodesic_angle, RigidTransform, Rotation, Vec3};
use crate::knn::PointCloud;
use crate::solver::median;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub rmse: f64,
    pub mese: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub runtime_seconds: f64,
}

/// Geodesic angle between the two rotations, in degrees.
pub fn rotation_error(r_gt: &Rotation, r_est: &Rotation) -> f64 {
    rotation_geodesic_angle(r_gt, r_est).to_degrees()
}

pub fn translation_error(t_gt: &Vec3, t_est: &Vec3) -> f64 {
    (t_gt - t_est).norm()
}

fn point_errors(source: &PointCloud, gt: &RigidTransform, est: &RigidTransform) -> Result<Vec<f64>> {
    if source.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(source
        .points
        .iter()
        .map(|p| (gt.apply(p) - est.apply(p)).norm())
        .collect())
}

pub fn rmse(source: &PointCloud, gt: &RigidTransform, est: &RigidTransform) -> Result<f64> {
    let errs = point_errors(source, gt, est)?;
    Ok((errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt())
}

pub fn mese(source: &PointCloud, gt: &RigidTransform, est: &RigidTransform) -> Result<f64> {
    let mut errs = point_errors(source, gt, est)?;
    Ok(median(&mut errs))
}

/// Precision, recall and F1 of a predicted inlier set; zero denominators give 0.
pub fn precision_recall_f1(predicted: &[usize], truth: &[usize]) -> (f64, f64, f64) {
    let pred: BTreeSet<usize> = predicted.iter().copied().collect();
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    let tp = pred.intersection(&truth).count() as f64;
    let fp = pred.len() as f64 - tp;
    let fn_ = truth.len() as f64 - tp;
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// All metrics for one registration; `runtime_seconds` is copied through.
pub fn evaluate(
    source: &PointCloud,
    gt: &RigidTransform,
    est: &RigidTransform,
    predicted_inliers: &[usize],
    true_inliers: &[usize],
    runtime_seconds: f64,
) -> Result<MetricsReport> {
    let (precision, recall, f1) = precision_recall_f1(predicted_inliers, true_inliers);
    Ok(MetricsReport {
        rotation_error_deg: rotation_error(&gt.rotation, &est.rotation),
        translation_error: translation_error(&gt.translation, &est.translation),
        rmse: rmse(source, gt, est)?,
        mese: mese(source, gt, est)?,
        precision,
        recall,
        f1,
        runtime_seconds,
    })
}
