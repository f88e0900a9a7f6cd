//! Global/local RANSAC interaction with the four-condition termination system
//! and weighted-SVD finalization.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{residual, rotation_geodesic_angle, weighted_kabsch, Correspondence, RigidTransform};
use crate::histogram::Histogram;
use crate::knn::{PointCloud, SpatialIndex};
use crate::local_sets::{
    ahs_filter, build_angle_histogram, build_line_vectors, lvlp_filter, LineVector, RetainedRange,
};
use crate::normals::{estimate_normal, DEFAULT_K_NORMALS};
use crate::par;
use crate::solver::{estimate_local_transform, GncConfig};
use crate::sus::{apply_sus, LocalSets, SigmaMode, SigmaSource, SusDecision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Inlier residual threshold T_r.
    pub residual_threshold: f64,
    pub confidence_target: f64,
    /// Maximal number of interaction rounds.
    pub r_max: usize,
    /// Percentage of the local line-vector set drawn once per local run.
    pub alpha_pct: f64,
    /// Percentage of that subset drawn for every local hypothesis.
    pub beta_pct: f64,
    /// Rotation tolerance (radians) of the local early-termination test.
    pub rotation_term_tol: f64,
    /// Translation tolerance of the local early-termination test and GNC bound τ.
    pub noise_bound: f64,
    pub rng_seed: u64,
    pub max_local_iterations: usize,
    pub k_normals: usize,
    pub gnc_mu_update_factor: f64,
    pub gnc_max_iterations: usize,
    pub gnc_convergence_tol: f64,
    /// Angle-histogram and length-preservation filters for the initial local sets.
    pub ahs_lvlp: bool,
    /// Probabilistic self-update of the local sets between rounds.
    pub sus: bool,
    pub sigma_mode: SigmaMode,
    pub final_weighting: FinalWeighting,
}

/// How round weights enter the final weighted SVD; see [`final_svd_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalWeighting {
    Accumulated,
    #[default]
    FinalInliers,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            residual_threshold: 0.01,
            confidence_target: 0.995,
            r_max: 5,
            alpha_pct: 10.0,
            beta_pct: 30.0,
            rotation_term_tol: 0.01,
            noise_bound: 0.05,
            rng_seed: 0,
            max_local_iterations: 10_000,
            k_normals: DEFAULT_K_NORMALS,
            gnc_mu_update_factor: 1.4,
            gnc_max_iterations: 100,
            gnc_convergence_tol: 1e-6,
            ahs_lvlp: true,
            sus: true,
            sigma_mode: SigmaMode::PerEval,
            final_weighting: FinalWeighting::FinalInliers,
        }
    }
}

impl RansacConfig {
    pub fn gnc(&self) -> GncConfig {
        GncConfig {
            noise_bound: self.noise_bound,
            mu_update_factor: self.gnc_mu_update_factor,
            max_iterations: self.gnc_max_iterations,
            convergence_tol: self.gnc_convergence_tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pct_ok = |p: f64| p > 0.0 && p <= 100.0;
        let ok = self.residual_threshold > 0.0
            && self.confidence_target > 0.0
            && self.confidence_target <= 1.0
            && self.r_max > 0
            && pct_ok(self.alpha_pct)
            && pct_ok(self.beta_pct)
            && self.rotation_term_tol > 0.0
            && self.max_local_iterations > 0
            && self.k_normals > 0;
        if !ok {
            return Err(Error::InvalidConfig(format!("{self:?}")));
        }
        self.gnc().validate()
    }
}

/// `1 − (1 − rate)^iterations`; zero iterations give zero confidence.
pub fn confidence_level(inlier_rate: f64, iterations: u64) -> f64 {
    if iterations == 0 {
        return 0.0;
    }
    let rate = inlier_rate.clamp(0.0, 1.0);
    (1.0 - (1.0 - rate).powf(iterations as f64)).clamp(0.0, 1.0)
}

/// Indices whose residual is strictly below `threshold`.
pub fn compute_inliers(t: &RigidTransform, corrs: &[Correspondence], threshold: f64) -> Vec<usize> {
    par::filter_indices(corrs.len(), |i| residual(t, &corrs[i]) < threshold)
}

fn count_inliers_among(t: &RigidTransform, corrs: &[Correspondence], members: &[usize], threshold: f64) -> usize {
    members.iter().filter(|&&i| residual(t, &corrs[i]) < threshold).count()
}

/// Rotation within `rotation_term_tol` and translation within `noise_bound`.
pub fn local_early_termination(global: &RigidTransform, local: &RigidTransform, cfg: &RansacConfig) -> bool {
    rotation_geodesic_angle(&global.rotation, &local.rotation) <= cfg.rotation_term_tol
        && (global.translation - local.translation).norm() <= cfg.noise_bound
}

/// Sample size `max(2, round(pct/100·n))`, capped at `n`.
pub fn subset_size(n: usize, pct: f64) -> usize {
    (((pct / 100.0) * n as f64).round() as usize).max(2).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalBranch {
    /// Local estimate matched the received global one; iterations inherited.
    EarlyTermination,
    /// Local confidence reached the target.
    Confidence,
    /// Iteration safety cap reached.
    SafetyCap,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub transform: RigidTransform,
    /// Iteration count reported back to the global scope.
    pub t_lcl: u64,
    /// Hypotheses actually estimated in this run.
    pub hypotheses: u64,
    pub branch: LocalBranch,
    pub local_inliers: usize,
}

/// One local RANSAC run over the local line-vector set.
///
/// `local_members` indexes the local correspondence set inside `corrs`.
pub fn run_lcl_ransac<R: Rng + ?Sized>(
    l_sul: &[LineVector],
    corrs: &[Correspondence],
    local_members: &[usize],
    received_glo: &RigidTransform,
    t_glo: u64,
    cfg: &RansacConfig,
    rng: &mut R,
) -> Result<LocalOutcome> {
    if l_sul.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "local line-vector set has {} vectors, need at least 2",
            l_sul.len()
        )));
    }
    if local_members.is_empty() {
        return Err(Error::DegenerateInput("local correspondence set is empty".into()));
    }
    let gnc = cfg.gnc();
    let sub_size = subset_size(l_sul.len(), cfg.alpha_pct);
    let subset: Vec<LineVector> = sample(rng, l_sul.len(), sub_size)
        .into_iter()
        .map(|k| l_sul[k])
        .collect();
    let basic_size = subset_size(subset.len(), cfg.beta_pct);

    let mut best: Option<(RigidTransform, usize)> = None;
    let mut t_lcl: u64 = 0;
    let mut attempts = 0usize;
    while attempts < cfg.max_local_iterations {
        attempts += 1;
        let basic: Vec<LineVector> = sample(rng, subset.len(), basic_size)
            .into_iter()
            .map(|k| subset[k])
            .collect();
        let (estimate, local_count) = match estimate_from_basic(&basic, corrs, received_glo, &gnc) {
            Ok(t) => (t, count_inliers_among(&t, corrs, local_members, cfg.residual_threshold)),
            Err(Error::DegenerateInput(_)) => continue,
            Err(e) => return Err(e),
        };
        t_lcl += 1;
        if best.as_ref().is_none_or(|(_, c)| local_count > *c) {
            best = Some((estimate, local_count));
        }
        let (best_t, best_count) = best.expect("set above");
        if local_early_termination(received_glo, &estimate, cfg) {
            return Ok(LocalOutcome {
                transform: best_t,
                t_lcl: t_glo + t_lcl,
                hypotheses: t_lcl,
                branch: LocalBranch::EarlyTermination,
                local_inliers: best_count,
            });
        }
        let rate = best_count as f64 / local_members.len() as f64;
        if confidence_level(rate, t_lcl) >= cfg.confidence_target {
            return Ok(LocalOutcome {
                transform: best_t,
                t_lcl,
                hypotheses: t_lcl,
                branch: LocalBranch::Confidence,
                local_inliers: best_count,
            });
        }
    }
    match best {
        Some((transform, local_inliers)) => Ok(LocalOutcome {
            transform,
            t_lcl,
            hypotheses: t_lcl,
            branch: LocalBranch::SafetyCap,
            local_inliers,
        }),
        None => Err(Error::DegenerateInput(format!(
            "no well-posed basic line-vector sample in {} attempts",
            cfg.max_local_iterations
        ))),
    }
}

/// Rotation from the basic set; translation from the endpoints of the basic
/// vectors that the robust rotation accepted (all endpoints if none were).
fn estimate_from_basic(
    basic: &[LineVector],
    corrs: &[Correspondence],
    initial: &RigidTransform,
    gnc: &GncConfig,
) -> Result<RigidTransform> {
    let report = crate::solver::estimate_rotation_gnc(basic, &initial.rotation, gnc)?;
    let inliers = report.inlier_indices();
    let chosen: Vec<&LineVector> = if inliers.is_empty() {
        basic.iter().collect()
    } else {
        inliers.iter().map(|&k| &basic[k]).collect()
    };
    let mut endpoints: Vec<usize> = chosen.iter().flat_map(|l| [l.i, l.j]).collect();
    endpoints.sort_unstable();
    endpoints.dedup();
    let local_corrs: Vec<Correspondence> = endpoints.iter().map(|&k| corrs[k].clone()).collect();
    let translation = crate::solver::estimate_translation(&local_corrs, &report.rotation)?;
    Ok(RigidTransform::new(report.rotation, translation))
}

/// Convenience wrapper matching [`estimate_local_transform`] for callers that
/// already hold the translation correspondences.
pub fn estimate_local(
    basic: &[LineVector],
    local_corrs: &[Correspondence],
    initial: &RigidTransform,
    cfg: &RansacConfig,
) -> Result<RigidTransform> {
    estimate_local_transform(basic, local_corrs, initial, &cfg.gnc()).map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub t_glo: u64,
    pub t_lcl: u64,
    pub global_inliers: usize,
    pub global_confidence: f64,
    pub local_correspondences: usize,
    pub local_line_vectors: usize,
    pub branch: LocalBranch,
    /// Whether the round ended by incrementing weights and updating the local sets.
    pub continued: bool,
    #[serde(skip)]
    pub global_inlier_indices: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub angle_histogram: Option<Histogram>,
    pub ratio_histogram: Option<Histogram>,
    pub retained_range: Option<RetainedRange>,
    /// Correspondences without usable normals, skipped by the angle filter.
    pub normal_failures: Vec<usize>,
    /// The angle filter left nothing (or could not run) and the full set was used.
    pub ahs_fallback: bool,
    pub initial_local_correspondences: usize,
    pub initial_line_vectors: usize,
    pub skipped_line_vectors: usize,
    /// Local sets were rebuilt because the line-vector set dropped below two.
    pub local_resets: usize,
    pub sus_rounds: Vec<Vec<SusDecision>>,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub rounds: usize,
    pub total_iterations: u64,
    pub final_confidence: f64,
    pub inlier_indices: Vec<usize>,
    pub per_round_trace: Vec<RoundTrace>,
    /// Per-correspondence round weights used by the final weighted SVD.
    pub weights: Vec<u32>,
    pub diagnostics: Diagnostics,
}

/// Full pipeline: endpoint normals (when the angle filter is on), local set
/// construction, interaction rounds, weighted SVD.
pub fn run_registration(
    corrs: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    cfg: &RansacConfig,
) -> Result<RegistrationResult> {
    let mut corrs = corrs.to_vec();
    let mut normal_failures = Vec::new();
    if cfg.ahs_lvlp
        && corrs
            .iter()
            .any(|c| c.source_normal.is_none() || c.target_normal.is_none())
    {
        normal_failures = annotate_normals_lenient(&mut corrs, source, target, cfg.k_normals)?;
    }
    let mut result = register_correspondences(corrs, cfg)?;
    result.diagnostics.normal_failures = normal_failures;
    Ok(result)
}

/// Estimates endpoint normals; correspondences whose neighborhood is
/// degenerate are left without normals and returned.
fn annotate_normals_lenient(
    corrs: &mut [Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    k: usize,
) -> Result<Vec<usize>> {
    let (src, tgt) = match (SpatialIndex::build(source), SpatialIndex::build(target)) {
        (Ok(s), Ok(t)) => (s, t),
        _ => return Ok((0..corrs.len()).collect()),
    };
    let normals = par::map(corrs, |c| {
        Some((
            estimate_normal(&src, &c.source, k).ok()?,
            estimate_normal(&tgt, &c.target, k).ok()?,
        ))
    });
    let mut failures = Vec::new();
    for (i, (c, n)) in corrs.iter_mut().zip(normals).enumerate() {
        match n {
            Some((ns, nt)) => {
                c.source_normal = Some(ns);
                c.target_normal = Some(nt);
            }
            None => failures.push(i),
        }
    }
    Ok(failures)
}

struct InitialSets {
    local: LocalSets,
    range: RetainedRange,
}

fn initial_local_sets(corrs: &[Correspondence], cfg: &RansacConfig, diag: &mut Diagnostics) -> Result<InitialSets> {
    let all: Vec<usize> = (0..corrs.len()).collect();
    if !cfg.ahs_lvlp {
        let build = build_line_vectors(corrs, &all)?;
        diag.skipped_line_vectors = build.skipped;
        return Ok(InitialSets {
            local: LocalSets::new(all, build.vectors),
            range: RetainedRange::UNBOUNDED,
        });
    }

    // angle filter over correspondences that carry normals
    let with_normals: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| corrs[i].source_normal.is_some() && corrs[i].target_normal.is_some())
        .collect();
    let subset: Vec<Correspondence> = with_normals.iter().map(|&i| corrs[i].clone()).collect();
    let members = match build_angle_histogram(&subset) {
        Ok(hist) => {
            let kept = ahs_filter(&hist).map(|k| k.into_iter().map(|p| with_normals[p]).collect::<Vec<_>>());
            diag.angle_histogram = Some(hist);
            kept.ok()
        }
        Err(_) => None,
    };
    let members = match members {
        Some(m) if m.len() >= 2 => m,
        _ => {
            diag.ahs_fallback = true;
            all
        }
    };

    let build = build_line_vectors(corrs, &members)?;
    diag.skipped_line_vectors = build.skipped;
    if build.vectors.is_empty() {
        return Ok(InitialSets {
            local: LocalSets::new(members, Vec::new()),
            range: RetainedRange::UNBOUNDED,
        });
    }
    let lvlp = lvlp_filter(&build.vectors)?;
    diag.ratio_histogram = lvlp.histogram;
    diag.retained_range = Some(lvlp.range);
    Ok(InitialSets {
        local: LocalSets::new(members, lvlp.kept),
        range: lvlp.range,
    })
}

/// Runs the interaction rounds on correspondences whose normals (if the angle
/// filter is enabled) are already set.
pub fn register_correspondences(mut corrs: Vec<Correspondence>, cfg: &RansacConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    if corrs.len() < 3 {
        return Err(Error::TooFewCorrespondences {
            needed: 3,
            got: corrs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut diag = Diagnostics::default();
    let n = corrs.len();
    let tr = cfg.residual_threshold;

    let InitialSets { mut local, mut range } = initial_local_sets(&corrs, cfg, &mut diag)?;
    diag.initial_local_correspondences = local.members.len();
    diag.initial_line_vectors = local.line_vectors.len();

    let mut weights = vec![0u32; n];
    let mut round = 0usize;
    let mut t_glo: u64 = 0;
    let mut t_glo_best = RigidTransform::identity();
    let mut best_count = compute_inliers(&t_glo_best, &corrs, tr).len();
    let mut trace = Vec::new();
    let mut ir_glo: Vec<usize>;
    let mut cl_glo;

    loop {
        if local.line_vectors.len() < 2 {
            reset_local_sets(&corrs, &mut local, &mut range)?;
            diag.local_resets += 1;
        }
        let outcome = run_lcl_ransac(
            &local.line_vectors,
            &corrs,
            &local.members,
            &t_glo_best,
            t_glo,
            cfg,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::DegenerateInput(msg) => Error::DegenerateInput(format!("round {round}: {msg}")),
            other => other,
        })?;

        let candidate = compute_inliers(&outcome.transform, &corrs, tr).len();
        if candidate > best_count {
            best_count = candidate;
            t_glo_best = outcome.transform;
        }
        t_glo += outcome.t_lcl;
        for c in corrs.iter_mut() {
            let r = residual(&t_glo_best, c);
            c.push_residual(r);
        }
        ir_glo = (0..n)
            .filter(|&i| corrs[i].curr_residual.is_some_and(|r| r < tr))
            .collect();
        cl_glo = confidence_level(ir_glo.len() as f64 / n as f64, t_glo);

        let stop = cl_glo >= cfg.confidence_target || round >= cfg.r_max;
        trace.push(RoundTrace {
            round,
            t_glo,
            t_lcl: outcome.t_lcl,
            global_inliers: ir_glo.len(),
            global_confidence: cl_glo,
            local_correspondences: local.members.len(),
            local_line_vectors: local.line_vectors.len(),
            branch: outcome.branch,
            continued: !stop,
            global_inlier_indices: ir_glo.clone(),
        });
        if stop {
            break;
        }
        for &i in &ir_glo {
            weights[i] += 1;
        }
        if cfg.sus {
            let sigma = SigmaSource::new(cfg.sigma_mode, tr, &mut rng);
            let decisions = apply_sus(&corrs, &mut local, &ir_glo, tr, &range, &sigma, &mut rng)?;
            diag.sus_rounds.push(decisions);
        }
        round += 1;
    }

    let final_weights = final_svd_weights(&weights, &ir_glo, cfg.final_weighting);
    let transform = weighted_kabsch(&corrs, &final_weights).map_err(|e| match e {
        Error::DegenerateInput(msg) => Error::DegenerateInput(format!(
            "final weighted SVD after {round} rounds ({} global inliers): {msg}",
            ir_glo.len()
        )),
        other => other,
    })?;
    let inlier_indices = compute_inliers(&transform, &corrs, tr);

    Ok(RegistrationResult {
        transform,
        rounds: round,
        total_iterations: t_glo,
        final_confidence: cl_glo,
        inlier_indices,
        per_round_trace: trace,
        weights,
        diagnostics: diag,
    })
}

/// Weights for the final SVD.
///
/// `Accumulated` uses the round weights as they are, or uniform weights over
/// the final global inliers when no round continued. `FinalInliers` counts the
/// terminating round too and drops correspondences that are outliers under the
/// final incumbent, so inliers of an early wrong incumbent carry no weight.
pub fn final_svd_weights(weights: &[u32], final_inliers: &[usize], mode: FinalWeighting) -> Vec<f64> {
    match mode {
        FinalWeighting::Accumulated if weights.iter().any(|&w| w > 0) => weights.iter().map(|&w| w as f64).collect(),
        FinalWeighting::Accumulated => {
            let mut w = vec![0.0; weights.len()];
            for &i in final_inliers {
                w[i] = 1.0;
            }
            w
        }
        FinalWeighting::FinalInliers => {
            let mut w = vec![0.0; weights.len()];
            for &i in final_inliers {
                w[i] = weights[i] as f64 + 1.0;
            }
            w
        }
    }
}

/// Falls back to all pairs over the local members, then over the full set.
fn reset_local_sets(corrs: &[Correspondence], local: &mut LocalSets, range: &mut RetainedRange) -> Result<()> {
    if local.members.len() >= 3 {
        if let Ok(b) = build_line_vectors(corrs, &local.members) {
            if b.vectors.len() >= 2 {
                local.line_vectors = b.vectors;
                *range = RetainedRange::UNBOUNDED;
                return Ok(());
            }
        }
    }
    let all: Vec<usize> = (0..corrs.len()).collect();
    let b = build_line_vectors(corrs, &all)?;
    if b.vectors.len() < 2 {
        return Err(Error::DegenerateInput(
            "fewer than two non-degenerate line vectors in the full correspondence set".into(),
        ));
    }
    *local = LocalSets::new(all, b.vectors);
    *range = RetainedRange::UNBOUNDED;
    Ok(())
}
