//! Probabilistic self-update of the local correspondence and line-vector sets.
//!
//! After each interaction round, global inliers that are not yet local may be
//! admitted and local members that fell out of the global inlier set may be
//! evicted. Both decisions compare a gamma-distribution inlier probability
//! against a randomly drawn threshold `n/100`, `n ∈ [1, 100]`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::geometry::Correspondence;
use crate::local_sets::{LineVector, RetainedRange};

/// Survival function of a chi distribution with 3 degrees of freedom scaled by
/// `sigma`: `1 − γ(3/2, r²/2σ²)/Γ(3/2)`.
pub fn true_inlier_probability(r: f64, sigma: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    let x = r * r / (2.0 * sigma * sigma);
    regularized_upper_gamma_3_2(x)
}

/// `Q(3/2, x) = erfc(√x) + 2·√(x/π)·e^{−x}`.
pub fn regularized_upper_gamma_3_2(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if !x.is_finite() {
        return 0.0;
    }
    let q = erfc(x.sqrt()) + 2.0 * (x / PI).sqrt() * (-x).exp();
    q.clamp(0.0, 1.0)
}

/// Uniform `n/100` with `n` drawn from `1..=100`.
pub fn draw_mersenne_threshold<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    mersenne_threshold(rng.random_range(1..=100u32))
}

pub fn mersenne_threshold(n: u32) -> f64 {
    n as f64 / 100.0
}

/// How the noise scale σ of the inlier probability is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// Fresh σ ~ U(0, T_r] for every probability evaluation.
    #[default]
    PerEval,
    /// One σ ~ U(0, T_r] per update round.
    PerRound,
    /// σ = T_r / 2.
    FixedHalfTr,
}

impl std::str::FromStr for SigmaMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "per-eval" => Ok(Self::PerEval),
            "per-round" => Ok(Self::PerRound),
            "fixed-half-Tr" | "fixed-half-tr" => Ok(Self::FixedHalfTr),
            other => Err(format!("unknown sigma mode `{other}`")),
        }
    }
}

/// Draws σ uniformly from `(0, residual_threshold]`.
pub fn draw_sigma<R: Rng + ?Sized>(rng: &mut R, residual_threshold: f64) -> f64 {
    residual_threshold * (1.0 - rng.random::<f64>())
}

/// Supplies σ values according to a [`SigmaMode`].
#[derive(Debug, Clone, Copy)]
pub struct SigmaSource {
    mode: SigmaMode,
    residual_threshold: f64,
    round_sigma: Option<f64>,
}

impl SigmaSource {
    pub fn new<R: Rng + ?Sized>(mode: SigmaMode, residual_threshold: f64, rng: &mut R) -> Self {
        let round_sigma = match mode {
            SigmaMode::PerRound => Some(draw_sigma(rng, residual_threshold)),
            SigmaMode::FixedHalfTr => Some(residual_threshold / 2.0),
            SigmaMode::PerEval => None,
        };
        Self {
            mode,
            residual_threshold,
            round_sigma,
        }
    }

    /// Always draws: ignores the mode. Handy for tests.
    pub fn fixed(sigma: f64) -> Self {
        Self {
            mode: SigmaMode::FixedHalfTr,
            residual_threshold: 2.0 * sigma,
            round_sigma: Some(sigma),
        }
    }

    pub fn mode(&self) -> SigmaMode {
        self.mode
    }

    pub fn sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.round_sigma {
            Some(s) => s,
            None => draw_sigma(rng, self.residual_threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SusAction {
    Include,
    Remove,
    Keep,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SusRule {
    Rule1,
    Rule2,
    Rule3,
    AlwaysOutlier,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SusDecision {
    pub correspondence_index: usize,
    pub action: SusAction,
    pub probability: Option<f64>,
    pub threshold_drawn: Option<f64>,
    pub rule_applied: SusRule,
}

impl SusDecision {
    fn plain(index: usize, action: SusAction, rule: SusRule) -> Self {
        Self {
            correspondence_index: index,
            action,
            probability: None,
            threshold_drawn: None,
            rule_applied: rule,
        }
    }
}

/// Decision for a correspondence that may be admitted into the local set.
pub fn classify_inclusion<R: Rng + ?Sized>(
    index: usize,
    c: &Correspondence,
    in_ir_glo: bool,
    in_c_sul: bool,
    residual_threshold: f64,
    sigma: &SigmaSource,
    rng: &mut R,
) -> Result<SusDecision> {
    if !(in_ir_glo && !in_c_sul) {
        return Ok(SusDecision::plain(index, SusAction::Keep, SusRule::NotApplicable));
    }
    let curr = c.curr_residual.ok_or(Error::MissingResidual(index))?;
    let prev_inlier = c.prev_residual.is_some_and(|p| p < residual_threshold);
    if prev_inlier && curr < residual_threshold {
        return Ok(SusDecision {
            correspondence_index: index,
            action: SusAction::Include,
            probability: Some(1.0),
            threshold_drawn: None,
            rule_applied: SusRule::Rule1,
        });
    }
    if curr >= residual_threshold {
        // not actually an inlier under the current transform
        return Ok(SusDecision::plain(index, SusAction::Keep, SusRule::NotApplicable));
    }
    let p = true_inlier_probability(curr, sigma.sigma(rng));
    let threshold = draw_mersenne_threshold(rng);
    Ok(SusDecision {
        correspondence_index: index,
        action: if p > threshold {
            SusAction::Include
        } else {
            SusAction::Skip
        },
        probability: Some(p),
        threshold_drawn: Some(threshold),
        rule_applied: SusRule::Rule2,
    })
}

/// Decision for a local member that is not a global inlier.
pub fn classify_removal<R: Rng + ?Sized>(
    index: usize,
    c: &Correspondence,
    in_ir_glo: bool,
    in_c_sul: bool,
    residual_threshold: f64,
    sigma: &SigmaSource,
    rng: &mut R,
) -> Result<SusDecision> {
    if !(in_c_sul && !in_ir_glo) {
        return Ok(SusDecision::plain(index, SusAction::Keep, SusRule::NotApplicable));
    }
    let curr = c.curr_residual.ok_or(Error::MissingResidual(index))?;
    // without history the member is given the benefit of the doubt
    let prev_outlier = c.prev_residual.is_some_and(|p| p >= residual_threshold);
    if prev_outlier && curr >= residual_threshold {
        return Ok(SusDecision::plain(index, SusAction::Remove, SusRule::AlwaysOutlier));
    }
    if curr < residual_threshold {
        return Ok(SusDecision::plain(index, SusAction::Keep, SusRule::NotApplicable));
    }
    let p = true_inlier_probability(curr, sigma.sigma(rng));
    let threshold = draw_mersenne_threshold(rng);
    Ok(SusDecision {
        correspondence_index: index,
        action: if 1.0 - p > threshold {
            SusAction::Remove
        } else {
            SusAction::Keep
        },
        probability: Some(p),
        threshold_drawn: Some(threshold),
        rule_applied: SusRule::Rule3,
    })
}

/// Local correspondence and line-vector sets kept consistent with each other.
#[derive(Debug, Clone, Default)]
pub struct LocalSets {
    /// Indices into the full correspondence set, ascending.
    pub members: Vec<usize>,
    pub line_vectors: Vec<LineVector>,
}

impl LocalSets {
    pub fn new(members: Vec<usize>, line_vectors: Vec<LineVector>) -> Self {
        let mut members = members;
        members.sort_unstable();
        members.dedup();
        Self { members, line_vectors }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.binary_search(&index).is_ok()
    }

    /// Removes `index` and every line vector touching it.
    pub fn remove(&mut self, index: usize) -> bool {
        match self.members.binary_search(&index) {
            Ok(pos) => {
                self.members.remove(pos);
                self.line_vectors.retain(|l| !l.touches(index));
                true
            }
            Err(_) => false,
        }
    }

    /// Adds `index`, pairing it with every current member whose scale ratio
    /// falls inside `range`. Returns the number of new line vectors.
    pub fn include(&mut self, index: usize, corrs: &[Correspondence], range: &RetainedRange) -> usize {
        let pos = match self.members.binary_search(&index) {
            Ok(_) => return 0,
            Err(pos) => pos,
        };
        let before = self.line_vectors.len();
        for &m in &self.members {
            if let Some(lv) = LineVector::between(corrs, m, index) {
                if range.contains(lv.scale_ratio) {
                    self.line_vectors.push(lv);
                }
            }
        }
        self.members.insert(pos, index);
        self.line_vectors.len() - before
    }
}

/// Applies one self-update round. Removals are evaluated and applied before
/// inclusions; within each phase correspondences are visited in ascending
/// index order so RNG consumption is reproducible.
pub fn apply_sus<R: Rng + ?Sized>(
    corrs: &[Correspondence],
    local: &mut LocalSets,
    ir_glo: &[usize],
    residual_threshold: f64,
    range: &RetainedRange,
    sigma: &SigmaSource,
    rng: &mut R,
) -> Result<Vec<SusDecision>> {
    let global: BTreeSet<usize> = ir_glo.iter().copied().collect();
    let mut decisions = Vec::new();

    let removal_candidates: Vec<usize> = local.members.iter().copied().filter(|i| !global.contains(i)).collect();
    let mut to_remove = Vec::new();
    for i in removal_candidates {
        let d = classify_removal(i, &corrs[i], false, true, residual_threshold, sigma, rng)?;
        if d.action == SusAction::Remove {
            to_remove.push(i);
        }
        decisions.push(d);
    }
    for i in to_remove {
        local.remove(i);
    }

    let inclusion_candidates: Vec<usize> = global.iter().copied().filter(|&i| !local.contains(i)).collect();
    for i in inclusion_candidates {
        let d = classify_inclusion(i, &corrs[i], true, false, residual_threshold, sigma, rng)?;
        if d.action == SusAction::Include {
            local.include(i, corrs, range);
        }
        decisions.push(d);
    }
    Ok(decisions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TR: f64 = 0.01;

    fn corr(prev: Option<f64>, curr: Option<f64>) -> Correspondence {
        Correspondence {
            prev_residual: prev,
            curr_residual: curr,
            ..Default::default()
        }
    }

    #[test]
    fn probability_examples() {
        assert_eq!(true_inlier_probability(0.0, 0.3), 1.0);
        // P(χ²₃ > 1)
        assert!((true_inlier_probability(0.02, 0.02) - 0.801_251_7).abs() < 1e-6);
        assert!(true_inlier_probability(10.0, 1.0) < 1e-15);
        assert!(true_inlier_probability(8.0, 1.0) < 1e-12);
    }

    #[test]
    fn threshold_grid() {
        assert_eq!(mersenne_threshold(20), 0.2);
        assert_eq!(mersenne_threshold(1), 0.01);
        assert_eq!(mersenne_threshold(100), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 101];
        for _ in 0..20_000 {
            let p = draw_mersenne_threshold(&mut rng);
            let n = (p * 100.0).round() as usize;
            assert!((1..=100).contains(&n) && (p - n as f64 / 100.0).abs() < 1e-15);
            seen[n] = true;
        }
        assert!(seen[1..].iter().all(|&s| s));
    }

    #[test]
    fn sigma_is_in_half_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let s = draw_sigma(&mut rng, TR);
            assert!(s > 0.0 && s <= TR);
        }
    }

    #[test]
    fn rule1_includes_without_drawing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let before = rng.clone();
        let sigma = SigmaSource::fixed(TR / 2.0);
        let d = classify_inclusion(
            0,
            &corr(Some(0.4 * TR), Some(0.3 * TR)),
            true,
            false,
            TR,
            &sigma,
            &mut rng,
        )
        .unwrap();
        assert_eq!((d.action, d.rule_applied), (SusAction::Include, SusRule::Rule1));
        assert_eq!(rng, before);
    }

    #[test]
    fn rule2_near_zero_residual_almost_always_included() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = SigmaSource::fixed(TR / 2.0);
        let c = corr(Some(2.0 * TR), Some(1e-9));
        let included = (0..10_000)
            .filter(|_| {
                classify_inclusion(0, &c, true, false, TR, &sigma, &mut rng)
                    .unwrap()
                    .action
                    == SusAction::Include
            })
            .count();
        // p just below 1 beats every threshold except 1.00
        let rate = included as f64 / 1e4;
        assert!((rate - 0.99).abs() < 3.0 * (0.99f64 * 0.01 / 1e4).sqrt());
    }

    #[test]
    fn rule2_tiny_probability_never_included() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // σ small enough that P < 0.01 at r = 0.99·T_r
        let sigma = SigmaSource::fixed(TR / 5.0);
        let c = corr(Some(2.0 * TR), Some(0.99 * TR));
        assert!(true_inlier_probability(0.99 * TR, TR / 5.0) < 0.01);
        for _ in 0..2000 {
            let d = classify_inclusion(0, &c, true, false, TR, &sigma, &mut rng).unwrap();
            assert_eq!((d.action, d.rule_applied), (SusAction::Skip, SusRule::Rule2));
            assert!(d.probability.is_some() && d.threshold_drawn.is_some());
        }
    }

    #[test]
    fn first_round_inclusion_takes_probabilistic_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = classify_inclusion(
            0,
            &corr(None, Some(0.5 * TR)),
            true,
            false,
            TR,
            &SigmaSource::fixed(TR),
            &mut rng,
        )
        .unwrap();
        assert_eq!(d.rule_applied, SusRule::Rule2);
    }

    #[test]
    fn not_applicable_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = SigmaSource::fixed(TR);
        let c = corr(Some(0.0), Some(0.0));
        for (g, l) in [(false, false), (true, true), (false, true)] {
            let d = classify_inclusion(0, &c, g, l, TR, &s, &mut rng).unwrap();
            assert_eq!((d.action, d.rule_applied), (SusAction::Keep, SusRule::NotApplicable));
        }
        for (g, l) in [(false, false), (true, true), (true, false)] {
            let d = classify_removal(0, &c, g, l, TR, &s, &mut rng).unwrap();
            assert_eq!((d.action, d.rule_applied), (SusAction::Keep, SusRule::NotApplicable));
        }
        assert!(matches!(
            classify_inclusion(7, &corr(None, None), true, false, TR, &s, &mut rng),
            Err(Error::MissingResidual(7))
        ));
        assert!(matches!(
            classify_removal(8, &corr(None, None), false, true, TR, &s, &mut rng),
            Err(Error::MissingResidual(8))
        ));
    }

    #[test]
    fn removal_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = SigmaSource::fixed(TR / 2.0);
        let d = classify_removal(0, &corr(Some(3.0 * TR), Some(2.0 * TR)), false, true, TR, &s, &mut rng).unwrap();
        assert_eq!((d.action, d.rule_applied), (SusAction::Remove, SusRule::AlwaysOutlier));

        let far = corr(Some(0.5 * TR), Some(1e3));
        let removed = (0..1000)
            .filter(|_| classify_removal(0, &far, false, true, TR, &s, &mut rng).unwrap().action == SusAction::Remove)
            .count();
        assert!(removed >= 990);

        // σ near T_r: barely-outlier residual keeps P high, so 1 − P < 0.01
        let s_big = SigmaSource::fixed(TR);
        let near = corr(Some(0.5 * TR), Some(TR));
        assert!(1.0 - true_inlier_probability(TR, TR) > 0.01);
        let s_huge = SigmaSource::fixed(10.0 * TR);
        assert!(1.0 - true_inlier_probability(TR, 10.0 * TR) < 0.01);
        for _ in 0..1000 {
            let d = classify_removal(0, &near, false, true, TR, &s_huge, &mut rng).unwrap();
            assert_eq!((d.action, d.rule_applied), (SusAction::Keep, SusRule::Rule3));
        }
        let d = classify_removal(0, &near, false, true, TR, &s_big, &mut rng).unwrap();
        assert_eq!(d.rule_applied, SusRule::Rule3);

        // no history: probabilistic path, never unconditional
        let d = classify_removal(0, &corr(None, Some(5.0 * TR)), false, true, TR, &s, &mut rng).unwrap();
        assert_eq!(d.rule_applied, SusRule::Rule3);
    }

    #[test]
    fn rule2_inclusion_frequency_matches_threshold_mass() {
        // P fixed by a fixed σ; inclusion happens iff P > n/100
        let sigma = TR / 2.0;
        let r = 0.6 * TR;
        let p = true_inlier_probability(r, sigma);
        let q = (1..=100).filter(|&n| p > n as f64 / 100.0).count() as f64 / 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = corr(Some(2.0 * TR), Some(r));
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| {
                classify_inclusion(0, &c, true, false, TR, &SigmaSource::fixed(sigma), &mut rng)
                    .unwrap()
                    .action
                    == SusAction::Include
            })
            .count();
        let freq = hits as f64 / trials as f64;
        let se = (q * (1.0 - q) / trials as f64).sqrt();
        assert!((freq - q).abs() <= 3.0 * se, "freq {freq}, q {q}");
    }

    fn grid_corrs(n: usize) -> Vec<Correspondence> {
        (0..n)
            .map(|k| {
                let x = Vec3::new(k as f64, (k * k % 7) as f64, (k % 3) as f64);
                Correspondence::new(x, x * 1.0)
            })
            .collect()
    }

    #[test]
    fn fixed_point_when_local_equals_global() {
        let corrs: Vec<_> = grid_corrs(6)
            .into_iter()
            .map(|mut c| {
                c.push_residual(0.0);
                c
            })
            .collect();
        let members: Vec<usize> = (0..6).collect();
        let lvs = crate::local_sets::build_line_vectors(&corrs, &members).unwrap().vectors;
        let mut local = LocalSets::new(members.clone(), lvs.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = apply_sus(
            &corrs,
            &mut local,
            &members,
            TR,
            &RetainedRange::UNBOUNDED,
            &SigmaSource::fixed(TR),
            &mut rng,
        )
        .unwrap();
        assert!(ds.is_empty());
        assert_eq!(local.members, members);
        assert_eq!(local.line_vectors, lvs);
    }

    #[test]
    fn include_and_remove_counts() {
        let mut corrs = grid_corrs(8);
        for c in corrs.iter_mut() {
            c.push_residual(0.0);
            c.push_residual(0.0);
        }
        // correspondence 7 is a two-round global inlier outside the local set
        let members: Vec<usize> = (0..7).collect();
        let lvs = crate::local_sets::build_line_vectors(&corrs, &members).unwrap().vectors;
        let mut local = LocalSets::new(members.clone(), lvs.clone());
        let all: Vec<usize> = (0..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ds = apply_sus(
            &corrs,
            &mut local,
            &all,
            TR,
            &RetainedRange::UNBOUNDED,
            &SigmaSource::fixed(TR),
            &mut rng,
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(local.members.len(), 8);
        assert!(local.line_vectors.len() - lvs.len() <= 7);

        // now 3 becomes an always-outlier
        corrs[3].push_residual(1.0);
        corrs[3].push_residual(1.0);
        let ir: Vec<usize> = all.iter().copied().filter(|&i| i != 3).collect();
        apply_sus(
            &corrs,
            &mut local,
            &ir,
            TR,
            &RetainedRange::UNBOUNDED,
            &SigmaSource::fixed(TR),
            &mut rng,
        )
        .unwrap();
        assert!(!local.contains(3));
        assert!(local.line_vectors.iter().all(|l| !l.touches(3)));
        assert_eq!(local.line_vectors.len(), 7 * 6 / 2);
    }
}
