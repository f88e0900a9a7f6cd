//! Construction of the initial local correspondence set (angle-histogram
//! filter) and local line-vector set (length-preservation filter).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{Correspondence, Vec3};
use crate::histogram::{checked_bin_count, mean_std, scotts_bin_width, Histogram};
use crate::par;

/// Difference vectors between the endpoints of correspondences `i < j`
/// (indices into the full correspondence set).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineVector {
    pub i: usize,
    pub j: usize,
    pub v_source: Vec3,
    pub v_target: Vec3,
    pub scale_ratio: f64,
}

impl LineVector {
    /// `None` when either difference vector has zero length.
    pub fn between(corrs: &[Correspondence], i: usize, j: usize) -> Option<Self> {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        let v_source = corrs[i].source - corrs[j].source;
        let v_target = corrs[i].target - corrs[j].target;
        let (ns, nt) = (v_source.norm(), v_target.norm());
        if ns == 0.0 || nt == 0.0 {
            return None;
        }
        Some(Self {
            i,
            j,
            v_source,
            v_target,
            scale_ratio: ns / nt,
        })
    }

    pub fn touches(&self, k: usize) -> bool {
        self.i == k || self.j == k
    }
}

/// Scale-ratio interval kept by the length-preservation filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetainedRange {
    pub low: f64,
    pub high: f64,
}

impl RetainedRange {
    /// Accepts every finite ratio.
    pub const UNBOUNDED: RetainedRange = RetainedRange {
        low: 0.0,
        high: f64::INFINITY,
    };

    /// Half-open `[low, high)`, or the single point when `low == high`.
    pub fn contains(&self, ratio: f64) -> bool {
        ratio >= self.low && (ratio < self.high || (self.low == self.high && ratio == self.high))
    }
}

/// Angle between the two endpoint normals of a correspondence.
pub fn correspondence_angle(c: &Correspondence) -> Option<f64> {
    let (nx, ny) = (c.source_normal?, c.target_normal?);
    Some(nx.dot(&ny).clamp(-1.0, 1.0).acos())
}

pub fn correspondence_angles(corrs: &[Correspondence]) -> Result<Vec<f64>> {
    corrs
        .iter()
        .enumerate()
        .map(|(i, c)| correspondence_angle(c).ok_or(Error::MissingNormals(i)))
        .collect()
}

/// Histogram of normal angles over `[0, π)` with Scott's bin width and
/// `⌈π/w⌉` bins; an angle of exactly π lands in the last bin.
pub fn build_angle_histogram(corrs: &[Correspondence]) -> Result<Histogram> {
    let angles = correspondence_angles(corrs)?;
    let w = scotts_bin_width(&angles)?;
    let n_bins = checked_bin_count(PI, w)?;
    let mut hist = Histogram::empty(0.0, w, n_bins);
    for (i, a) in angles.into_iter().enumerate() {
        hist.insert_clamped(i, a);
    }
    Ok(hist)
}

/// Frequency threshold: mean plus population standard deviation of the bin counts.
pub fn frequency_threshold(hist: &Histogram) -> f64 {
    let counts: Vec<f64> = hist.counts.iter().map(|&c| c as f64).collect();
    let (mu, sigma) = mean_std(&counts);
    mu + sigma
}

/// Indices (ascending) of all items in bins whose count strictly exceeds the
/// frequency threshold.
pub fn ahs_filter(hist: &Histogram) -> Result<Vec<usize>> {
    let tf = frequency_threshold(hist);
    let mut kept: Vec<usize> = hist
        .counts
        .iter()
        .zip(&hist.bin_members)
        .filter(|(&c, _)| c as f64 > tf)
        .flat_map(|(_, m)| m.iter().copied())
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyResult);
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Fraction of items removed by a filter.
pub fn reduction_ratio(before: usize, after: usize) -> f64 {
    if before == 0 {
        return 0.0;
    }
    (before - after.min(before)) as f64 / before as f64
}

#[derive(Debug, Clone, Default)]
pub struct LineVectorBuild {
    pub vectors: Vec<LineVector>,
    /// Pairs dropped for a zero-length source or target difference.
    pub skipped: usize,
}

/// All pairs `(members[a], members[b])`, `a < b`, in lexicographic order.
/// `members` must be ascending.
pub fn build_line_vectors(corrs: &[Correspondence], members: &[usize]) -> Result<LineVectorBuild> {
    if members.len() < 2 {
        return Err(Error::TooFewCorrespondences {
            needed: 2,
            got: members.len(),
        });
    }
    let rows = par::map_range(members.len(), |a| {
        let mut row = Vec::with_capacity(members.len() - a - 1);
        let mut skipped = 0;
        for &j in &members[a + 1..] {
            match LineVector::between(corrs, members[a], j) {
                Some(lv) => row.push(lv),
                None => skipped += 1,
            }
        }
        (row, skipped)
    });
    let mut out = LineVectorBuild::default();
    for (row, skipped) in rows {
        out.vectors.extend(row);
        out.skipped += skipped;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LvlpOutcome {
    pub kept: Vec<LineVector>,
    pub range: RetainedRange,
    /// Scale-ratio histogram; absent when all ratios coincide.
    pub histogram: Option<Histogram>,
}

/// Keeps line vectors whose scale ratio falls in the most populated bin of the
/// scale-ratio histogram or its immediate neighbors.
pub fn lvlp_filter(lvs: &[LineVector]) -> Result<LvlpOutcome> {
    if lvs.is_empty() {
        return Err(Error::TooFewCorrespondences { needed: 1, got: 0 });
    }
    let ratios: Vec<f64> = lvs.iter().map(|l| l.scale_ratio).collect();
    let lower = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = scotts_bin_width(&ratios).and_then(|w| Ok((w, checked_bin_count(upper - lower, w)?)));
    let (w, n_bins) = match bins {
        Ok((w, _)) => (w, ((upper - lower) / w).floor() as usize + 1),
        Err(Error::DegenerateDistribution(_)) => {
            // no usable spread: keep everything within the observed span
            let range = if lower == upper {
                RetainedRange {
                    low: lower,
                    high: lower,
                }
            } else {
                RetainedRange {
                    low: lower,
                    high: upper.next_up(),
                }
            };
            return Ok(LvlpOutcome {
                kept: lvs.to_vec(),
                range,
                histogram: None,
            });
        }
        Err(e) => return Err(e),
    };
    let mut hist = Histogram::empty(lower, w, n_bins);
    for (i, r) in ratios.iter().enumerate() {
        hist.insert_clamped(i, *r);
    }
    let peak = hist.max_bin();
    let first = peak.saturating_sub(1);
    let last = (peak + 1).min(n_bins - 1);
    let range = RetainedRange {
        low: hist.bin_range(first).0,
        high: hist.bin_range(last).1,
    };
    let kept = lvs.iter().filter(|l| range.contains(l.scale_ratio)).copied().collect();
    Ok(LvlpOutcome {
        kept,
        range,
        histogram: Some(hist),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn with_angle(theta: f64) -> Correspondence {
        Correspondence::new(Vec3::zeros(), Vec3::zeros())
            .with_normals(Vec3::z(), Vec3::new(theta.sin(), 0.0, theta.cos()))
    }

    fn lv_with_ratio(k: usize, ratio: f64) -> LineVector {
        LineVector {
            i: k,
            j: k + 1,
            v_source: Vec3::x() * ratio,
            v_target: Vec3::x(),
            scale_ratio: ratio,
        }
    }

    #[test]
    fn angle_examples() {
        let c = |a: Vec3, b: Vec3| Correspondence::default().with_normals(a, b);
        assert_eq!(correspondence_angle(&c(Vec3::z(), Vec3::z())), Some(0.0));
        assert!((correspondence_angle(&c(Vec3::x(), Vec3::y())).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((correspondence_angle(&c(Vec3::z(), -Vec3::z())).unwrap() - PI).abs() < 1e-15);
        assert_eq!(correspondence_angle(&Correspondence::default()), None);
        assert!(matches!(
            build_angle_histogram(&[Correspondence::default(), Correspondence::default()]),
            Err(Error::MissingNormals(0))
        ));
    }

    #[test]
    fn bin_count_for_known_width() {
        assert_eq!((PI / 0.1745f64).ceil() as usize, 19);
        // angles 0 and 2·0.1745·… alternate so the Scott width is 0.1745
        let corrs: Vec<_> = (0..1000)
            .map(|i| with_angle(if i % 2 == 0 { 1.0 } else { 2.0 }))
            .collect();
        let h = build_angle_histogram(&corrs).unwrap();
        assert!((h.bin_width - 0.1745).abs() < 1e-9);
        assert_eq!(h.n_bins(), 19);
    }

    #[test]
    fn wide_bins_collapse_to_one() {
        let h = build_angle_histogram(&[with_angle(0.0), with_angle(PI)]).unwrap();
        assert!(h.bin_width >= PI);
        assert_eq!(h.n_bins(), 1);
        assert_eq!(h.counts, vec![2]);
    }

    #[test]
    fn angle_histogram_matches_brute_force_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let angles: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..PI)).collect();
        let corrs: Vec<_> = angles.iter().map(|&a| with_angle(a)).collect();
        let h = build_angle_histogram(&corrs).unwrap();
        // recompute the angles the same way the filter sees them
        let seen = correspondence_angles(&corrs).unwrap();
        let mut expected = vec![0usize; h.n_bins()];
        for a in seen {
            let mut b = 0;
            while b + 1 < h.n_bins() && a >= (b + 1) as f64 * h.bin_width {
                b += 1;
            }
            expected[b] += 1;
        }
        assert_eq!(h.counts, expected);
        assert_eq!(h.total(), 1000);
    }

    #[test]
    fn ahs_uniform_histogram_is_empty() {
        let mut h = Histogram::empty(0.0, 1.0, 4);
        for i in 0..8 {
            h.insert_clamped(i, (i % 4) as f64 + 0.5);
        }
        assert!(matches!(ahs_filter(&h), Err(Error::EmptyResult)));
    }

    #[test]
    fn ahs_keeps_dominant_bin() {
        let mut h = Histogram::empty(0.0, 1.0, 10);
        let mut idx = 0;
        for _ in 0..90 {
            h.insert_clamped(idx, 3.5);
            idx += 1;
        }
        for b in [0, 1, 2, 4, 5, 6, 7, 8, 9, 9] {
            h.insert_clamped(idx, b as f64 + 0.5);
            idx += 1;
        }
        assert_eq!(ahs_filter(&h).unwrap(), (0..90).collect::<Vec<_>>());
        // threshold computed independently
        let counts = [1.0, 1.0, 1.0, 90.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0];
        let mu = counts.iter().sum::<f64>() / 10.0;
        let sd = (counts.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / 10.0).sqrt();
        assert!((frequency_threshold(&h) - (mu + sd)).abs() < 1e-12);
    }

    #[test]
    fn reduction_ratio_bookkeeping() {
        assert!((reduction_ratio(9248, 3428) - 0.6293).abs() < 5e-5);
    }

    #[test]
    fn line_vector_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corrs: Vec<_> = (0..100)
            .map(|_| {
                Correspondence::new(
                    Vec3::new(rng.random(), rng.random(), rng.random()),
                    Vec3::new(rng.random(), rng.random(), rng.random()),
                )
            })
            .collect();
        let members: Vec<usize> = (0..100).collect();
        assert_eq!(build_line_vectors(&corrs, &members[..3]).unwrap().vectors.len(), 3);
        let all = build_line_vectors(&corrs, &members).unwrap();
        assert_eq!(all.vectors.len(), 4950);
        assert!(all.vectors.windows(2).all(|w| (w[0].i, w[0].j) < (w[1].i, w[1].j)));
        assert!(build_line_vectors(&corrs, &members[..1]).is_err());
    }

    #[test]
    fn coincident_targets_are_skipped() {
        let corrs = vec![
            Correspondence::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)),
            Correspondence::new(Vec3::x(), Vec3::new(1.0, 1.0, 1.0)),
            Correspondence::new(Vec3::y(), Vec3::zeros()),
        ];
        let b = build_line_vectors(&corrs, &[0, 1, 2]).unwrap();
        assert_eq!(b.vectors.len(), 2);
        assert_eq!(b.skipped, 1);
        assert!(b.vectors.iter().all(|l| (l.i, l.j) != (0, 1)));
    }

    #[test]
    fn lvlp_degenerate_keeps_everything() {
        let lvs: Vec<_> = (0..5).map(|k| lv_with_ratio(k, 1.0)).collect();
        let out = lvlp_filter(&lvs).unwrap();
        assert_eq!(out.kept.len(), 5);
        assert_eq!(out.range, RetainedRange { low: 1.0, high: 1.0 });
        assert!(out.range.contains(1.0) && !out.range.contains(1.0 + 1e-12));
    }

    #[test]
    fn lvlp_three_clusters() {
        let mut lvs = Vec::new();
        for k in 0..10 {
            lvs.push(lv_with_ratio(k, 0.5));
        }
        for k in 10..90 {
            lvs.push(lv_with_ratio(k, 1.0));
        }
        for k in 90..100 {
            lvs.push(lv_with_ratio(k, 2.0));
        }
        // μ = 1.05, σ = 0.35, w = 3.49·0.35/∛100 ≈ 0.2632: clusters fall in bins 0, 1, 5
        let w = 3.49 * 0.35 / 100f64.cbrt();
        assert_eq!(((1.0 - 0.5) / w).floor() as usize, 1);
        assert_eq!(((2.0 - 0.5) / w).floor() as usize, 5);
        let out = lvlp_filter(&lvs).unwrap();
        assert!((out.histogram.as_ref().unwrap().bin_width - w).abs() < 1e-12);
        // peak bin 1 plus neighbors 0 and 2
        assert_eq!(out.kept.len(), 90);
        assert!(out.kept.iter().all(|l| l.scale_ratio < 1.5));
        assert!((out.range.low - 0.5).abs() < 1e-12);
        assert!((out.range.high - (0.5 + 3.0 * w)).abs() < 1e-12);
    }

    #[test]
    fn lvlp_peak_at_first_bin_has_no_left_neighbor() {
        let mut lvs: Vec<_> = (0..50).map(|k| lv_with_ratio(k, 1.0)).collect();
        lvs.extend((50..60).map(|k| lv_with_ratio(k, 1.0 + (k - 49) as f64)));
        let out = lvlp_filter(&lvs).unwrap();
        let h = out.histogram.unwrap();
        assert_eq!(h.max_bin(), 0);
        assert_eq!(out.range.low, h.bin_range(0).0);
        assert_eq!(out.range.high, h.bin_range(1).1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn histogram_is_permutation_invariant(
                angles in prop::collection::vec(0.0f64..PI, 2..200),
                seed in any::<u64>(),
            ) {
                prop_assume!(angles.iter().any(|a| (a - angles[0]).abs() > 1e-9));
                let corrs: Vec<_> = angles.iter().map(|&a| with_angle(a)).collect();
                let mut perm: Vec<usize> = (0..corrs.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..perm.len()).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let shuffled: Vec<_> = perm.iter().map(|&i| corrs[i].clone()).collect();
                let h1 = build_angle_histogram(&corrs).unwrap();
                let h2 = build_angle_histogram(&shuffled).unwrap();
                prop_assert_eq!(h1.n_bins(), h2.n_bins());
                prop_assert_eq!(&h1.counts, &h2.counts);
                for (m1, m2) in h1.bin_members.iter().zip(&h2.bin_members) {
                    let mut a = m1.clone();
                    let mut b: Vec<usize> = m2.iter().map(|&k| perm[k]).collect();
                    a.sort_unstable();
                    b.sort_unstable();
                    prop_assert_eq!(a, b);
                }
            }

            #[test]
            fn ahs_output_is_qualified_subset(angles in prop::collection::vec(0.0f64..PI, 2..300)) {
                prop_assume!(angles.iter().any(|a| (a - angles[0]).abs() > 1e-9));
                let corrs: Vec<_> = angles.iter().map(|&a| with_angle(a)).collect();
                let h = build_angle_histogram(&corrs).unwrap();
                let tf = frequency_threshold(&h);
                if let Ok(kept) = ahs_filter(&h) {
                    for k in kept {
                        prop_assert!(k < corrs.len());
                        let b = h.bin_members.iter().position(|m| m.contains(&k)).unwrap();
                        prop_assert!(h.counts[b] as f64 > tf);
                    }
                }
            }

            #[test]
            fn line_vector_count_is_pairs_minus_skipped(
                pts in prop::collection::vec((0u8..4, 0u8..4), 2..40),
            ) {
                // small integer grid forces coincident points
                let corrs: Vec<_> = pts
                    .iter()
                    .map(|&(a, b)| Correspondence::new(
                        Vec3::new(a as f64, 0.0, 0.0),
                        Vec3::new(0.0, b as f64, 0.0),
                    ))
                    .collect();
                let members: Vec<usize> = (0..corrs.len()).collect();
                let b = build_line_vectors(&corrs, &members).unwrap();
                let n = corrs.len();
                prop_assert_eq!(b.vectors.len() + b.skipped, n * (n - 1) / 2);
                let zero = (0..n)
                    .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                    .filter(|&(i, j)| pts[i].0 == pts[j].0 || pts[i].1 == pts[j].1)
                    .count();
                prop_assert_eq!(b.skipped, zero);
            }
        }
    }
}
