//! Fixed-width histograms that remember which items landed in each bin.

use crate::error::{Error, Result};

/// Scott's factor for the normal-reference bin width.
pub const SCOTT_FACTOR: f64 = 3.49;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lower_bound: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    pub bin_members: Vec<Vec<usize>>,
}

/// Upper bound on bins; narrower widths mean the values barely spread at all.
pub const MAX_BINS: usize = 1 << 20;

/// Number of bins of width `w` covering `span`, rejecting absurd counts.
pub fn checked_bin_count(span: f64, w: f64) -> Result<usize> {
    let bins = (span / w).ceil();
    if !(bins <= MAX_BINS as f64) {
        return Err(Error::DegenerateDistribution(format!(
            "bin width {w:e} would need {bins:e} bins"
        )));
    }
    Ok((bins as usize).max(1))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `3.49·σ/∛n` with σ the population standard deviation.
pub fn scotts_bin_width(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::DegenerateDistribution(format!(
            "need at least 2 values for a bin width, got {}",
            values.len()
        )));
    }
    let (mean, sigma) = mean_std(values);
    // summation noise leaves a spread of a few ulps on constant input
    if !(sigma > 1e-12 * mean.abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateDistribution(
            "all values identical (zero spread)".into(),
        ));
    }
    Ok(SCOTT_FACTOR * sigma / (values.len() as f64).cbrt())
}

impl Histogram {
    pub fn empty(lower_bound: f64, bin_width: f64, n_bins: usize) -> Self {
        assert!(bin_width > 0.0 && n_bins > 0);
        Self {
            lower_bound,
            bin_width,
            counts: vec![0; n_bins],
            bin_members: vec![Vec::new(); n_bins],
        }
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Raw bin index `⌊(v − lower)/width⌋`, or `None` below the lower bound.
    pub fn raw_bin(&self, value: f64) -> Option<usize> {
        let b = ((value - self.lower_bound) / self.bin_width).floor();
        (b >= 0.0).then_some(b as usize)
    }

    /// Inserts item `index` with `value`; values past the top edge go to the last bin.
    pub fn insert_clamped(&mut self, index: usize, value: f64) {
        let last = self.n_bins() - 1;
        let b = self.raw_bin(value).unwrap_or(0).min(last);
        self.counts[b] += 1;
        self.bin_members[b].push(index);
    }

    /// `[low, high)` edges of bin `b`.
    pub fn bin_range(&self, b: usize) -> (f64, f64) {
        (
            self.lower_bound + b as f64 * self.bin_width,
            self.lower_bound + (b + 1) as f64 * self.bin_width,
        )
    }

    /// Lowest-indexed bin with the maximal count.
    pub fn max_bin(&self) -> usize {
        let mut best = 0;
        for (b, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = b;
            }
        }
        best
    }

    /// CSV with header `bin_low,bin_high,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_range(b);
            out.push_str(&format!("{lo:?},{hi:?},{c}\n"));
        }
        out
    }
}
