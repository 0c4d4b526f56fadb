use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{contract, Error, Result};
use crate::likelihoods::ThetaVector;
use crate::task::THETA_DIM;

/// Slots compared in test-retest analysis: timing means, span thresholds
/// and accuracy probabilities.
pub const PRIMARY_SLOTS: [usize; 8] = [0, 2, 4, 6, 8, 9, 10, 11];

/// Output range per parameter kind used to normalize errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputRanges {
    pub timing_mean: (f64, f64),
    pub timing_sd: (f64, f64),
    pub span_threshold: (f64, f64),
    pub span_spread: (f64, f64),
    pub probability: (f64, f64),
}

impl Default for OutputRanges {
    fn default() -> Self {
        Self {
            timing_mean: (5.5, 8.0),
            timing_sd: (0.0, 1.0),
            span_threshold: (-10.0, 0.0),
            span_spread: (0.0, 5.0),
            probability: (0.0, 1.0),
        }
    }
}

impl OutputRanges {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.timing_mean, self.timing_sd, self.span_threshold, self.span_spread, self.probability] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(contract(format!("invalid output range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn width(&self, slot: usize) -> f64 {
        let (lo, hi) = match slot {
            0 | 2 => self.timing_mean,
            1 | 3 => self.timing_sd,
            4 | 6 => self.span_threshold,
            5 | 7 => self.span_spread,
            _ => self.probability,
        };
        hi - lo
    }

    pub fn widths(&self) -> [f64; THETA_DIM] {
        std::array::from_fn(|j| self.width(j))
    }

    /// `|a − b| / range` per slot.
    pub fn normalized_error(&self, a: &ThetaVector, b: &ThetaVector) -> [f64; THETA_DIM] {
        std::array::from_fn(|j| (a.0[j] - b.0[j]).abs() / self.width(j))
    }

    /// Sum of the normalized errors over all slots.
    pub fn summed_error(&self, a: &ThetaVector, b: &ThetaVector) -> f64 {
        self.normalized_error(a, b).iter().sum()
    }
}

/// Cohort error: `Σ_j sqrt(mean_i (a_ij − b_ij)²) / range_j`.
pub fn cohort_rmse(estimates: &[ThetaVector], truth: &[ThetaVector], ranges: &OutputRanges) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(contract(format!("{} estimates vs {} references", estimates.len(), truth.len())));
    }
    let n = estimates.len() as f64;
    Ok((0..THETA_DIM)
        .map(|j| {
            let ms = estimates.iter().zip(truth).map(|(a, b)| (a.0[j] - b.0[j]).powi(2)).sum::<f64>() / n;
            ms.sqrt() / ranges.width(j)
        })
        .sum())
}

/// Per-participant traces of normalized error against each participant's
/// final estimate, plus the cohort summed RMSE at every item count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Item count (1-based) of each point.
    pub item_counts: Vec<usize>,
    /// `traces[i][t][j]`: participant i, point t, slot j.
    pub traces: Vec<Vec<[f64; THETA_DIM]>>,
    pub summed_rmse: Vec<f64>,
}

/// Builds a convergence report from estimate paths. `paths[i][t]` is the
/// estimate of participant i after `first_count + t` items; the final entry
/// of each path is the reference.
pub fn convergence_report(paths: &[Vec<ThetaVector>], first_count: usize, ranges: &OutputRanges) -> Result<ConvergenceReport> {
    let len = paths.first().map_or(0, Vec::len);
    if len < 2 || paths.iter().any(|p| p.len() != len) {
        return Err(contract("convergence paths need equal length of at least 2"));
    }
    let traces: Vec<Vec<[f64; THETA_DIM]>> = paths
        .iter()
        .map(|p| {
            let last = p[len - 1];
            p.iter().map(|e| ranges.normalized_error(e, &last)).collect()
        })
        .collect();
    let finals: Vec<ThetaVector> = paths.iter().map(|p| p[len - 1]).collect();
    let summed_rmse = (0..len)
        .map(|t| {
            let at: Vec<ThetaVector> = paths.iter().map(|p| p[t]).collect();
            cohort_rmse(&at, &finals, ranges)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport { item_counts: (first_count..first_count + len).collect(), traces, summed_rmse })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation. Returns 1 for identical inputs even when constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::InsufficientData(format!("{} paired values, need at least 3", a.len())));
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { Ok(1.0) } else { Err(Error::Numeric("correlation of a constant series".into())) };
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Two-way random-effects, absolute-agreement, single-rater ICC(2,1) for an
/// `n × k` table (rows are subjects, columns are raters or sessions).
pub fn icc_2_1(table: &[Vec<f64>]) -> Result<f64> {
    let n = table.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} subjects, need at least 3")));
    }
    let k = table[0].len();
    if k < 2 || table.iter().any(|r| r.len() != k) {
        return Err(contract("ICC table needs at least 2 columns and equal row lengths"));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = table.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = table.iter().map(|r| mean(r)).collect();
    let col_means: Vec<f64> = (0..k).map(|c| table.iter().map(|r| r[c]).sum::<f64>() / nf).collect();
    let ssr = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ssc = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let sst = table.iter().flatten().map(|v| (v - grand).powi(2)).sum::<f64>();
    let sse = sst - ssr - ssc;
    let msr = ssr / (nf - 1.0);
    let msc = ssc / (kf - 1.0);
    let mse = sse / ((nf - 1.0) * (kf - 1.0));
    let denom = msr + (kf - 1.0) * mse + kf * (msc - mse) / nf;
    if sst == 0.0 {
        return Ok(1.0);
    }
    if denom <= 0.0 {
        return Err(Error::Numeric("degenerate ICC denominator".into()));
    }
    Ok(((msr - mse) / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotCorrelation {
    pub slot: usize,
    pub pearson: f64,
    pub icc: f64,
}

/// Paired Pearson and ICC(2,1) per primary slot between two runs over the
/// same participants (matched by position).
pub fn test_retest(a: &[ThetaVector], b: &[ThetaVector]) -> Result<Vec<SlotCorrelation>> {
    if a.len() != b.len() {
        return Err(contract(format!("run sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::InsufficientData(format!("{} participants, need at least 3", a.len())));
    }
    PRIMARY_SLOTS
        .iter()
        .map(|&slot| {
            let xa: Vec<f64> = a.iter().map(|t| t.0[slot]).collect();
            let xb: Vec<f64> = b.iter().map(|t| t.0[slot]).collect();
            let table: Vec<Vec<f64>> = xa.iter().zip(&xb).map(|(x, y)| vec![*x, *y]).collect();
            Ok(SlotCorrelation { slot, pearson: pearson(&xa, &xb)?, icc: icc_2_1(&table)? })
        })
        .collect()
}

/// One-sided paired sign test of "a < b". Ties are dropped. Returns
/// `(wins, losses, p)` where p = P(Bin(n, 1/2) ≥ wins).
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<(usize, usize, f64)> {
    if a.len() != b.len() {
        return Err(contract(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = wins + losses;
    if n == 0 {
        return Ok((0, 0, 1.0));
    }
    let bin = Binomial::new(0.5, n as u64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = if wins == 0 { 1.0 } else { bin.sf(wins as u64 - 1) };
    Ok((wins, losses, p))
}
