//! Position-bias metrics and association tests.
//!
//! All functions are pure. Distributions with zero total are rejected
//! rather than producing NaN.

mod fisher;
pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PositionDistribution;

pub use fisher::{fisher_one_sided, Alternative, AssociationReport, Table2x2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("expected count per position is {0}, below 1")]
    ExpectedCountTooSmall(f64),
    #[error("degenerate margins in table {0:?}")]
    DegenerateMargins([[u64; 2]; 2]),
    #[error("baseline count is zero")]
    ZeroBaseline,
    #[error("moved count {moved} exceeds baseline {baseline}")]
    MovedExceedsBaseline { moved: u64, baseline: u64 },
    #[error("empty rate list")]
    EmptyRates,
    #[error("rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
}

fn checked_proportions(dist: &PositionDistribution) -> Result<Vec<f64>, MetricsError> {
    if dist.total() == 0 || dist.k() == 0 {
        return Err(MetricsError::EmptyDistribution);
    }
    Ok(dist.proportions())
}

/// Bias score: L1 distance between the position proportions and uniform.
pub fn bsd(dist: &PositionDistribution) -> Result<f64, MetricsError> {
    let p = checked_proportions(dist)?;
    let u = 1.0 / p.len() as f64;
    Ok(p.iter().map(|pi| (pi - u).abs()).sum())
}

/// Standard deviation of the position proportions, normalized by `1/K`.
pub fn rstd(dist: &PositionDistribution) -> Result<f64, MetricsError> {
    let p = checked_proportions(dist)?;
    let k = p.len() as f64;
    let u = 1.0 / k;
    let var = p.iter().map(|pi| (pi - u).powi(2)).sum::<f64>() / k;
    Ok(var.sqrt() / u)
}

/// Chi-square goodness-of-fit result against the uniform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
    /// Expected count per position is below 5.
    pub low_expected: bool,
}

/// Pearson chi-square test of the position counts against uniform.
pub fn chi_square_uniform(dist: &PositionDistribution) -> Result<ChiSquare, MetricsError> {
    if dist.total() == 0 || dist.k() < 2 {
        return Err(MetricsError::EmptyDistribution);
    }
    let k = dist.k();
    let expected = dist.total() as f64 / k as f64;
    if expected < 1.0 {
        return Err(MetricsError::ExpectedCountTooSmall(expected));
    }
    let low_expected = expected < 5.0;
    if low_expected {
        log::warn!("chi-square expected count {expected} is below 5; p-value is approximate");
    }
    let stat: f64 = dist
        .counts
        .iter()
        .map(|&f| (f as f64 - expected).powi(2) / expected)
        .sum();
    let df = k - 1;
    Ok(ChiSquare {
        stat,
        df,
        p_value: special::chi_square_sf(stat, df as f64),
        low_expected,
    })
}

/// All bias metrics for one distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bsd: f64,
    pub rstd: f64,
    pub chi2: f64,
    pub chi2_df: usize,
    pub p_value: f64,
    pub n: u64,
}

impl MetricsReport {
    pub fn compute(dist: &PositionDistribution) -> Result<Self, MetricsError> {
        let chi = chi_square_uniform(dist)?;
        Ok(MetricsReport {
            bsd: bsd(dist)?,
            rstd: rstd(dist)?,
            chi2: chi.stat,
            chi2_df: chi.df,
            p_value: chi.p_value,
            n: dist.total(),
        })
    }
}

/// Fraction of baseline-source items that moved to the target (`src→tgt / baseline src`).
pub fn change_rate(baseline_src_count: u64, moved_to_tgt_count: u64) -> Result<f64, MetricsError> {
    if baseline_src_count == 0 {
        return Err(MetricsError::ZeroBaseline);
    }
    if moved_to_tgt_count > baseline_src_count {
        return Err(MetricsError::MovedExceedsBaseline {
            moved: moved_to_tgt_count,
            baseline: baseline_src_count,
        });
    }
    Ok(moved_to_tgt_count as f64 / baseline_src_count as f64)
}

/// Arithmetic mean of per-position off-target rates.
pub fn mean_off_target_rate(rates: &[f64]) -> Result<f64, MetricsError> {
    if rates.is_empty() {
        return Err(MetricsError::EmptyRates);
    }
    if let Some(&bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(MetricsError::RateOutOfRange(bad));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}
