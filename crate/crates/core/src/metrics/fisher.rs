//! One-sided Fisher exact test on 2×2 tables.

use serde::{Deserialize, Serialize};

use super::special::ln_factorial;
use super::MetricsError;

/// A 2×2 contingency table `[[a, b], [c, d]]`.
///
/// In first-position comparisons row 0 is the condition hypothesised to
/// raise first-position preference and column 0 counts first-position answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table2x2 {
    pub cells: [[u64; 2]; 2],
}

impl Table2x2 {
    pub fn new(cells: [[u64; 2]; 2]) -> Self {
        Table2x2 { cells }
    }

    pub fn row_totals(&self) -> [u64; 2] {
        [
            self.cells[0][0] + self.cells[0][1],
            self.cells[1][0] + self.cells[1][1],
        ]
    }

    pub fn col_totals(&self) -> [u64; 2] {
        [
            self.cells[0][0] + self.cells[1][0],
            self.cells[0][1] + self.cells[1][1],
        ]
    }

    pub fn total(&self) -> u64 {
        self.row_totals().iter().sum()
    }

    /// Sample odds ratio `(a·d)/(b·c)`; `+inf` when only the denominator vanishes.
    pub fn odds_ratio(&self) -> f64 {
        let [[a, b], [c, d]] = self.cells;
        let num = a as f64 * d as f64;
        let den = b as f64 * c as f64;
        if den == 0.0 {
            if num > 0.0 {
                f64::INFINITY
            } else {
                f64::NAN
            }
        } else {
            num / den
        }
    }
}

/// Alternative hypothesis for the one-sided test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Odds ratio greater than one: row 0 favours column 0.
    Greater,
}

/// Odds ratio and one-sided Fisher p-value for one table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub odds_ratio: f64,
    pub fisher_p_one_sided: f64,
    pub table: Table2x2,
}

/// Log-probability of `x` in the top-left cell under fixed margins.
fn ln_hypergeom(x: u64, rows: [u64; 2], col0: u64, n: u64) -> f64 {
    ln_factorial(rows[0]) - ln_factorial(x) - ln_factorial(rows[0] - x)
        + ln_factorial(rows[1])
        - ln_factorial(col0 - x)
        - ln_factorial(rows[1] + x - col0)
        - (ln_factorial(n) - ln_factorial(col0) - ln_factorial(n - col0))
}

/// One-sided Fisher exact test.
///
/// Sums hypergeometric probabilities of every table with the same margins
/// whose top-left cell is at least as large as the observed one. Terms are
/// accumulated in log space, so tables with n in the thousands are fine.
pub fn fisher_one_sided(
    table: &Table2x2,
    alternative: Alternative,
) -> Result<AssociationReport, MetricsError> {
    let rows = table.row_totals();
    let cols = table.col_totals();
    if rows.contains(&0) || cols.contains(&0) {
        return Err(MetricsError::DegenerateMargins(table.cells));
    }
    let n = table.total();
    let a = table.cells[0][0];
    let hi = rows[0].min(cols[0]);
    let log_terms: Vec<f64> = match alternative {
        Alternative::Greater => (a..=hi).map(|x| ln_hypergeom(x, rows, cols[0], n)).collect(),
    };
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p = max.exp() * log_terms.iter().map(|t| (t - max).exp()).sum::<f64>();
    Ok(AssociationReport {
        odds_ratio: table.odds_ratio(),
        fisher_p_one_sided: p.min(1.0),
        table: *table,
    })
}
