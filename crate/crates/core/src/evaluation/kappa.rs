//! Chance-corrected agreement across multiple raters.

use super::EvalError;

/// Fleiss' kappa over an item × category tally matrix.
///
/// Each row holds, for one rated item, how many raters chose each category;
/// every row must sum to `raters_per_item` (at least two). The statistic is
/// κ = (P̄ − P̄e) / (1 − P̄e), where P̄ is the mean per-item pairwise
/// agreement and P̄e the chance agreement implied by the pooled category
/// proportions. When all ratings fall into a single category chance
/// agreement saturates; total observed agreement then yields the defined
/// value 1.0, anything else is reported as degenerate.
pub fn fleiss_kappa(tallies: &[Vec<u32>], raters_per_item: u32) -> Result<f64, EvalError> {
    if raters_per_item < 2 {
        return Err(EvalError::Kappa(format!(
            "at least two raters per item are required, got {raters_per_item}"
        )));
    }
    if tallies.is_empty() {
        return Err(EvalError::Kappa("at least one item is required".into()));
    }
    let categories = tallies[0].len();
    if categories == 0 {
        return Err(EvalError::Kappa("at least one category is required".into()));
    }
    for (i, row) in tallies.iter().enumerate() {
        if row.len() != categories {
            return Err(EvalError::Kappa(format!(
                "item {i} has {} categories, expected {categories}",
                row.len()
            )));
        }
        let total: u32 = row.iter().sum();
        if total != raters_per_item {
            return Err(EvalError::Kappa(format!(
                "item {i} holds {total} ratings, expected {raters_per_item}"
            )));
        }
    }

    let raters = f64::from(raters_per_item);
    let items = tallies.len() as f64;
    let mut agreement_sum = 0.0;
    let mut column_totals = vec![0.0; categories];
    for row in tallies {
        let squares: f64 = row.iter().map(|&c| f64::from(c) * f64::from(c)).sum();
        agreement_sum += (squares - raters) / (raters * (raters - 1.0));
        for (column, &count) in row.iter().enumerate() {
            column_totals[column] += f64::from(count);
        }
    }
    let observed = agreement_sum / items;
    let chance: f64 = column_totals
        .iter()
        .map(|&total| (total / (items * raters)).powi(2))
        .sum();

    if chance >= 1.0 - 1e-12 {
        return if observed >= 1.0 - 1e-12 {
            Ok(1.0)
        } else {
            Err(EvalError::DegenerateChanceAgreement)
        };
    }
    Ok((observed - chance) / (1.0 - chance))
}
