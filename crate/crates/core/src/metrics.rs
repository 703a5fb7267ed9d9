//! Regression metrics: coefficient of determination and Kendall's tau-b.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Error, Result};

/// `1 - SS_res / SS_tot` with a mean-centred `SS_tot`.
pub fn r_squared(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    ensure_len("r_squared", labels.len(), predictions.len())?;
    if labels.len() < 2 {
        return Err(invalid("labels", "R² needs at least two points"));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = predictions.iter().zip(labels).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Tie-corrected Kendall rank correlation, by comparing every pair.
///
/// `tau_b = (C - D) / sqrt((n0 - Tx) (n0 - Ty))` where `Tx`/`Ty` count pairs
/// tied in the first/second argument (a pair tied in both counts in each).
pub fn kendall_tau(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    ensure_len("kendall_tau", labels.len(), predictions.len())?;
    let n = labels.len();
    if n < 2 {
        return Err(invalid("labels", "Kendall tau needs at least two points"));
    }
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = predictions[i].total_cmp(&predictions[j]);
            let dy = labels[i].total_cmp(&labels[j]);
            match (dx, dy) {
                (Ordering::Equal, Ordering::Equal) => {
                    tie_x += 1;
                    tie_y += 1;
                }
                (Ordering::Equal, _) => tie_x += 1,
                (_, Ordering::Equal) => tie_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as u64;
    let denom = ((pairs - tie_x) as f64) * ((pairs - tie_y) as f64);
    if denom == 0.0 {
        return Err(Error::AllTied);
    }
    Ok((concordant as f64 - discordant as f64) / denom.sqrt())
}

/// R² and Kendall tau for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub r2: f64,
    pub kendall_tau: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn compute(split: &str, predictions: &[f64], labels: &[f64]) -> Result<Self> {
        Ok(Self {
            split: split.to_owned(),
            r2: r_squared(predictions, labels)?,
            kendall_tau: kendall_tau(predictions, labels)?,
            n: labels.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_cases() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0; 3], &y).unwrap(), 0.0);
        // SS_res = 1, SS_tot = 2
        assert_eq!(r_squared(&[1.0, 2.0, 4.0], &y).unwrap(), 0.5);
        assert!(matches!(r_squared(&y, &[5.0; 3]), Err(Error::ZeroVariance)));
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn tau_extremes() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(kendall_tau(&[1.0; 3], &[2.0; 3]), Err(Error::AllTied)));
    }

    #[test]
    fn tau_b_with_ties_known_value() {
        // scipy.stats.kendalltau([1,2,2,3],[1,3,2,4]) = 0.9128709291752769
        let t = kendall_tau(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 0.912_870_929_175_276_9).abs() < 1e-12);
    }
}
