//! Percentile bootstrap and McNemar's paired test.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::EvalError;
use crate::video::Seed;

pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Below this many discordant pairs the exact binomial test is used.
pub const EXACT_LIMIT: u64 = 25;

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(values: &[f64], level: f64, b: usize, seed: Seed) -> Result<(f64, f64), EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::InvalidParameter(format!("level must be in (0,1), got {level}")));
    }
    if b < 100 {
        return Err(EvalError::InvalidParameter(format!("need at least 100 resamples, got {b}")));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = seed.rng();
    let mut means: Vec<f64> =
        (0..b).map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let (low, high) = (quantile(&means, tail), quantile(&means, 1.0 - tail));
    Ok((low.min(mean), high.max(mean)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McNemarMethod {
    Exact,
    ChiSquare,
    /// No discordant pairs; p is 1 by convention.
    NoDiscordantPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub p_value: f64,
    pub method: McNemarMethod,
}

/// Two-sided McNemar test on the discordant counts `b` (only A correct) and
/// `c` (only B correct).
pub fn mcnemar_test(b: u64, c: u64) -> McNemar {
    let n = b + c;
    if n == 0 {
        return McNemar { p_value: 1.0, method: McNemarMethod::NoDiscordantPairs };
    }
    if n < EXACT_LIMIT {
        let k = b.min(c);
        let mut term = 0.5f64.powi(n as i32);
        let mut tail = 0.0;
        for i in 0..=k {
            tail += term;
            term *= (n - i) as f64 / (i + 1) as f64;
        }
        return McNemar { p_value: (2.0 * tail).min(1.0), method: McNemarMethod::Exact };
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let chi2 = diff.max(0.0).powi(2) / n as f64;
    // chi-square survival with one degree of freedom
    McNemar { p_value: erfc((chi2 / 2.0).sqrt()).min(1.0), method: McNemarMethod::ChiSquare }
}

/// Sample mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcnemar_examples() {
        let r = mcnemar_test(2, 12);
        assert_eq!(r.method, McNemarMethod::Exact);
        assert!((r.p_value - 212.0 / 16384.0).abs() < 1e-12);
        assert_eq!(mcnemar_test(7, 7).p_value, 1.0);
        let big = mcnemar_test(0, 30);
        assert_eq!(big.method, McNemarMethod::ChiSquare);
        assert!(big.p_value < 1e-6);
        assert_eq!(mcnemar_test(0, 0).method, McNemarMethod::NoDiscordantPairs);
        assert_eq!(mcnemar_test(0, 0).p_value, 1.0);
    }

    #[test]
    fn bootstrap_degenerate_inputs() {
        assert_eq!(bootstrap_ci(&[1.0; 20], 0.95, 200, Seed(1)).unwrap(), (1.0, 1.0));
        assert_eq!(bootstrap_ci(&[0.0; 20], 0.95, 200, Seed(1)).unwrap(), (0.0, 0.0));
        assert!(matches!(bootstrap_ci(&[], 0.95, 200, Seed(1)), Err(EvalError::EmptyInput)));
        assert!(bootstrap_ci(&[1.0], 0.95, 10, Seed(1)).is_err());
    }

    #[test]
    fn bootstrap_nests_in_level() {
        let v: Vec<f64> = (0..50).map(|i| f64::from(u8::from(i % 3 != 0))).collect();
        let (l95, h95) = bootstrap_ci(&v, 0.95, 2000, Seed(4)).unwrap();
        let (l99, h99) = bootstrap_ci(&v, 0.99, 2000, Seed(4)).unwrap();
        assert!(l99 <= l95 && h95 <= h99);
        assert_eq!(bootstrap_ci(&v, 0.95, 2000, Seed(4)).unwrap(), (l95, h95));
    }

    #[test]
    fn mean_se_small() {
        assert_eq!(mean_se(&[2.0]), (2.0, 0.0));
        let (m, se) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }
}
