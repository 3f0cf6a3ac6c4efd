//! Exact rate arithmetic for reports.
//!
//! Rates keep their raw counts; aggregates are exact rationals. Rounding to
//! one decimal is round-half-up on the exact value, so 91.25 renders as 91.3.

use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rate {
    pub numerator: u64,
    pub denominator: u64,
}

impl Rate {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        assert!(denominator > 0, "rate denominator must be positive");
        assert!(numerator <= denominator, "rate above 100%");
        Self {
            numerator,
            denominator,
        }
    }

    pub fn from_bools(verdicts: impl IntoIterator<Item = bool>) -> Self {
        let (mut hit, mut total) = (0u64, 0u64);
        for v in verdicts {
            total += 1;
            hit += u64::from(v);
        }
        Self::new(hit, total)
    }

    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new(self.numerator, self.denominator)
    }

    /// Unweighted mean of several rates, as an exact reduced fraction.
    pub fn mean(rates: &[Rate]) -> Rate {
        assert!(!rates.is_empty(), "mean of no rates");
        let sum = rates
            .iter()
            .fold(Ratio::from_integer(0u64), |acc, r| acc + r.ratio());
        let mean = sum / Ratio::from_integer(rates.len() as u64);
        Rate::new(*mean.numer(), *mean.denom())
    }

    /// Pooled rate: total hits over total trials.
    pub fn pooled(rates: &[Rate]) -> Rate {
        let num = rates.iter().map(|r| r.numerator).sum();
        let den = rates.iter().map(|r| r.denominator).sum();
        Rate::new(num, den)
    }

    /// 100 × numerator / denominator as f64.
    pub fn percent(&self) -> f64 {
        100.0 * self.numerator as f64 / self.denominator as f64
    }

    /// Percent in tenths, rounded half up from the exact fraction.
    pub fn percent_tenths(&self) -> u64 {
        let num = 1000u128 * u128::from(self.numerator);
        let den = u128::from(self.denominator);
        ((2 * num + den) / (2 * den)) as u64
    }

    /// Percent to one decimal, e.g. "88.9".
    pub fn display(&self) -> String {
        let t = self.percent_tenths();
        format!("{}.{}", t / 10, t % 10)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up_on_exact_values() {
        assert_eq!(Rate::new(40, 45).display(), "88.9");
        assert_eq!(Rate::new(59, 75).display(), "78.7");
        assert_eq!(Rate::new(34, 50).display(), "68.0");
        // 91.25 exactly
        assert_eq!(Rate::new(73, 80).display(), "91.3");
        // 58.75 exactly
        assert_eq!(Rate::new(47, 80).display(), "58.8");
        assert_eq!(Rate::new(0, 7).display(), "0.0");
        assert_eq!(Rate::new(7, 7).display(), "100.0");
    }

    #[test]
    fn mean_is_exact() {
        let m = Rate::mean(&[Rate::new(1, 1), Rate::new(1, 1), Rate::new(9, 10), Rate::new(15, 20)]);
        assert_eq!((m.numerator, m.denominator), (73, 80));
    }

    #[test]
    fn pooled_sums_counts() {
        let p = Rate::pooled(&[Rate::new(17, 20), Rate::new(20, 20)]);
        assert_eq!((p.numerator, p.denominator), (37, 40));
        assert_eq!(p.display(), "92.5");
    }

    #[test]
    fn from_bools_counts() {
        let r = Rate::from_bools([true, false, true, true]);
        assert_eq!((r.numerator, r.denominator), (3, 4));
    }
}
