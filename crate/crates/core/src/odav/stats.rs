//! Distribution summaries for job-level metrics.

use std::fmt;

/// Nearest-rank deciles: `d[0]` is the minimum, `d[10]` the maximum and
/// `d[k] = sorted[ceil(k*N/10) - 1]` in between. `None` for empty input.
pub fn deciles(values: &[i64]) -> Option<[i64; 11]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    let mut d = [0i64; 11];
    d[0] = v[0];
    d[10] = v[n - 1];
    for (k, slot) in d.iter_mut().enumerate().take(10).skip(1) {
        let rank = (k * n).div_ceil(10);
        *slot = v[rank - 1];
    }
    Some(d)
}

/// Mean rounded half-up to an integer.
pub fn mean_round(values: &[i64]) -> Option<i64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as i128;
    let sum: i128 = values.iter().map(|&v| v as i128).sum();
    Some((2 * sum + n).div_euclid(2 * n) as i64)
}

pub fn mean(values: &[i64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AboveIsBad,
    BelowIsBad,
}

/// Linear ramp from `threshold` (severity 0) to `saturation` (severity 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeveritySpec {
    threshold: f64,
    saturation: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeveritySpecError(pub String);

impl fmt::Display for SeveritySpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SeveritySpecError {}

impl SeveritySpec {
    pub fn new(threshold: f64, saturation: f64, dir: Direction) -> Result<Self, SeveritySpecError> {
        if !(threshold.is_finite() && saturation.is_finite()) {
            return Err(SeveritySpecError("severity bounds must be finite".into()));
        }
        let ok = match dir {
            Direction::AboveIsBad => saturation > threshold,
            Direction::BelowIsBad => saturation < threshold,
        };
        if !ok {
            return Err(SeveritySpecError(format!(
                "saturation {saturation} must lie on the bad side of threshold {threshold}"
            )));
        }
        Ok(SeveritySpec {
            threshold,
            saturation,
        })
    }

    pub fn direction(&self) -> Direction {
        if self.saturation > self.threshold {
            Direction::AboveIsBad
        } else {
            Direction::BelowIsBad
        }
    }

    /// Per-value severity in [0, 1]. The ratio form covers both directions.
    pub fn of(&self, v: f64) -> f64 {
        ((v - self.threshold) / (self.saturation - self.threshold)).clamp(0.0, 1.0)
    }
}

/// Mean per-value severity; `None` for empty input.
pub fn severity(values: &[i64], spec: &SeveritySpec) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().map(|&v| spec.of(v as f64)).sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force nearest rank: the smallest value with at least
    /// ceil(p*N) values at or below it.
    fn oracle(values: &[i64]) -> [i64; 11] {
        let mut d = [0; 11];
        let n = values.len();
        for (k, slot) in d.iter_mut().enumerate() {
            let need = if k == 0 { 1 } else { (k * n).div_ceil(10) };
            *slot = *values
                .iter()
                .filter(|&&c| values.iter().filter(|&&x| x <= c).count() >= need)
                .min()
                .unwrap();
        }
        d
    }

    #[test]
    fn one_to_ten() {
        let v: Vec<i64> = (1..=10).collect();
        let d = deciles(&v).unwrap();
        assert_eq!(d, [1, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        assert_eq!((d[0], d[5], d[10]), (1, 5, 10));
    }

    #[test]
    fn constant_single_and_empty() {
        assert_eq!(deciles(&[7; 13]).unwrap(), [7; 11]);
        assert_eq!(deciles(&[42]).unwrap(), [42; 11]);
        assert_eq!(deciles(&[]), None);
    }

    #[test]
    fn severity_examples() {
        let s = SeveritySpec::new(100.0, 200.0, Direction::AboveIsBad).unwrap();
        assert_eq!(severity(&[100; 4], &s), Some(0.0));
        assert_eq!(severity(&[200; 4], &s), Some(1.0));
        assert_eq!(severity(&[100, 200, 100, 200], &s), Some(0.5));
        let below = SeveritySpec::new(0.5, 0.1, Direction::BelowIsBad).unwrap();
        assert_eq!(below.of(0.1), 1.0);
        assert_eq!(below.of(0.9), 0.0);
        assert!(SeveritySpec::new(1.0, 1.0, Direction::AboveIsBad).is_err());
        assert!(SeveritySpec::new(1.0, 0.0, Direction::AboveIsBad).is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(mean_round(&(0..60).collect::<Vec<_>>()), Some(30));
        assert_eq!(mean_round(&[-1, -2]), Some(-1));
        assert_eq!(mean_round(&[1, 2]), Some(2));
    }

    proptest! {
        #[test]
        fn deciles_match_oracle(v in prop::collection::vec(-1000i64..1000, 1..60)) {
            prop_assert_eq!(deciles(&v).unwrap(), oracle(&v));
        }

        #[test]
        fn deciles_sorted_and_bounded(v in prop::collection::vec(any::<i64>(), 1..2000)) {
            let d = deciles(&v).unwrap();
            prop_assert!(d.windows(2).all(|p| p[0] <= p[1]));
            prop_assert_eq!(d[0], *v.iter().min().unwrap());
            prop_assert_eq!(d[10], *v.iter().max().unwrap());
        }

        #[test]
        fn severity_monotone_and_permutation_invariant(
            mut v in prop::collection::vec(0i64..400, 1..50),
            idx in any::<prop::sample::Index>(),
            bump in 0i64..100,
        ) {
            let s = SeveritySpec::new(100.0, 300.0, Direction::AboveIsBad).unwrap();
            let base = severity(&v, &s).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let mut rev = v.clone();
            rev.reverse();
            prop_assert!((severity(&rev, &s).unwrap() - base).abs() < 1e-12);
            let i = idx.index(v.len());
            v[i] += bump;
            prop_assert!(severity(&v, &s).unwrap() >= base - 1e-12);
        }
    }
}
