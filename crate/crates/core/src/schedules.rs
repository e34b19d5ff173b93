//! Diffusion variance schedules.
//!
//! A [`VarianceSchedule`] holds the per-step noise fractions `beta_t` and the
//! cumulative products `alpha_bar` derived from them. `alpha_bar[k]` is the
//! product of `(1 - beta_s)` for `s <= k`, with `alpha_bar[0] = 1`, so the
//! marginal of the stepwise noising recursion at step `k` has mean multiplier
//! `sqrt(alpha_bar[k])` and variance `1 - alpha_bar[k]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of diffusion steps when a config leaves `T` unset.
pub const DEFAULT_STEPS: usize = 1000;

/// Variance schedule: `betas[k]` is the noise fraction of step `k + 1`,
/// `alpha_bars` has one more entry with `alpha_bars[0] = 1`.
///
/// Immutable after construction; safe to share across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    /// Build a schedule from explicit betas, which must each lie strictly
    /// inside (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        for (k, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Domain(format!(
                    "beta[{k}] = {b} outside the open interval (0, 1)"
                )));
            }
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for &b in &betas {
            let last = *alpha_bars.last().expect("non-empty by construction");
            alpha_bars.push(last * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Total number of steps `T`.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// Noise fraction of step `k + 1` (zero-indexed over steps 1..=T).
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative product at step `k`, for `k` in `0..=T`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Linearly interpolated beta schedule, the framework default.
///
/// `betas[0] = beta_start`, `betas[T-1] = beta_end`, evenly spaced. A single
/// step degenerates to `[beta_start]`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    if steps == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Domain(format!(
            "require 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let d = (beta_end - beta_start) / (steps as f64 - 1.0);
        (0..steps).map(|k| beta_start + d * k as f64).collect()
    };
    VarianceSchedule::from_betas(betas)
}

/// Map the fractional noise parameter `t` in [0, 1] to a discrete step index.
///
/// Uses round-half-away-from-zero, so `t = 0.5` with `T = 1000` lands on step
/// 500. Zero means no diffusion is applied.
pub fn fraction_to_step(t_frac: f64, steps: usize) -> Result<usize> {
    if steps == 0 {
        return Err(Error::Domain("steps must be positive".into()));
    }
    if !(0.0..=1.0).contains(&t_frac) {
        return Err(Error::Domain(format!(
            "noise fraction {t_frac} outside [0, 1]"
        )));
    }
    Ok((t_frac * steps as f64).round() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_schedule_forces_cumulative_product() {
        let s = make_linear_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5, 0.5]);
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
    }

    #[test]
    fn long_linear_schedule_matches_high_precision_product() {
        // Independent oracle: 60-digit cumulative product of (1 - beta_k)
        // over the same linspace, computed before this module existed.
        let expected = 4.035829765375683314817635e-5;
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_relative_eq!(s.alpha_bar(1000), expected, max_relative = 1e-12);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(VarianceSchedule::from_betas(vec![]).is_err());
        assert!(VarianceSchedule::from_betas(vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn fraction_to_step_examples() {
        assert_eq!(fraction_to_step(0.5, 1000).unwrap(), 500);
        assert_eq!(fraction_to_step(0.0, 17).unwrap(), 0);
        assert_eq!(fraction_to_step(1.0, 50).unwrap(), 50);
        // round-half-away-from-zero tie-break
        assert_eq!(fraction_to_step(0.5, 3).unwrap(), 2);
        assert!(fraction_to_step(-0.1, 10).is_err());
        assert!(fraction_to_step(1.1, 10).is_err());
    }

    #[test]
    fn serde_round_trip_through_json() {
        let s = make_linear_schedule(8, 1e-3, 0.02).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: VarianceSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decreasing_and_refoldable(
            steps in 1usize..200,
            b0 in 1e-6f64..0.5,
            spread in 0.0f64..0.4,
        ) {
            let b1 = (b0 + spread).min(0.999);
            let s = make_linear_schedule(steps, b0, b1).unwrap();
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            prop_assert!(s.alpha_bar(steps) > 0.0);
            for k in 1..=steps {
                prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            }
            // independent left-fold reproduces stored values
            let mut acc = 1.0f64;
            for k in 0..steps {
                acc *= 1.0 - s.beta(k);
                let rel = (acc - s.alpha_bar(k + 1)).abs() / s.alpha_bar(k + 1).abs();
                prop_assert!(rel < 1e-12);
            }
        }

        #[test]
        fn fraction_to_step_monotone(steps in 1usize..5000, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let sa = fraction_to_step(lo, steps).unwrap();
            let sb = fraction_to_step(hi, steps).unwrap();
            prop_assert!(sa <= sb);
            prop_assert!(sb <= steps);
        }
    }
}
