//! Variance schedules.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// `beta`, `alpha`, `alpha_bar` and `beta_tilde` for `t = 1..=T`.
///
/// Tables are stored 0-based (`beta[t - 1]`); use the accessors for 1-based
/// timesteps. `alpha_bar(0)` is 1 by convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
}

/// Double-double accumulator for the running product of the alphas.
#[derive(Clone, Copy)]
struct TwoFloat {
    hi: f64,
    lo: f64,
}

impl TwoFloat {
    fn one_minus(b: f64) -> Self {
        let hi = 1.0 - b;
        // Exact because 1 - b is computed with a single rounding.
        let lo = (1.0 - hi) - b;
        Self { hi, lo }
    }

    fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p) + (self.hi * o.lo + self.lo * o.hi);
        let hi = p + e;
        Self {
            hi,
            lo: e - (hi - p),
        }
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

pub fn make_linear_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(validation(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(validation(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_1} and {beta_t}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_1 + i as f64 / (steps - 1) as f64 * (beta_t - beta_1))
        .collect();
    Ok(NoiseSchedule::from_betas(beta))
}

impl NoiseSchedule {
    /// Schedule from an explicit `beta_1..=beta_T` table.
    pub fn from_beta_table(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(validation("beta table needs T >= 2 entries in (0, 1)"));
        }
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut acc = TwoFloat { hi: 1.0, lo: 0.0 };
        let mut alpha_bar = Vec::with_capacity(beta.len());
        for &b in &beta {
            acc = acc.mul(TwoFloat::one_minus(b));
            alpha_bar.push(acc.value());
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(validation(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }
}

/// Evenly spaced inference timesteps `round(1 + i (T - 1) / (n - 1))`,
/// ascending, always containing 1 and `T`.
pub fn ddim_timesteps(steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > steps {
        return Err(validation(format!(
            "T_inf must be in [1, {steps}], got {n}"
        )));
    }
    if n == 1 {
        return Ok(vec![steps]);
    }
    Ok((0..n)
        .map(|i| (1.0 + i as f64 * (steps - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_first_product() {
        let s = make_linear_schedule(1000, 8.5e-4, 0.012).unwrap();
        assert_eq!(s.beta(1), 8.5e-4);
        assert_eq!(s.beta(1000), 0.012);
        assert_eq!(s.alpha_bar(1), 1.0 - 8.5e-4);
        assert_eq!(s.beta_tilde(1), 0.0);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(make_linear_schedule(1, 1e-3, 1e-2).is_err());
        assert!(make_linear_schedule(10, 0.0, 1e-2).is_err());
        assert!(make_linear_schedule(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn inference_timesteps() {
        assert_eq!(ddim_timesteps(1000, 100).unwrap()[..3], [1, 11, 21]);
        let ts = ddim_timesteps(1000, 100).unwrap();
        assert_eq!((ts.len(), ts[99]), (100, 1000));
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            ddim_timesteps(10, 10).unwrap(),
            (1..=10).collect::<Vec<_>>()
        );
        assert!(ddim_timesteps(10, 11).is_err());
    }
}
