//! Forward corruption, the noise-prediction objective and reverse samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{ddim_timesteps, NoiseSchedule};
use crate::error::{validation, Error, Result};
use crate::vqvae::LatentCode;

fn same(a: &LatentCode, b: &LatentCode, what: &str) -> Result<()> {
    if !a.same_extent(b) {
        return Err(validation(format!(
            "{what}: extents {}x{}^3 and {}x{}^3 differ",
            a.channels, a.side, b.channels, b.side
        )));
    }
    Ok(())
}

fn with_values(like: &LatentCode, values: impl Iterator<Item = f64>) -> LatentCode {
    LatentCode {
        channels: like.channels,
        side: like.side,
        values: values.map(|v| v as f32).collect(),
    }
}

/// Standard normal latent drawn from `rng`.
pub fn gaussian_latent<R: rand::Rng + ?Sized>(
    channels: usize,
    side: usize,
    rng: &mut R,
) -> LatentCode {
    LatentCode {
        channels,
        side,
        values: (0..channels * side.pow(3))
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    }
}

/// `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample(
    z0: &LatentCode,
    t: usize,
    eps: &LatentCode,
    sched: &NoiseSchedule,
) -> Result<LatentCode> {
    sched.check_t(t)?;
    same(z0, eps, "forward_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(with_values(
        z0,
        z0.values
            .iter()
            .zip(&eps.values)
            .map(|(&z, &e)| a * z as f64 + b * e as f64),
    ))
}

/// Mean squared error between the true and predicted noise.
pub fn training_target_loss(eps: &LatentCode, eps_pred: &LatentCode) -> Result<f64> {
    same(eps, eps_pred, "training_target_loss")?;
    let n = eps.values.len() as f64;
    Ok(eps
        .values
        .iter()
        .zip(&eps_pred.values)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// One ancestral step `mu + sqrt(beta_tilde_t) noise`; `noise` must be absent
/// or zero at `t = 1`.
pub fn ddpm_step(
    zt: &LatentCode,
    t: usize,
    eps_pred: &LatentCode,
    sched: &NoiseSchedule,
    noise: Option<&LatentCode>,
) -> Result<LatentCode> {
    sched.check_t(t)?;
    same(zt, eps_pred, "ddpm_step")?;
    if let Some(n) = noise {
        same(zt, n, "ddpm_step noise")?;
        if t == 1 && n.values.iter().any(|&v| v != 0.0) {
            return Err(validation("the final step (t = 1) takes no noise"));
        }
    }
    let inv = 1.0 / sched.alpha(t).sqrt();
    let c = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.beta_tilde(t).sqrt();
    let values = (0..zt.values.len()).map(|i| {
        let mu = inv * (zt.values[i] as f64 - c * eps_pred.values[i] as f64);
        mu + noise.map_or(0.0, |n| sigma * n.values[i] as f64)
    });
    Ok(with_values(zt, values))
}

/// `(z_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn predict_z0(zt: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zt.iter().zip(eps).map(|(z, e)| (z - b * e) / a).collect()
}

/// Deterministic (eta = 0) update from `t` to `t_prev`; `t_prev = 0` returns
/// the clean estimate.
pub fn ddim_step(
    zt: &[f64],
    t: usize,
    t_prev: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let z0 = predict_z0(zt, t, eps, sched);
    let ab = sched.alpha_bar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

/// Noise predictor `(z_t, t) -> eps`, with any conditioning captured.
pub trait Denoiser {
    fn predict(&mut self, zt: &LatentCode, t: usize) -> Result<LatentCode>;
}

impl<F: FnMut(&LatentCode, usize) -> Result<LatentCode>> Denoiser for F {
    fn predict(&mut self, zt: &LatentCode, t: usize) -> Result<LatentCode> {
        self(zt, t)
    }
}

fn checked_predict<D: Denoiser + ?Sized>(d: &mut D, zt: &LatentCode, t: usize) -> Result<Vec<f64>> {
    let eps = d.predict(zt, t)?;
    if !eps.same_extent(zt) {
        return Err(Error::Contract(format!(
            "denoiser returned {}x{}^3 for a {}x{}^3 input",
            eps.channels, eps.side, zt.channels, zt.side
        )));
    }
    Ok(eps.values.iter().map(|&v| v as f64).collect())
}

/// DDIM sampling over `t_inf` evenly spaced steps from `z_T ~ N(0, I)` drawn
/// with `seed`. The state is carried in f64 between steps.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    channels: usize,
    side: usize,
    sched: &NoiseSchedule,
    t_inf: usize,
    seed: u64,
) -> Result<LatentCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = gaussian_latent(channels, side, &mut rng);
    ddim_sample_from(denoiser, &init, sched, t_inf)
}

/// DDIM sampling from a given `z_T`.
pub fn ddim_sample_from<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    z_init: &LatentCode,
    sched: &NoiseSchedule,
    t_inf: usize,
) -> Result<LatentCode> {
    let ts = ddim_timesteps(sched.steps(), t_inf)?;
    let mut z: Vec<f64> = z_init.values.iter().map(|&v| v as f64).collect();
    for k in (0..ts.len()).rev() {
        let t = ts[k];
        let t_prev = if k == 0 { 0 } else { ts[k - 1] };
        let eps = checked_predict(denoiser, &with_values(z_init, z.iter().copied()), t)?;
        z = ddim_step(&z, t, t_prev, &eps, sched);
    }
    let out = with_values(z_init, z.into_iter());
    LatentCode::new(out.channels, out.side, out.values)
}

/// Full ancestral DDPM sampling over all `T` steps.
pub fn ddpm_sample<D: Denoiser + ?Sized>(
    denoiser: &mut D,
    z_init: &LatentCode,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LatentCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = z_init.clone();
    for t in (1..=sched.steps()).rev() {
        let eps = checked_predict(denoiser, &z, t)?;
        let eps = with_values(&z, eps.into_iter());
        let noise = (t > 1).then(|| gaussian_latent(z.channels, z.side, &mut rng));
        z = ddpm_step(&z, t, &eps, sched, noise.as_ref())?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_linear_schedule;

    fn code(v: &[f32]) -> LatentCode {
        LatentCode::new(1, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_forward_samples() {
        let s = make_linear_schedule(1000, 8.5e-4, 0.012).unwrap();
        let z0 = LatentCode::new(1, 2, (0..8).map(|i| i as f32 - 3.0).collect()).unwrap();
        let zero = LatentCode::zeros(1, 2);
        let a = forward_sample(&z0, 300, &zero, &s).unwrap();
        for (x, z) in a.values.iter().zip(&z0.values) {
            assert_eq!(*x, (s.alpha_bar(300).sqrt() * *z as f64) as f32);
        }
        let b = forward_sample(&zero, 300, &z0, &s).unwrap();
        for (x, e) in b.values.iter().zip(&z0.values) {
            assert_eq!(*x, ((1.0 - s.alpha_bar(300)).sqrt() * *e as f64) as f32);
        }
        assert!(forward_sample(&z0, 0, &zero, &s).is_err());
        assert!(forward_sample(&z0, 1001, &zero, &s).is_err());
        assert!(forward_sample(&z0, 1, &LatentCode::zeros(1, 3), &s).is_err());
    }

    #[test]
    fn loss_identity_and_symmetry() {
        let a = LatentCode::new(2, 1, vec![0.5, -1.0]).unwrap();
        let b = LatentCode::new(2, 1, vec![1.5, 1.0]).unwrap();
        assert_eq!(training_target_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(training_target_loss(&a, &b).unwrap(), 2.5);
        let (pa, pb) = (
            LatentCode::new(2, 1, vec![-1.0, 0.5]).unwrap(),
            LatentCode::new(2, 1, vec![1.0, 1.5]).unwrap(),
        );
        assert_eq!(training_target_loss(&pa, &pb).unwrap(), 2.5);
        assert!(training_target_loss(&a, &code(&[0.0])).is_err());
    }

    #[test]
    fn ddpm_degenerate_cases() {
        let s = make_linear_schedule(1000, 8.5e-4, 0.012).unwrap();
        let z = code(&[0.7]);
        let out = ddpm_step(&z, 40, &code(&[0.0]), &s, Some(&code(&[0.0]))).unwrap();
        assert!((out.values[0] as f64 - 0.7 / s.alpha(40).sqrt()).abs() < 1e-7);
        assert!(ddpm_step(&z, 1, &code(&[0.0]), &s, Some(&code(&[0.3]))).is_err());
        assert_eq!(
            ddpm_step(&z, 1, &code(&[0.2]), &s, None).unwrap(),
            ddpm_step(&z, 1, &code(&[0.2]), &s, None).unwrap()
        );
    }

    #[test]
    fn mismatched_denoiser_is_a_contract_error() {
        let s = make_linear_schedule(50, 1e-3, 0.02).unwrap();
        let mut bad = |_: &LatentCode, _: usize| Ok(LatentCode::zeros(2, 1));
        assert!(matches!(
            ddim_sample(&mut bad, 1, 1, &s, 10, 0),
            Err(Error::Contract(_))
        ));
    }
}
