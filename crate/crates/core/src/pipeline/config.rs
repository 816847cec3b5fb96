//! Flat `key = value` run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DiffusionTrainConfig};
use crate::diffusion::{make_linear_schedule, NoiseSchedule};
use crate::error::{io_err, validation, Error, Result};
use crate::vqvae::{VqVaeConfig, VqVaeTrainConfig};

/// Every tunable of a run. Text form is one `key = value` per line (TOML
/// scalars and arrays); `#` starts a comment and unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: String,
    pub out_dir: String,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub split_seed: u64,
    /// Scan camera: random azimuth, fixed elevation (degrees) and distance
    /// (multiples of the grid side).
    pub scan_elevation: f64,
    pub scan_radius: f64,
    pub scan_image_size: usize,

    /// `S`
    pub resolution: usize,
    pub thresh: f32,
    /// `S_l`
    pub latent_side: usize,
    /// `D`
    pub latent_dim: usize,
    /// `K_Z`
    pub codebook_size: usize,
    pub vq_widths: Vec<usize>,
    pub vq_res_blocks: usize,
    pub groups: usize,
    pub beta: f64,
    pub gamma_r: f64,
    pub gamma_a: f64,
    pub vq_steps: usize,
    pub vq_batch_size: usize,
    pub vq_lr: f64,
    pub disc_lr: f64,
    pub disc_width: usize,
    pub render_size: usize,
    pub views_per_step: usize,
    pub dead_code_steps: usize,
    pub vq_seed: u64,

    /// `T`
    pub diffusion_steps: usize,
    /// `T_inf`
    pub inference_steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub attention_resolutions: Vec<usize>,
    pub unet_widths: Vec<usize>,
    pub time_dim: usize,
    pub token_count: usize,
    /// `d_CLIP`
    pub token_dim: usize,
    pub token_image_size: usize,
    pub diff_steps: usize,
    pub diff_batch_size: usize,
    pub diff_lr: f64,
    pub token_dropout: f64,
    pub partial_dropout: f64,
    pub diff_seed: u64,

    pub n_samples: usize,
    pub best_of: usize,
    pub sample_seed: u64,
    pub chamfer_points: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Single-core configuration at `S = 32`.
    pub fn desk() -> Self {
        let vq = VqVaeConfig::desk();
        let vt = VqVaeTrainConfig::desk();
        let dn = DenoiserConfig::desk();
        let dt = DiffusionTrainConfig::desk();
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
            corpus_size: 64,
            corpus_seed: 0,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            split_seed: 0,
            scan_elevation: 20.0,
            scan_radius: 1.6,
            scan_image_size: 48,
            resolution: vq.resolution,
            thresh: vq.thresh,
            latent_side: vq.latent_side(),
            latent_dim: vq.latent_dim,
            codebook_size: vq.codebook_size,
            vq_widths: vq.widths.to_vec(),
            vq_res_blocks: vq.res_blocks,
            groups: vq.groups,
            beta: vq.beta,
            gamma_r: vq.gamma_r,
            gamma_a: vq.gamma_a,
            vq_steps: vt.steps,
            vq_batch_size: vt.batch_size,
            vq_lr: vt.lr,
            disc_lr: vt.disc_lr,
            disc_width: vt.disc_width,
            render_size: vt.image_size,
            views_per_step: vt.views_per_step,
            dead_code_steps: vt.dead_code_steps,
            vq_seed: 0,
            diffusion_steps: 1000,
            inference_steps: 100,
            beta_1: 8.5e-4,
            beta_t: 0.012,
            attention_resolutions: dn.attention_resolutions,
            unet_widths: dn.widths,
            time_dim: dn.time_dim,
            token_count: dn.token_count,
            token_dim: dn.token_dim,
            token_image_size: dn.token_image_size,
            diff_steps: dt.steps,
            diff_batch_size: dt.batch_size,
            diff_lr: dt.lr,
            token_dropout: dt.token_dropout,
            partial_dropout: dt.partial_dropout,
            diff_seed: 0,
            n_samples: 1,
            best_of: 5,
            sample_seed: 0,
            chamfer_points: crate::metrics::DEFAULT_CHAMFER_POINTS,
            log_every: 100,
            checkpoint_every: 0,
        }
    }

    /// Reference sizes: `S = 64`, `16^3 x 3` latent, `K_Z = 16384`, 768-wide tokens.
    pub fn reference() -> Self {
        let vq = VqVaeConfig::reference();
        let dn = DenoiserConfig::reference();
        let dt = DiffusionTrainConfig::default();
        let vt = VqVaeTrainConfig::default();
        Self {
            resolution: vq.resolution,
            latent_side: vq.latent_side(),
            codebook_size: vq.codebook_size,
            vq_widths: vq.widths.to_vec(),
            vq_lr: vt.lr,
            disc_lr: vt.disc_lr,
            vq_batch_size: 8,
            attention_resolutions: dn.attention_resolutions,
            unet_widths: dn.widths,
            time_dim: dn.time_dim,
            token_dim: dn.token_dim,
            diff_lr: dt.lr,
            diff_batch_size: 8,
            ..Self::desk()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            field: "config".into(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form, stored in every checkpoint and report.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.split_train + self.split_val + self.split_test;
        if (sum - 1.0).abs() > 1e-9
            || [self.split_train, self.split_val, self.split_test]
                .iter()
                .any(|r| *r < 0.0)
        {
            return Err(validation(format!(
                "split ratios must be nonnegative and sum to 1, got {sum}"
            )));
        }
        if self.latent_side * 4 != self.resolution {
            return Err(validation(format!(
                "latent_side {} must be resolution / 4 = {}",
                self.latent_side,
                self.resolution / 4
            )));
        }
        if self.vq_widths.len() != 3 {
            return Err(validation("vq_widths needs exactly three entries"));
        }
        for (name, p) in [
            ("token_dropout", self.token_dropout),
            ("partial_dropout", self.partial_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(validation(format!("{name} {p} outside [0, 1)")));
            }
        }
        if self.best_of == 0 || self.n_samples == 0 || self.inference_steps == 0 {
            return Err(validation(
                "best_of, n_samples and inference_steps must be positive",
            ));
        }
        if self.inference_steps > self.diffusion_steps {
            return Err(validation("inference_steps cannot exceed diffusion_steps"));
        }
        self.vqvae_config().validate()?;
        self.denoiser_config().validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn vqvae_config(&self) -> VqVaeConfig {
        let w = &self.vq_widths;
        VqVaeConfig {
            resolution: self.resolution,
            thresh: self.thresh,
            widths: [
                w[0],
                w.get(1).copied().unwrap_or(w[0]),
                w.get(2).copied().unwrap_or(w[0]),
            ],
            res_blocks: self.vq_res_blocks,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            groups: self.groups,
            beta: self.beta,
            gamma_r: self.gamma_r,
            gamma_a: self.gamma_a,
        }
    }

    pub fn vqvae_train_config(&self) -> VqVaeTrainConfig {
        VqVaeTrainConfig {
            steps: self.vq_steps,
            batch_size: self.vq_batch_size,
            lr: self.vq_lr,
            disc_lr: self.disc_lr,
            disc_width: self.disc_width,
            image_size: self.render_size,
            views_per_step: self.views_per_step,
            dead_code_steps: self.dead_code_steps,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            seed: self.vq_seed,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_dim: self.latent_dim,
            latent_side: self.latent_side,
            widths: self.unet_widths.clone(),
            attention_resolutions: self.attention_resolutions.clone(),
            time_dim: self.time_dim,
            token_count: self.token_count,
            token_dim: self.token_dim,
            groups: self.groups,
            grid_resolution: self.resolution,
            token_image_size: self.token_image_size,
        }
    }

    pub fn diffusion_train_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            steps: self.diff_steps,
            batch_size: self.diff_batch_size,
            lr: self.diff_lr,
            token_dropout: self.token_dropout,
            partial_dropout: self.partial_dropout,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            seed: self.diff_seed,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.diffusion_steps, self.beta_1, self.beta_t)
    }
}
