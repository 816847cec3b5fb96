//! Trained noise predictor: conditioning assembly, inference and training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapediff_nn::{Adam, AdamConfig, Graph, ParamStore, Real, Tensor};

use super::config::DenoiserConfig;
use super::tokens::{image_tensor, tokens_tensor, FeatureTokens};
use super::unet::{partial_tensor, CondVars, DenoiserNet};
use crate::diffusion::{ddim_sample, forward_sample, gaussian_latent, NoiseSchedule};
use crate::error::{validation, Error, Result};
use crate::grid::TsdfGrid;
use crate::render::NormalImage;
use crate::vqvae::{LatentCode, VqVae};

/// Image conditioning: a normal image for the built-in token encoder, or
/// precomputed tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageCondition {
    Image(NormalImage),
    Tokens(FeatureTokens),
}

/// Conditioning of one sample; absent modalities are simply `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Condition<'a> {
    pub image: Option<&'a ImageCondition>,
    pub partial: Option<&'a TsdfGrid>,
}

#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub net: DenoiserNet,
    pub store: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    /// Multiplier taking VQ-VAE latents to roughly unit variance.
    pub latent_scale: f32,
}

impl DiffusionModel {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = DenoiserNet::new(&mut store, config, &mut rng)?;
        Ok(Self {
            net,
            store,
            schedule,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.net.config
    }

    /// Places the batch conditioning on `g`. `keep` flags mark samples whose
    /// modality is present and not dropped.
    pub fn cond_vars<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        conds: &[Condition<'_>],
        keep_image: &[bool],
        keep_partial: &[bool],
    ) -> Result<CondVars> {
        let cfg = &self.net.config;
        let n = conds.len();
        let mut out = CondVars::default();

        let image_keep: Vec<bool> = (0..n)
            .map(|i| conds[i].image.is_some() && keep_image[i])
            .collect();
        if image_keep.iter().any(|&k| k) {
            let uses_images = conds
                .iter()
                .any(|c| matches!(c.image, Some(ImageCondition::Image(_))));
            let uses_tokens = conds
                .iter()
                .any(|c| matches!(c.image, Some(ImageCondition::Tokens(_))));
            if uses_images && uses_tokens {
                return Err(validation(
                    "a batch cannot mix images and precomputed tokens",
                ));
            }
            let var = if uses_images {
                let size = cfg.token_image_size;
                let blank = NormalImage {
                    width: size,
                    height: size,
                    normals: vec![[0.0; 3]; size * size],
                    hit: vec![false; size * size],
                };
                let imgs: Vec<&NormalImage> = conds
                    .iter()
                    .map(|c| match c.image {
                        Some(ImageCondition::Image(img)) => img,
                        _ => &blank,
                    })
                    .collect();
                let x = g.constant(image_tensor(&imgs, size)?);
                self.net.token_encoder.forward(g, store, x)?
            } else {
                let blank = FeatureTokens {
                    count: cfg.token_count,
                    dim: cfg.token_dim,
                    values: vec![0.0; cfg.token_count * cfg.token_dim],
                };
                let toks: Vec<&FeatureTokens> = conds
                    .iter()
                    .map(|c| match c.image {
                        Some(ImageCondition::Tokens(t)) => {
                            t.expect_extents(cfg.token_count, cfg.token_dim).map(|_| t)
                        }
                        _ => Ok(&blank),
                    })
                    .collect::<Result<_>>()?;
                g.constant(tokens_tensor(&toks)?)
            };
            out.tokens = Some((var, image_keep));
        }

        let partial_keep: Vec<bool> = (0..n)
            .map(|i| conds[i].partial.is_some() && keep_partial[i])
            .collect();
        if partial_keep.iter().any(|&k| k) {
            let r = cfg.grid_resolution;
            let blank = TsdfGrid::filled(r, 1.0, 0.0)?;
            let grids: Vec<&TsdfGrid> = conds.iter().map(|c| c.partial.unwrap_or(&blank)).collect();
            if grids.iter().any(|g| g.resolution() != r) {
                return Err(validation(format!("partial scans must be {r}^3")));
            }
            out.partial = Some((g.constant(partial_tensor(&grids)?), partial_keep));
        }
        Ok(out)
    }

    /// Noise prediction for a single latent in model (scaled) units.
    pub fn predict_eps(
        &self,
        zt: &LatentCode,
        t: usize,
        cond: &Condition<'_>,
    ) -> Result<LatentCode> {
        self.schedule.check_t(t)?;
        let mut g = Graph::<f32>::new();
        let cv = self.cond_vars(
            &mut g,
            &self.store,
            std::slice::from_ref(cond),
            &[true],
            &[true],
        )?;
        let z = g.constant(LatentCode::batch_tensor(std::slice::from_ref(zt))?);
        let eps = self.net.forward(&mut g, &self.store, z, &[t], &cv)?;
        Ok(LatentCode::from_batch_tensor(g.value(eps))?.remove(0))
    }

    /// Image conditioning resolved to tokens once, so sampling loops do not
    /// re-run the token encoder.
    pub fn resolve_tokens(&self, image: &ImageCondition) -> Result<ImageCondition> {
        match image {
            ImageCondition::Image(img) => Ok(ImageCondition::Tokens(
                self.net.token_encoder.encode(&self.store, img)?,
            )),
            t => Ok(t.clone()),
        }
    }

    /// DDIM sample in VQ-VAE latent units.
    pub fn sample(&self, cond: &Condition<'_>, t_inf: usize, seed: u64) -> Result<LatentCode> {
        let resolved = cond.image.map(|i| self.resolve_tokens(i)).transpose()?;
        let cond = Condition {
            image: resolved.as_ref(),
            partial: cond.partial,
        };
        let cfg = &self.net.config;
        let mut denoise = |zt: &LatentCode, t: usize| self.predict_eps(zt, t, &cond);
        let z = ddim_sample(
            &mut denoise,
            cfg.latent_dim,
            cfg.latent_side,
            &self.schedule,
            t_inf,
            seed,
        )?;
        let inv = 1.0 / self.latent_scale;
        LatentCode::new(
            z.channels,
            z.side,
            z.values.iter().map(|v| v * inv).collect(),
        )
    }
}

/// One training triple: complete shape, its partial scan, and optionally
/// the image conditioning rendered from the scan pose.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub complete: TsdfGrid,
    pub partial: TsdfGrid,
    pub image: Option<ImageCondition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub token_dropout: f64,
    pub partial_dropout: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            lr: 2.5e-5,
            token_dropout: 0.1,
            partial_dropout: 0.1,
            log_every: 100,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl DiffusionTrainConfig {
    /// Short single-core schedules need a larger step size.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLogEntry {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub enum DiffusionEvent<'a> {
    Log(&'a DiffusionLogEntry),
    Checkpoint {
        step: usize,
        model: &'a DiffusionModel,
    },
}

/// Quantised VQ-VAE latents of the complete shapes.
pub fn encode_targets(vqvae: &VqVae, examples: &[TrainingExample]) -> Result<Vec<LatentCode>> {
    examples
        .iter()
        .map(|e| Ok(vqvae.quantize(&vqvae.encode(&e.complete)?)?.0))
        .collect()
}

/// `1 / std` over all latent values (1 when degenerate).
pub fn fit_latent_scale(latents: &[LatentCode]) -> f32 {
    let vals: Vec<f64> = latents
        .iter()
        .flat_map(|l| l.values.iter().map(|&v| v as f64))
        .collect();
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 1e-12 {
        (1.0 / var.sqrt()) as f32
    } else {
        1.0
    }
}

/// Minimises the noise-prediction loss on latents of `examples` encoded by
/// the frozen `vqvae`. The latent scale is refit from the corpus.
pub fn train_diffusion(
    model: &mut DiffusionModel,
    vqvae: &VqVae,
    examples: &[TrainingExample],
    cfg: &DiffusionTrainConfig,
    mut on_event: impl FnMut(DiffusionEvent<'_>) -> Result<()>,
) -> Result<Vec<DiffusionLogEntry>> {
    if examples.is_empty() || cfg.batch_size == 0 {
        return Err(validation(
            "training needs examples and a positive batch size",
        ));
    }
    let dc = model.net.config.clone();
    let vc = vqvae.config();
    if vc.latent_dim != dc.latent_dim || vc.latent_side() != dc.latent_side {
        return Err(validation(format!(
            "autoencoder latent {}x{}^3 does not match denoiser {}x{}^3",
            vc.latent_dim,
            vc.latent_side(),
            dc.latent_dim,
            dc.latent_side
        )));
    }
    let latents = encode_targets(vqvae, examples)?;
    model.latent_scale = fit_latent_scale(&latents);
    let scale = model.latent_scale;
    let latents: Vec<LatentCode> = latents
        .into_iter()
        .map(|l| LatentCode {
            values: l.values.iter().map(|v| v * scale).collect(),
            ..l
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let order: Vec<usize> = (0..examples.len()).collect();
    let steps_t = model.schedule.steps();
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| *order.choose(&mut rng).unwrap())
            .collect();
        let ts: Vec<usize> = batch.iter().map(|_| rng.gen_range(1..=steps_t)).collect();
        let mut zts = Vec::with_capacity(batch.len());
        let mut epss = Vec::with_capacity(batch.len());
        for (&i, &t) in batch.iter().zip(&ts) {
            let eps = gaussian_latent(dc.latent_dim, dc.latent_side, &mut rng);
            zts.push(forward_sample(&latents[i], t, &eps, &model.schedule)?);
            epss.push(eps);
        }
        let keep_image: Vec<bool> = batch
            .iter()
            .map(|_| !rng.gen_bool(cfg.token_dropout))
            .collect();
        let keep_partial: Vec<bool> = batch
            .iter()
            .map(|_| !rng.gen_bool(cfg.partial_dropout))
            .collect();
        let conds: Vec<Condition<'_>> = batch
            .iter()
            .map(|&i| Condition {
                image: examples[i].image.as_ref(),
                partial: Some(&examples[i].partial),
            })
            .collect();

        let mut g = Graph::<f32>::new();
        let cv = model.cond_vars(&mut g, &model.store, &conds, &keep_image, &keep_partial)?;
        let z = g.constant(LatentCode::batch_tensor(&zts)?);
        let target = g.constant(LatentCode::batch_tensor::<f32>(&epss)?);
        let pred = model.net.forward(&mut g, &model.store, z, &ts, &cv)?;
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "diffusion loss".into(),
            });
        }
        let grads = g.backward_scalar(loss)?.param_grads(&g);
        if !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                what: "gradient".into(),
            });
        }
        opt.step(&mut model.store, &grads);
        let entry = DiffusionLogEntry {
            step,
            loss: value,
            grad_norm: grads.global_norm(),
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            on_event(DiffusionEvent::Log(&entry))?;
        }
        log.push(entry);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_event(DiffusionEvent::Checkpoint {
                step: step + 1,
                model,
            })?;
        }
    }
    Ok(log)
}

/// Tensor view of a latent batch, exposed for gradient tooling.
pub fn latent_batch<T: Real>(codes: &[LatentCode]) -> Result<Tensor<T>> {
    LatentCode::batch_tensor(codes)
}
