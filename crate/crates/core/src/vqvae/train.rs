//! Trained autoencoder wrapper and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shapediff_nn::{Adam, AdamConfig, Graph, ParamStore, Tensor};

use super::disc::{discriminator_loss, PatchDiscriminator};
use super::loss::{vqvae_loss, LossTerms, QuantMode, ViewTarget};
use super::model::{LatentCode, VqVaeConfig, VqVaeNet};
use super::quantize::{nearest_indices, Codebook};
use crate::error::{validation, Error, Result};
use crate::grid::{CameraPose, TsdfGrid};

/// Autoencoder weights (including the codebook) in training precision.
#[derive(Clone, Debug)]
pub struct VqVae {
    pub net: VqVaeNet,
    pub store: ParamStore<f32>,
}

impl VqVae {
    pub fn new(config: VqVaeConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = VqVaeNet::new(&mut store, config, &mut rng)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &VqVaeConfig {
        &self.net.config
    }

    pub fn codebook(&self) -> Codebook {
        let cfg = &self.net.config;
        Codebook::new(
            cfg.codebook_size,
            cfg.latent_dim,
            self.store.get(self.net.codebook).data().to_vec(),
        )
        .expect("codebook extents fixed at construction")
    }

    fn check_grid(&self, grid: &TsdfGrid) -> Result<()> {
        let s = grid.resolution();
        if s % 4 != 0 {
            return Err(validation(format!("resolution {s} is not divisible by 4")));
        }
        if s != self.net.config.resolution {
            return Err(validation(format!(
                "grid resolution {s} does not match model resolution {}",
                self.net.config.resolution
            )));
        }
        Ok(())
    }

    pub fn encode_batch(&self, grids: &[&TsdfGrid]) -> Result<Vec<LatentCode>> {
        for g in grids {
            self.check_grid(g)?;
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(self.net.input_tensor(grids)?);
        let z = self.net.encoder.forward(&mut g, &self.store, x)?;
        LatentCode::from_batch_tensor(g.value(z))
    }

    pub fn encode(&self, grid: &TsdfGrid) -> Result<LatentCode> {
        Ok(self.encode_batch(&[grid])?.remove(0))
    }

    pub fn quantize(&self, z: &LatentCode) -> Result<(LatentCode, Vec<usize>)> {
        super::quantize::quantize(z, &self.codebook())
    }

    pub fn decode_batch(&self, codes: &[LatentCode]) -> Result<Vec<TsdfGrid>> {
        let cfg = &self.net.config;
        if codes
            .iter()
            .any(|c| c.channels != cfg.latent_dim || c.side != cfg.latent_side())
        {
            return Err(validation(format!(
                "latent extents must be {}x{}^3",
                cfg.latent_dim,
                cfg.latent_side()
            )));
        }
        let mut g = Graph::<f32>::new();
        let z = g.constant(LatentCode::batch_tensor(codes)?);
        let x = self
            .net
            .decoder
            .forward(&mut g, &self.store, z, cfg.thresh as f64)?;
        let out = g.value(x);
        (0..codes.len())
            .map(|i| {
                TsdfGrid::from_unclamped(cfg.resolution, cfg.thresh, out.batch_slice(i).to_vec())
            })
            .collect()
    }

    pub fn decode(&self, zq: &LatentCode) -> Result<TsdfGrid> {
        Ok(self.decode_batch(std::slice::from_ref(zq))?.remove(0))
    }

    /// `D(Q(E(x)))`.
    pub fn reconstruct(&self, grid: &TsdfGrid) -> Result<TsdfGrid> {
        let z = self.encode(grid)?;
        let (zq, _) = self.quantize(&z)?;
        self.decode(&zq)
    }

    /// Codebook indices chosen for each grid.
    pub fn code_indices(&self, grids: &[&TsdfGrid]) -> Result<Vec<usize>> {
        let codes = self.encode_batch(grids)?;
        let t = LatentCode::batch_tensor::<f32>(&codes)?;
        Ok(nearest_indices(
            t.data(),
            codes.len(),
            self.net.config.latent_dim,
            self.store.get(self.net.codebook).data(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqVaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub disc_width: usize,
    /// Side of the square supervision renders.
    pub image_size: usize,
    /// 1 = one fixed view per step; 2 = one fixed plus one random view.
    pub views_per_step: usize,
    pub dead_code_steps: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for VqVaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            lr: 1e-4,
            disc_lr: 1e-4,
            disc_width: 8,
            image_size: 32,
            views_per_step: 2,
            dead_code_steps: 500,
            log_every: 50,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl VqVaeTrainConfig {
    /// Single-core desk runs: a tenfold learning rate compensates for the
    /// short schedule and the batch size of one.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            disc_lr: 1e-3,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub commit: f64,
    pub codebook: f64,
    pub render2d: f64,
    pub adversarial: f64,
    pub disc: Option<f64>,
    pub reseeded: usize,
}

impl TrainLogEntry {
    fn new(step: usize, t: LossTerms, disc: Option<f64>, reseeded: usize) -> Self {
        Self {
            step,
            total: t.total,
            recon: t.recon,
            commit: t.commit,
            codebook: t.codebook,
            render2d: t.render2d,
            adversarial: t.adversarial,
            disc,
            reseeded,
        }
    }
}

/// Progress notifications; returning an error aborts training.
pub enum TrainEvent<'a> {
    Log(&'a TrainLogEntry),
    Checkpoint { step: usize, model: &'a VqVae },
}

/// Optimises `model` on `corpus` in place and returns the loss log.
pub fn train_vqvae(
    model: &mut VqVae,
    corpus: &[TsdfGrid],
    cfg: &VqVaeTrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<TrainLogEntry>> {
    if corpus.is_empty() {
        return Err(validation("training corpus is empty"));
    }
    if cfg.batch_size == 0 || !(1..=2).contains(&cfg.views_per_step) {
        return Err(validation(
            "batch_size must be positive and views_per_step 1 or 2",
        ));
    }
    for g in corpus {
        model.check_grid(g)?;
    }
    let net_cfg = model.net.config.clone();
    let s = net_cfg.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let use_2d = net_cfg.gamma_r > 0.0 || net_cfg.gamma_a > 0.0;
    let fixed = CameraPose::fixed_views(s, cfg.image_size);
    let fixed_targets: Vec<Vec<ViewTarget>> = if use_2d {
        corpus
            .iter()
            .map(|g| fixed.iter().map(|p| ViewTarget::render(g, *p)).collect())
            .collect()
    } else {
        Vec::new()
    };

    let mut disc_store = ParamStore::<f32>::new();
    let disc = (net_cfg.gamma_a > 0.0)
        .then(|| PatchDiscriminator::new(&mut disc_store, cfg.disc_width, &mut rng));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut disc_opt = Adam::new(AdamConfig::with_lr(cfg.disc_lr));
    let mut last_used = vec![0usize; net_cfg.codebook_size];
    let mut log = Vec::new();
    let order: Vec<usize> = (0..corpus.len()).collect();

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| *order.choose(&mut rng).unwrap())
            .collect();
        let grids: Vec<&TsdfGrid> = batch.iter().map(|&i| &corpus[i]).collect();
        let targets: Vec<Vec<ViewTarget>> = if use_2d {
            let random_pose = (cfg.views_per_step == 2).then(|| {
                CameraPose::orbit(s, rng.gen_range(0.0..360.0), 20.0, 1.6, cfg.image_size)
            });
            batch
                .iter()
                .map(|&i| {
                    let mut v = vec![fixed_targets[i][step % fixed.len()].clone()];
                    if let Some(p) = random_pose {
                        v.push(ViewTarget::render(&corpus[i], p));
                    }
                    v
                })
                .collect()
        } else {
            Vec::new()
        };

        let out = vqvae_loss(
            &model.net,
            &model.store,
            &grids,
            &targets,
            disc.as_ref().map(|d| (d, &disc_store)),
            &QuantMode::Nearest,
            true,
        )?;
        if !out.terms.total.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "total loss".into(),
            });
        }
        let grads = out.grads.as_ref().expect("requested gradients");
        if !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                what: "gradient".into(),
            });
        }
        opt.step(&mut model.store, grads);

        let mut disc_value = None;
        if let Some(d) = &disc {
            let real: Vec<_> = targets
                .iter()
                .flat_map(|v| v.iter().map(|t| &t.normals))
                .collect();
            let fake: Vec<_> = out.renders.iter().map(|r| &r.normals).collect();
            let (value, dgrads) = discriminator_loss(d, &disc_store, &real, &fake)?;
            disc_opt.step(&mut disc_store, &dgrads);
            disc_value = Some(value);
        }

        for &j in &out.indices {
            last_used[j] = step;
        }
        let reseeded = reseed_dead_codes(
            model,
            &out.z,
            &mut last_used,
            step,
            cfg.dead_code_steps,
            &mut rng,
        );

        let entry = TrainLogEntry::new(step, out.terms, disc_value, reseeded);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            on_event(TrainEvent::Log(&entry))?;
        }
        log.push(entry);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_event(TrainEvent::Checkpoint {
                step: step + 1,
                model,
            })?;
        }
    }
    Ok(log)
}

/// Moves codebook rows unused for `patience` steps onto random encoder
/// outputs of the current batch.
fn reseed_dead_codes(
    model: &mut VqVae,
    z: &Tensor<f32>,
    last_used: &mut [usize],
    step: usize,
    patience: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    if patience == 0 {
        return 0;
    }
    let d = model.net.config.latent_dim;
    let n = z.dim(0);
    let sites = z.numel() / (n * d);
    let book = model.store.get_mut(model.net.codebook).data_mut();
    let mut count = 0;
    for (j, last) in last_used.iter_mut().enumerate() {
        if step >= *last + patience {
            let b = rng.gen_range(0..n);
            let l = rng.gen_range(0..sites);
            for c in 0..d {
                book[j * d + c] = z.data()[(b * d + c) * sites + l];
            }
            *last = step;
            count += 1;
        }
    }
    count
}
