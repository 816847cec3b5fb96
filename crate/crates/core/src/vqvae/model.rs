//! Encoder / decoder networks and the latent code type.

use rand::Rng;
use serde::{Deserialize, Serialize};
use shapediff_nn::layers::{Conv, GroupNorm};
use shapediff_nn::{ConvGeom, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::error::{validation, Result};
use crate::grid::TsdfGrid;

/// Architecture and loss hyperparameters of the autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqVaeConfig {
    pub resolution: usize,
    pub thresh: f32,
    /// Channel widths of the three resolution levels (S, S/2, S/4).
    pub widths: [usize; 3],
    /// Residual blocks per level.
    pub res_blocks: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub groups: usize,
    pub beta: f64,
    pub gamma_r: f64,
    pub gamma_a: f64,
}

impl VqVaeConfig {
    /// Reference configuration: 64^3 input, 16^3 x 3 latent, 16384 codes.
    pub fn reference() -> Self {
        Self {
            resolution: 64,
            thresh: 3.0,
            widths: [32, 64, 128],
            res_blocks: 1,
            latent_dim: 3,
            codebook_size: 16384,
            groups: 8,
            beta: 0.5,
            gamma_r: 0.4,
            gamma_a: 0.4,
        }
    }

    /// Desk configuration: 32^3 input, 8^3 latent.
    pub fn desk() -> Self {
        Self {
            resolution: 32,
            widths: [4, 8, 16],
            codebook_size: 512,
            ..Self::reference()
        }
    }

    pub fn latent_side(&self) -> usize {
        self.resolution / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return Err(validation(format!(
                "resolution {} must be a positive multiple of 4",
                self.resolution
            )));
        }
        if self.latent_dim == 0 || self.codebook_size == 0 || self.widths.contains(&0) {
            return Err(validation(
                "latent_dim, codebook_size and widths must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(validation(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.gamma_r >= 0.0 && self.gamma_a >= 0.0) {
            return Err(validation("gamma_r and gamma_a must be nonnegative"));
        }
        if !(self.thresh > 0.0) {
            return Err(validation("thresh must be positive"));
        }
        Ok(())
    }
}

/// `D x S_l^3` latent tensor, channel-major with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub channels: usize,
    pub side: usize,
    pub values: Vec<f32>,
}

impl LatentCode {
    pub fn new(channels: usize, side: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * side.pow(3) {
            return Err(validation(format!(
                "latent {channels}x{side}^3 needs {} values, got {}",
                channels * side.pow(3),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("latent contains non-finite values"));
        }
        Ok(Self {
            channels,
            side,
            values,
        })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        Self {
            channels,
            side,
            values: vec![0.0; channels * side.pow(3)],
        }
    }

    pub fn sites(&self) -> usize {
        self.side.pow(3)
    }

    pub fn same_extent(&self, other: &Self) -> bool {
        self.channels == other.channels && self.side == other.side
    }

    /// Stacks codes into a `[N, D, s, s, s]` tensor.
    pub fn batch_tensor<T: Real>(codes: &[LatentCode]) -> Result<Tensor<T>> {
        let first = codes
            .first()
            .ok_or_else(|| validation("empty latent batch"))?;
        if codes.iter().any(|c| !c.same_extent(first)) {
            return Err(validation("latent batch has mixed extents"));
        }
        let data = codes
            .iter()
            .flat_map(|c| c.values.iter().map(|&v| T::from_f64_lossy(v as f64)))
            .collect();
        let s = first.side;
        Ok(Tensor::from_vec(
            &[codes.len(), first.channels, s, s, s],
            data,
        )?)
    }

    pub fn from_batch_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<LatentCode>> {
        let sh = t.shape();
        if sh.len() != 5 || sh[2] != sh[3] || sh[3] != sh[4] {
            return Err(validation(format!("not a latent batch: {sh:?}")));
        }
        (0..sh[0])
            .map(|i| {
                let vals = t.batch_slice(i).iter().map(|v| v.as_f64() as f32).collect();
                LatentCode::new(sh[1], sh[2], vals)
            })
            .collect()
    }
}

/// Pre-activation residual block: `x + conv(silu(gn(conv(silu(gn(x))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv,
    pub norm2: GroupNorm,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let k3 = ConvGeom::cube(3, 1, 1);
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), channels, groups),
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, k3, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), channels, groups),
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, k3, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv_in: Conv,
    pub levels: Vec<Vec<ResBlock>>,
    pub downs: Vec<Conv>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv,
}

impl Encoder {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &VqVaeConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.widths;
        let conv_in = Conv::new(store, "enc.conv_in", 1, w[0], ConvGeom::cube(3, 1, 1), rng);
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        for l in 0..3 {
            levels.push(
                (0..cfg.res_blocks)
                    .map(|b| {
                        ResBlock::new(
                            store,
                            &format!("enc.level{l}.res{b}"),
                            w[l],
                            cfg.groups,
                            rng,
                        )
                    })
                    .collect(),
            );
            if l < 2 {
                downs.push(Conv::new(
                    store,
                    &format!("enc.down{l}"),
                    w[l],
                    w[l + 1],
                    ConvGeom::cube(3, 2, 1),
                    rng,
                ));
            }
        }
        let norm_out = GroupNorm::new(store, "enc.norm_out", w[2], cfg.groups);
        let conv_out = Conv::new(
            store,
            "enc.conv_out",
            w[2],
            cfg.latent_dim,
            ConvGeom::cube(1, 1, 0),
            rng,
        );
        Self {
            conv_in,
            levels,
            downs,
            norm_out,
            conv_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = self.conv_in.forward(g, store, x)?;
        for (l, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                h = b.forward(g, store, h)?;
            }
            if let Some(down) = self.downs.get(l) {
                h = down.forward(g, store, h)?;
            }
        }
        let h = self.norm_out.forward(g, store, h)?;
        let h = g.silu(h);
        Ok(self.conv_out.forward(g, store, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub conv_in: Conv,
    /// Coarsest level first.
    pub levels: Vec<Vec<ResBlock>>,
    pub ups: Vec<Conv>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv,
}

impl Decoder {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &VqVaeConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.widths;
        let k3 = ConvGeom::cube(3, 1, 1);
        let conv_in = Conv::new(store, "dec.conv_in", cfg.latent_dim, w[2], k3, rng);
        let mut levels = Vec::new();
        let mut ups = Vec::new();
        for (i, l) in (0..3).rev().enumerate() {
            levels.push(
                (0..cfg.res_blocks)
                    .map(|b| {
                        ResBlock::new(
                            store,
                            &format!("dec.level{l}.res{b}"),
                            w[l],
                            cfg.groups,
                            rng,
                        )
                    })
                    .collect(),
            );
            if l > 0 {
                ups.push(Conv::new(
                    store,
                    &format!("dec.up{i}"),
                    w[l],
                    w[l - 1],
                    k3,
                    rng,
                ));
            }
        }
        let norm_out = GroupNorm::new(store, "dec.norm_out", w[0], cfg.groups);
        let conv_out = Conv::new(store, "dec.conv_out", w[0], 1, k3, rng);
        Self {
            conv_in,
            levels,
            ups,
            norm_out,
            conv_out,
        }
    }

    /// Returns distances in voxel units, bounded by `thresh` through tanh.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        thresh: f64,
    ) -> Result<Var> {
        let mut h = self.conv_in.forward(g, store, z)?;
        for (i, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                h = b.forward(g, store, h)?;
            }
            if let Some(up) = self.ups.get(i) {
                h = g.upsample2x(h)?;
                h = up.forward(g, store, h)?;
            }
        }
        let h = self.norm_out.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.conv_out.forward(g, store, h)?;
        let h = g.tanh(h);
        Ok(g.scale(h, thresh))
    }
}

/// Layer structure of the autoencoder; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VqVaeNet {
    pub config: VqVaeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: ParamId,
}

impl VqVaeNet {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: VqVaeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, &config, rng);
        let decoder = Decoder::new(store, &config, rng);
        let book = shapediff_nn::params::uniform_init(
            &[config.codebook_size, config.latent_dim],
            -1.0,
            1.0,
            rng,
        );
        let codebook = store.add("codebook", book);
        Ok(Self {
            config,
            encoder,
            decoder,
            codebook,
        })
    }

    /// Network input `[N, 1, S, S, S]` with values divided by `thresh`.
    pub fn input_tensor<T: Real>(&self, grids: &[&TsdfGrid]) -> Result<Tensor<T>> {
        let s = self.config.resolution;
        let mut data = Vec::with_capacity(grids.len() * s.pow(3));
        for g in grids {
            if g.resolution() != s {
                return Err(validation(format!(
                    "grid resolution {} does not match model resolution {s}",
                    g.resolution()
                )));
            }
            let t = g.thresh() as f64;
            data.extend(g.values().iter().map(|&v| T::from_f64_lossy(v as f64 / t)));
        }
        Ok(Tensor::from_vec(&[grids.len(), 1, s, s, s], data)?)
    }

    /// Parameters of the encoder and decoder (everything but the codebook).
    pub fn network_params<T: Real>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.ids().filter(|&id| id != self.codebook).collect()
    }
}
