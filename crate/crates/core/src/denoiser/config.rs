use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Architecture of the noise predictor and its control branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub latent_side: usize,
    /// Channel widths per U-Net level; level `l` works at `latent_side / 2^l`.
    pub widths: Vec<usize>,
    /// Spatial sides at which encoder and decoder levels carry a spatial
    /// transformer. The middle block always has one.
    pub attention_resolutions: Vec<usize>,
    pub time_dim: usize,
    pub token_count: usize,
    pub token_dim: usize,
    pub groups: usize,
    /// Side of the partial-scan grid fed to the control encoder.
    pub grid_resolution: usize,
    /// Side of the normal images fed to the token encoder.
    pub token_image_size: usize,
}

impl DenoiserConfig {
    /// Reference U-Net over the 16^3 latent.
    pub fn reference() -> Self {
        Self {
            latent_dim: 3,
            latent_side: 16,
            widths: vec![64, 128, 256],
            attention_resolutions: vec![4],
            time_dim: 128,
            token_count: 50,
            token_dim: 768,
            groups: 8,
            grid_resolution: 64,
            token_image_size: 56,
        }
    }

    /// Desk U-Net over the 8^3 latent, attention at 4^3 and 2^3.
    pub fn desk() -> Self {
        Self {
            latent_side: 8,
            widths: vec![16, 32, 64],
            attention_resolutions: vec![2, 4],
            time_dim: 64,
            token_dim: 64,
            grid_resolution: 32,
            ..Self::reference()
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn side_at(&self, level: usize) -> usize {
        self.latent_side >> level
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(validation("denoiser widths must be nonempty and positive"));
        }
        let coarsest = self.latent_side >> (self.levels() - 1);
        if coarsest == 0 || coarsest << (self.levels() - 1) != self.latent_side {
            return Err(validation(format!(
                "latent side {} cannot be halved {} times",
                self.latent_side,
                self.levels() - 1
            )));
        }
        for &r in &self.attention_resolutions {
            if r == 0
                || self.latent_side % r != 0
                || !(0..self.levels()).any(|l| self.side_at(l) == r)
            {
                return Err(validation(format!(
                    "attention resolution {r} is not a level of the {}^3 latent",
                    self.latent_side
                )));
            }
        }
        if self.grid_resolution != 4 * self.latent_side {
            return Err(validation(format!(
                "partial grids of side {} do not reduce to the {}^3 latent by two halvings",
                self.grid_resolution, self.latent_side
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(validation("time_dim must be positive and even"));
        }
        if self.token_count == 0 || self.token_dim == 0 || self.latent_dim == 0 {
            return Err(validation("token extents and latent_dim must be positive"));
        }
        let cells = self.token_image_size / 8;
        if self.token_image_size % 8 != 0 || self.token_count != cells * cells + 1 {
            return Err(validation(format!(
                "{} tokens cannot come from {}x{} images ({} cells plus one global token)",
                self.token_count,
                self.token_image_size,
                self.token_image_size,
                cells * cells
            )));
        }
        Ok(())
    }
}
