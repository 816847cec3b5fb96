//! Image feature tokens: the token file format and the desk-scale image
//! encoder that stands in for a frozen CLIP network.

use std::path::Path;

use rand::Rng;
use shapediff_nn::layers::Conv;
use shapediff_nn::{ConvGeom, Graph, ParamStore, Real, Tensor, Var};

use crate::error::{format_err, io_err, validation, Error, Result};
use crate::render::NormalImage;

const MAGIC: &[u8; 4] = b"FTOK";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// `M x d` token matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTokens {
    pub count: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureTokens {
    pub fn new(count: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(validation("token count and width must be positive"));
        }
        if values.len() != count * dim {
            return Err(validation(format!(
                "{count}x{dim} tokens need {} values, got {}",
                count * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("tokens contain non-finite values"));
        }
        Ok(Self { count, dim, values })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.count as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err(
                "header",
                format!(
                    "truncated: expected at least {HEADER_LEN} bytes, got {}",
                    bytes.len()
                ),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err(
                "magic",
                format!("expected \"FTOK\", found {:?}", &bytes[..4]),
            ));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        if word(4) != VERSION as usize {
            return Err(Error::Version(format!(
                "token file version {}, supported {VERSION}",
                word(4)
            )));
        }
        let (count, dim) = (word(8), word(12));
        let expected = HEADER_LEN + 4 * count * dim;
        if bytes.len() != expected {
            return Err(format_err(
                "values",
                format!(
                    "expected {expected} bytes for {count}x{dim} tokens, got {}",
                    bytes.len()
                ),
            ));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(count, dim, values).map_err(|e| format_err("values", e.to_string()))
    }

    /// Checks the declared extents against a configuration.
    pub fn expect_extents(&self, count: usize, dim: usize) -> Result<()> {
        if (self.count, self.dim) != (count, dim) {
            return Err(validation(format!(
                "token file is {}x{}, configuration expects {count}x{dim}",
                self.count, self.dim
            )));
        }
        Ok(())
    }
}

pub fn save_tokens(tokens: &FeatureTokens, path: &Path) -> Result<()> {
    std::fs::write(path, tokens.to_bytes()).map_err(|e| io_err(path, e))
}

pub fn load_tokens(path: &Path) -> Result<FeatureTokens> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    FeatureTokens::from_bytes(&bytes)
}

/// Stacks token matrices into `[N, M, d]`.
pub fn tokens_tensor<T: Real>(tokens: &[&FeatureTokens]) -> Result<Tensor<T>> {
    let first = tokens
        .first()
        .ok_or_else(|| validation("empty token batch"))?;
    if tokens
        .iter()
        .any(|t| (t.count, t.dim) != (first.count, first.dim))
    {
        return Err(validation("token batch has mixed extents"));
    }
    let data = tokens
        .iter()
        .flat_map(|t| t.values.iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    Ok(Tensor::from_vec(
        &[tokens.len(), first.count, first.dim],
        data,
    )?)
}

/// Strided CNN over normal images: three 4x4 stride-2 stages turn an
/// `8k x 8k` image into a `k x k` map whose cells become tokens, and one
/// whole-map convolution adds a global token, so `M = k^2 + 1`.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    pub image_size: usize,
    pub stages: Vec<Conv>,
    pub global: Conv,
}

impl TokenEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        image_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if image_size == 0 || image_size % 8 != 0 {
            return Err(validation(format!(
                "token image size {image_size} is not a multiple of 8"
            )));
        }
        let down = ConvGeom::planar(4, 2, 1);
        let w = [16.min(dim), 32.min(dim), dim];
        let stages = vec![
            Conv::new(store, "tok.conv0", 3, w[0], down, rng),
            Conv::new(store, "tok.conv1", w[0], w[1], down, rng),
            Conv::new(store, "tok.conv2", w[1], w[2], down, rng),
        ];
        let k = image_size / 8;
        let global = Conv::new(
            store,
            "tok.global",
            dim,
            dim,
            ConvGeom::planar(k, 1, 0),
            rng,
        );
        Ok(Self {
            image_size,
            stages,
            global,
        })
    }

    pub fn token_count(&self) -> usize {
        (self.image_size / 8).pow(2) + 1
    }

    /// `[N, 3, 1, H, W]` images to `[N, M, d]` tokens.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<Var> {
        let mut h = images;
        for (i, c) in self.stages.iter().enumerate() {
            h = c.forward(g, store, h)?;
            if i + 1 < self.stages.len() {
                h = g.silu(h);
            }
        }
        let global = self.global.forward(g, store, h)?;
        let cells = g.channels_last(h)?;
        let global = g.channels_last(global)?;
        Ok(g.concat_channels(cells, global)?)
    }

    /// Tokens for a single image.
    pub fn encode(&self, store: &ParamStore<f32>, image: &NormalImage) -> Result<FeatureTokens> {
        let mut g = Graph::new();
        let x = g.constant(image_tensor(&[image], self.image_size)?);
        let t = self.forward(&mut g, store, x)?;
        let v = g.value(t);
        FeatureTokens::new(v.dim(1), v.dim(2), v.data().to_vec())
    }
}

/// Stacks square normal images of side `size` into `[N, 3, 1, size, size]`.
pub fn image_tensor<T: Real>(images: &[&NormalImage], size: usize) -> Result<Tensor<T>> {
    if images.iter().any(|i| i.width != size || i.height != size) {
        return Err(validation(format!(
            "token encoder expects {size}x{size} images"
        )));
    }
    crate::vqvae::normals_tensor(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_reject_bad_headers() {
        let t = FeatureTokens::new(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1e-3, 7.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"FTOK");
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(FeatureTokens::from_bytes(&b).unwrap(), t);
        assert!(matches!(
            FeatureTokens::from_bytes(&b[..30]),
            Err(Error::Format { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(FeatureTokens::from_bytes(&bad).is_err());
        let mut v2 = b;
        v2[4] = 2;
        assert!(matches!(
            FeatureTokens::from_bytes(&v2),
            Err(Error::Version(_))
        ));
        assert!(t.expect_extents(2, 3).is_ok());
        assert!(t.expect_extents(50, 3).is_err());
    }
}
