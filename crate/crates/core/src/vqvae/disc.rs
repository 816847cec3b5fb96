//! Patch discriminator on rendered normal images.

use rand::Rng;
use shapediff_nn::layers::Conv;
use shapediff_nn::{ConvGeom, Graph, ParamStore, Real, Tensor, Var};

use crate::error::{validation, Result};
use crate::render::NormalImage;

const SLOPE: f64 = 0.2;

/// Four planar convolutions: three stride-2 4x4 stages with LeakyReLU and a
/// 3x3 head producing one logit per patch.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub layers: Vec<Conv>,
}

impl PatchDiscriminator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let down = ConvGeom::planar(4, 2, 1);
        let layers = vec![
            Conv::new(store, "disc.conv0", 3, width, down, rng),
            Conv::new(store, "disc.conv1", width, 2 * width, down, rng),
            Conv::new(store, "disc.conv2", 2 * width, 4 * width, down, rng),
            Conv::new(
                store,
                "disc.head",
                4 * width,
                1,
                ConvGeom::planar(3, 1, 1),
                rng,
            ),
        ];
        Self { layers }
    }

    /// Patch logits for `[N, 3, 1, H, W]` normal images.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, SLOPE);
            }
        }
        Ok(h)
    }
}

/// Stacks normal images into `[N, 3, 1, H, W]`.
pub fn normals_tensor<T: Real>(images: &[&NormalImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| validation("no normal images"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(validation("normal images differ in size"));
        }
        data.extend(
            img.to_planar()
                .into_iter()
                .map(|v| T::from_f64_lossy(v as f64)),
        );
    }
    Ok(Tensor::from_vec(&[images.len(), 3, 1, h, w], data)?)
}

/// Discriminator objective `-(mean log D(real) + mean log(1 - D(fake)))`,
/// i.e. the negated adversarial loss, minimised by the discriminator.
pub fn discriminator_loss<T: Real>(
    disc: &PatchDiscriminator,
    store: &ParamStore<T>,
    real: &[&NormalImage],
    fake: &[&NormalImage],
) -> Result<(f64, shapediff_nn::ParamGrads<T>)> {
    let mut g = Graph::new();
    let r = g.constant(normals_tensor(real)?);
    let f = g.constant(normals_tensor(fake)?);
    let lr = disc.forward(&mut g, store, r)?;
    let lf = disc.forward(&mut g, store, f)?;
    let real_term = g.log_sigmoid(lr);
    let real_term = g.mean(real_term);
    let neg = g.scale(lf, -1.0);
    let fake_term = g.log_sigmoid(neg);
    let fake_term = g.mean(fake_term);
    let sum = g.add(real_term, fake_term)?;
    let loss = g.scale(sum, -1.0);
    let value = g.scalar(loss).as_f64();
    let grads = g.backward_scalar(loss)?.param_grads(&g);
    Ok((value, grads))
}
