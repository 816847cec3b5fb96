//! U-Net building blocks: timestep embedding, time-conditioned residual
//! blocks and spatial transformers with cross-attention.

use rand::Rng;
use shapediff_nn::layers::{Conv, GroupNorm, LayerNorm, Linear};
use shapediff_nn::{ConvGeom, Graph, ParamStore, Real, Tensor, Var};

use crate::error::Result;

/// `[sin(t f_0), .., sin(t f_{h-1}), cos(t f_0), ..]` with geometric
/// frequencies `f_i = 10000^(-i/h)`.
pub fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

/// Sinusoidal encoding followed by a 2-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            dim,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, true, rng),
        }
    }

    /// `[N, dim]` embeddings of the batch timesteps.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ts: &[usize],
    ) -> Result<Var> {
        let data = ts
            .iter()
            .flat_map(|&t| sinusoidal(t, self.dim))
            .map(T::from_f64_lossy)
            .collect();
        let x = g.constant(Tensor::from_vec(&[ts.len(), self.dim], data)?);
        let h = self.fc1.forward(g, store, x)?;
        let h = g.silu(h);
        Ok(self.fc2.forward(g, store, h)?)
    }
}

/// `shortcut(x) + conv(silu(gn(conv(silu(gn(x))) + W temb)))`.
#[derive(Clone, Debug)]
pub struct TimeResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl TimeResBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let k3 = ConvGeom::cube(3, 1, 1);
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, k3, rng),
            time: Linear::new(store, &format!("{name}.time"), time_dim, cout, true, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, k3, rng),
            shortcut: (cin != cout).then(|| {
                Conv::new(
                    store,
                    &format!("{name}.shortcut"),
                    cin,
                    cout,
                    ConvGeom::cube(1, 1, 0),
                    rng,
                )
            }),
        }
    }

    /// `temb` is the already activated `[N, time_dim]` embedding.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, store, h)?;
        let tb = self.time.forward(g, store, temb)?;
        let h = g.add_channel_bias(h, tb)?;
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

/// Single-head attention sublayer; keys and values come from `context`
/// (width `ctx_dim`) or, for self-attention, from the queries' input.
#[derive(Clone, Debug)]
pub struct Attention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        ctx_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            q: Linear::new(store, &format!("{name}.q"), width, width, false, rng),
            k: Linear::new(store, &format!("{name}.k"), ctx_dim, width, false, rng),
            v: Linear::new(store, &format!("{name}.v"), ctx_dim, width, false, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
        }
    }

    /// `h + out(attn(q(ln h), k(ctx), v(ctx)))`; `ctx = None` means self.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        ctx: Option<Var>,
    ) -> Result<Var> {
        let a = self.norm.forward(g, store, h)?;
        let c = ctx.unwrap_or(a);
        let q = self.q.forward(g, store, a)?;
        let k = self.k.forward(g, store, c)?;
        let v = self.v.forward(g, store, c)?;
        let o = g.attention(q, k, v)?;
        let o = self.out.forward(g, store, o)?;
        Ok(g.add(h, o)?)
    }
}

/// Group norm, token projection, self-attention, cross-attention to the
/// conditioning tokens, feed-forward, projection back, outer residual.
#[derive(Clone, Debug)]
pub struct SpatialTransformer {
    pub norm: GroupNorm,
    pub proj_in: Linear,
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub proj_out: Linear,
}

impl SpatialTransformer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        token_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), width, groups),
            proj_in: Linear::new(store, &format!("{name}.proj_in"), width, width, true, rng),
            self_attn: Attention::new(store, &format!("{name}.self"), width, width, rng),
            cross_attn: Attention::new(store, &format!("{name}.cross"), width, token_dim, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), width),
            ff1: Linear::new(store, &format!("{name}.ff1"), width, 2 * width, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * width, width, true, rng),
            proj_out: Linear::new(store, &format!("{name}.proj_out"), width, width, true, rng),
        }
    }

    /// `x` is `[N, C, s, s, s]`, `context` is `[N, M, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        context: Var,
    ) -> Result<Var> {
        let spatial = g.shape(x)[2..].to_vec();
        let h = self.norm.forward(g, store, x)?;
        let h = g.channels_last(h)?;
        let h = self.proj_in.forward(g, store, h)?;
        let h = self.self_attn.forward(g, store, h, None)?;
        let h = self.cross_attn.forward(g, store, h, Some(context))?;
        let a = self.ff_norm.forward(g, store, h)?;
        let a = self.ff1.forward(g, store, a)?;
        let a = g.silu(a);
        let a = self.ff2.forward(g, store, a)?;
        let h = g.add(h, a)?;
        let h = self.proj_out.forward(g, store, h)?;
        let h = g.channels_first(h, &spatial)?;
        Ok(g.add(x, h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_codes_are_distinct() {
        let codes: Vec<Vec<f64>> = (1..=1000).map(|t| sinusoidal(t, 64)).collect();
        for i in 0..codes.len() {
            for j in i + 1..codes.len() {
                let d: f64 = codes[i]
                    .iter()
                    .zip(&codes[j])
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(d > 1e-6, "t = {} and {}", i + 1, j + 1);
            }
        }
    }
}
