//! Time-conditional U-Net noise predictor with cross-attention to image
//! tokens and a control branch fed by the partial scan.

use rand::Rng;
use shapediff_nn::layers::{Conv, GroupNorm};
use shapediff_nn::{ConvGeom, Graph, ParamId, ParamStore, Real, Tensor, Var};

use super::blocks::{SpatialTransformer, TimeEmbedding, TimeResBlock};
use super::config::DenoiserConfig;
use super::tokens::TokenEncoder;
use crate::error::{validation, Result};
use crate::grid::TsdfGrid;

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub res: TimeResBlock,
    pub attn: Option<SpatialTransformer>,
    pub down: Option<Conv>,
}

/// Input convolution plus the downsampling half of the U-Net. The control
/// branch holds a second instance initialised as a copy.
#[derive(Clone, Debug)]
pub struct UNetEncoder {
    pub conv_in: Conv,
    pub levels: Vec<EncoderLevel>,
}

impl UNetEncoder {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &DenoiserConfig,
        rng: &mut R,
    ) -> Self {
        let w = &cfg.widths;
        let conv_in = Conv::new(
            store,
            &format!("{prefix}.conv_in"),
            cfg.latent_dim,
            w[0],
            ConvGeom::cube(3, 1, 1),
            rng,
        );
        let levels = (0..cfg.levels())
            .map(|l| {
                let cin = if l == 0 { w[0] } else { w[l - 1] };
                let name = format!("{prefix}.level{l}");
                EncoderLevel {
                    res: TimeResBlock::new(
                        store,
                        &format!("{name}.res"),
                        cin,
                        w[l],
                        cfg.time_dim,
                        cfg.groups,
                        rng,
                    ),
                    attn: cfg
                        .attention_resolutions
                        .contains(&cfg.side_at(l))
                        .then(|| {
                            SpatialTransformer::new(
                                store,
                                &format!("{name}.attn"),
                                w[l],
                                cfg.token_dim,
                                cfg.groups,
                                rng,
                            )
                        }),
                    down: (l + 1 < cfg.levels()).then(|| {
                        Conv::new(
                            store,
                            &format!("{name}.down"),
                            w[l],
                            w[l],
                            ConvGeom::cube(3, 2, 1),
                            rng,
                        )
                    }),
                }
            })
            .collect();
        Self { conv_in, levels }
    }

    /// Runs the levels on an already embedded input; returns the coarsest
    /// features and the per-level skip features.
    fn forward_levels<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut h: Var,
        temb: Var,
        ctx: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            h = level.res.forward(g, store, h, temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(g, store, h, ctx)?;
            }
            skips.push(h);
            if let Some(d) = &level.down {
                h = d.forward(g, store, h)?;
            }
        }
        Ok((h, skips))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub res: TimeResBlock,
    pub attn: Option<SpatialTransformer>,
    pub up: Option<Conv>,
}

/// Partial-scan encoder `E_c`, the trainable encoder copy, and the
/// zero-initialised 1x1x1 projections `phi` onto the decoder skips.
#[derive(Clone, Debug)]
pub struct ControlBranch {
    pub hint: Vec<Conv>,
    pub encoder: UNetEncoder,
    pub phi: Vec<Conv>,
}

impl ControlBranch {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &DenoiserConfig,
        rng: &mut R,
    ) -> Self {
        let w0 = cfg.widths[0];
        let (a, b) = (8.min(w0), 16.min(w0));
        let hint = vec![
            Conv::new(store, "ctrl.hint0", 2, a, ConvGeom::cube(3, 1, 1), rng),
            Conv::new(store, "ctrl.hint1", a, b, ConvGeom::cube(3, 2, 1), rng),
            Conv::new(store, "ctrl.hint2", b, w0, ConvGeom::cube(3, 2, 1), rng),
            Conv::new(store, "ctrl.hint3", w0, w0, ConvGeom::cube(3, 1, 1), rng),
        ];
        let encoder = UNetEncoder::new(store, "ctrl.enc", cfg, rng);
        let phi = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                Conv::zeroed(
                    store,
                    &format!("ctrl.phi{l}"),
                    w,
                    w,
                    ConvGeom::cube(1, 1, 0),
                )
            })
            .collect();
        Self { hint, encoder, phi }
    }

    fn encode_hint<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, c: Var) -> Result<Var> {
        let mut h = c;
        for (i, conv) in self.hint.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            if i + 1 < self.hint.len() {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}

/// Conditioning inputs of one batch, already placed on the graph. Each
/// modality carries per-sample keep flags; dropped samples fall back to the
/// null token or to no control contribution.
#[derive(Clone, Debug, Default)]
pub struct CondVars {
    /// `[N, M, d]` tokens.
    pub tokens: Option<(Var, Vec<bool>)>,
    /// `[N, 2, S, S, S]` partial scans as (normalised value, known mask).
    pub partial: Option<(Var, Vec<bool>)>,
}

#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub time: TimeEmbedding,
    pub encoder: UNetEncoder,
    pub mid1: TimeResBlock,
    pub mid_attn: SpatialTransformer,
    pub mid2: TimeResBlock,
    pub decoder: Vec<DecoderLevel>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv,
    /// `[d, 1]`, so that a linear map of ones repeats it into any token count.
    pub null_token: ParamId,
    pub control: ControlBranch,
    pub token_encoder: TokenEncoder,
}

impl DenoiserNet {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: DenoiserConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let w = &cfg.widths;
        let top = *w.last().unwrap();
        let time = TimeEmbedding::new(store, "time", cfg.time_dim, rng);
        let encoder = UNetEncoder::new(store, "enc", cfg, rng);
        let mid1 = TimeResBlock::new(store, "mid.res1", top, top, cfg.time_dim, cfg.groups, rng);
        let mid_attn =
            SpatialTransformer::new(store, "mid.attn", top, cfg.token_dim, cfg.groups, rng);
        let mid2 = TimeResBlock::new(store, "mid.res2", top, top, cfg.time_dim, cfg.groups, rng);
        let decoder = (0..cfg.levels())
            .map(|l| {
                let name = format!("dec.level{l}");
                DecoderLevel {
                    res: TimeResBlock::new(
                        store,
                        &format!("{name}.res"),
                        2 * w[l],
                        w[l],
                        cfg.time_dim,
                        cfg.groups,
                        rng,
                    ),
                    attn: cfg
                        .attention_resolutions
                        .contains(&cfg.side_at(l))
                        .then(|| {
                            SpatialTransformer::new(
                                store,
                                &format!("{name}.attn"),
                                w[l],
                                cfg.token_dim,
                                cfg.groups,
                                rng,
                            )
                        }),
                    up: (l > 0).then(|| {
                        Conv::new(
                            store,
                            &format!("{name}.up"),
                            w[l],
                            w[l - 1],
                            ConvGeom::cube(3, 1, 1),
                            rng,
                        )
                    }),
                }
            })
            .collect();
        let norm_out = GroupNorm::new(store, "out.norm", w[0], cfg.groups);
        let conv_out = Conv::zeroed(
            store,
            "out.conv",
            w[0],
            cfg.latent_dim,
            ConvGeom::cube(3, 1, 1),
        );
        let null_token = store.add(
            "null_token",
            shapediff_nn::params::normal_init(&[cfg.token_dim, 1], 1.0, rng),
        );
        let control = ControlBranch::new(store, cfg, rng);
        copy_prefix(store, "enc.", "ctrl.enc.")?;
        let token_encoder = TokenEncoder::new(store, cfg.token_image_size, cfg.token_dim, rng)?;
        Ok(Self {
            config,
            time,
            encoder,
            mid1,
            mid_attn,
            mid2,
            decoder,
            norm_out,
            conv_out,
            null_token,
            control,
            token_encoder,
        })
    }

    /// `[n, m, d]` copies of the null token.
    fn null_tokens<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        n: usize,
        m: usize,
    ) -> Result<Var> {
        let ones = g.constant(Tensor::full(&[n, m, 1], T::one()));
        let w = g.param(store, self.null_token);
        Ok(g.linear(ones, w, None)?)
    }

    /// Predicted noise `[N, D, s, s, s]` for `z_t` at timesteps `ts`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        zt: Var,
        ts: &[usize],
        cond: &CondVars,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = ts.len();
        let zs = g.shape(zt).to_vec();
        let s = cfg.latent_side;
        if zs != [n, cfg.latent_dim, s, s, s] {
            return Err(validation(format!(
                "z_t extents {zs:?} do not match {n}x{}x{s}^3",
                cfg.latent_dim
            )));
        }
        let temb = self.time.forward(g, store, ts)?;
        let temb = g.silu(temb);

        let ctx = match &cond.tokens {
            Some((tok, keep)) => {
                let ts_ = g.shape(*tok).to_vec();
                if ts_.len() != 3 || ts_[0] != n || ts_[2] != cfg.token_dim || keep.len() != n {
                    return Err(validation(format!(
                        "tokens {ts_:?} do not match a batch of {n} with width {}",
                        cfg.token_dim
                    )));
                }
                if keep.iter().all(|&k| k) {
                    *tok
                } else {
                    let null = self.null_tokens(g, store, 1, ts_[1])?;
                    g.select_batch(*tok, null, keep)?
                }
            }
            None => self.null_tokens(g, store, n, 1)?,
        };

        let h = self.encoder.conv_in.forward(g, store, zt)?;
        let (h, mut skips) = self.encoder.forward_levels(g, store, h, temb, ctx)?;

        if let Some((c, keep)) = &cond.partial {
            let r = cfg.grid_resolution;
            if g.shape(*c) != [n, 2, r, r, r] || keep.len() != n {
                return Err(validation(format!(
                    "partial scans {:?} do not match a batch of {n} at {r}^3",
                    g.shape(*c)
                )));
            }
            if keep.iter().any(|&k| k) {
                let ctrl = &self.control;
                let fz = ctrl.encoder.conv_in.forward(g, store, zt)?;
                let fc = ctrl.encode_hint(g, store, *c)?;
                let f = g.add(fz, fc)?;
                let (_, cskips) = ctrl.encoder.forward_levels(g, store, f, temb, ctx)?;
                let factors: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                for (l, (skip, cs)) in skips.iter_mut().zip(cskips).enumerate() {
                    let mut p = ctrl.phi[l].forward(g, store, cs)?;
                    if !keep.iter().all(|&k| k) {
                        p = g.scale_batch(p, &factors)?;
                    }
                    *skip = g.add(*skip, p)?;
                }
            }
        }

        let h = self.mid1.forward(g, store, h, temb)?;
        let h = self.mid_attn.forward(g, store, h, ctx)?;
        let mut h = self.mid2.forward(g, store, h, temb)?;
        for l in (0..cfg.levels()).rev() {
            let level = &self.decoder[l];
            h = g.concat_channels(h, skips[l])?;
            h = level.res.forward(g, store, h, temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(g, store, h, ctx)?;
            }
            if let Some(up) = &level.up {
                h = g.upsample2x(h)?;
                h = up.forward(g, store, h)?;
            }
        }
        let h = self.norm_out.forward(g, store, h)?;
        let h = g.silu(h);
        Ok(self.conv_out.forward(g, store, h)?)
    }

    /// Parameters whose names start with `prefix`.
    pub fn params_with_prefix<T: Real>(store: &ParamStore<T>, prefix: &str) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }
}

/// Overwrites every parameter named `to + rest` with the value of `from + rest`.
fn copy_prefix<T: Real>(store: &mut ParamStore<T>, from: &str, to: &str) -> Result<()> {
    let pairs: Vec<(String, Tensor<T>)> = store
        .iter()
        .filter_map(|(_, name, t)| {
            name.strip_prefix(from)
                .map(|rest| (format!("{to}{rest}"), t.clone()))
        })
        .collect();
    for (name, t) in pairs {
        store.assign(&name, t)?;
    }
    Ok(())
}

/// Stacks partial scans into the `[N, 2, S, S, S]` control input.
pub fn partial_tensor<T: Real>(grids: &[&TsdfGrid]) -> Result<Tensor<T>> {
    let first = grids
        .first()
        .ok_or_else(|| validation("empty partial-scan batch"))?;
    let s = first.resolution();
    let mut data = Vec::with_capacity(grids.len() * 2 * s.pow(3));
    for g in grids {
        if g.resolution() != s {
            return Err(validation("partial scans differ in resolution"));
        }
        data.extend(
            g.masked_channels()
                .into_iter()
                .map(|v| T::from_f64_lossy(v as f64)),
        );
    }
    Ok(Tensor::from_vec(&[grids.len(), 2, s, s, s], data)?)
}
