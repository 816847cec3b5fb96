//! Combined 3D + 2D autoencoder objective.

use shapediff_nn::{Graph, ParamGrads, ParamStore, Real, Tensor};

use super::disc::{normals_tensor, PatchDiscriminator};
use super::model::VqVaeNet;
use super::quantize::nearest_indices;
use crate::error::{validation, Result};
use crate::grid::{CameraPose, TsdfGrid};
use crate::render::{
    accumulate_backward, render_field, replay_render, DepthImage, FieldView, ImageGradient,
    NormalImage, RenderGradient, RenderOutput,
};
use crate::vec3;

/// How latent vectors are snapped to the codebook.
#[derive(Clone, Debug)]
pub enum QuantMode {
    /// Nearest row with a straight-through gradient.
    Nearest,
    /// Fixed indices, stop-gradient values and render brackets taken from an
    /// earlier evaluation. The decoder sees `z + (zq - z)_frozen` and the
    /// renders replay the earlier hit brackets, which makes the loss a smooth
    /// function of the parameters whose gradient equals the straight-through
    /// gradient at the freezing point.
    Frozen(FrozenState),
}

#[derive(Clone, Debug)]
pub struct FrozenState {
    pub indices: Vec<usize>,
    pub z: Vec<f64>,
    pub zq: Vec<f64>,
    pub renders: Vec<RenderOutput>,
}

/// Ground-truth renders of one sample from one view.
#[derive(Clone, Debug)]
pub struct ViewTarget {
    pub pose: CameraPose,
    pub depth: DepthImage,
    pub normals: NormalImage,
}

impl ViewTarget {
    pub fn render(grid: &TsdfGrid, pose: CameraPose) -> Self {
        let out = render_field(grid, &pose);
        Self {
            pose,
            depth: out.depth,
            normals: out.normals,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub commit: f64,
    pub codebook: f64,
    pub render2d: f64,
    pub adversarial: f64,
}

pub struct LossOutput<T> {
    pub terms: LossTerms,
    pub grads: Option<ParamGrads<T>>,
    pub indices: Vec<usize>,
    /// Encoder output `[N, D, s, s, s]`.
    pub z: Tensor<T>,
    /// Renders of the reconstruction, sample-major then view.
    pub renders: Vec<RenderOutput>,
}

impl<T: Real> LossOutput<T> {
    /// Freezes this evaluation's quantisation for later re-evaluation.
    pub fn frozen(&self, net: &VqVaeNet, store: &ParamStore<T>) -> FrozenState {
        let book = store.get(net.codebook).data();
        let d = net.config.latent_dim;
        let n = self.z.dim(0);
        let sites = self.z.numel() / (n * d);
        let mut zq = vec![0.0; self.z.numel()];
        for b in 0..n {
            for l in 0..sites {
                let row = self.indices[b * sites + l];
                for c in 0..d {
                    zq[(b * d + c) * sites + l] = book[row * d + c].as_f64();
                }
            }
        }
        FrozenState {
            indices: self.indices.clone(),
            z: self.z.data().iter().map(|v| v.as_f64()).collect(),
            zq,
            renders: self.renders.clone(),
        }
    }
}

/// 2D reconstruction term for one view over pixels hit in both renders:
/// mean depth l1 plus mean per-pixel normal l1. Fills `up` with the gradient
/// scaled by `weight`.
pub fn render_l1(
    target: &ViewTarget,
    depth: &DepthImage,
    normals: &NormalImage,
    weight: f64,
    up: &mut ImageGradient,
) -> f64 {
    let both: Vec<usize> = (0..depth.hit.len())
        .filter(|&i| depth.hit[i] && target.depth.hit[i])
        .collect();
    if both.is_empty() {
        return 0.0;
    }
    let m = both.len() as f64;
    let mut total = 0.0;
    for &i in &both {
        let dd = depth.depth[i] - target.depth.depth[i];
        total += dd.abs();
        up.d_depth[i] += weight * sign(dd) / m;
        let dn = vec3::sub(normals.normals[i], target.normals.normals[i]);
        for c in 0..3 {
            total += dn[c].abs();
            up.d_normal[i][c] += weight * sign(dn[c]) / m;
        }
    }
    total / m
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates `L_R + beta L_C + (1 - beta) L_CB + gamma_R L_R2D + gamma_A L_A2D`
/// for a batch, optionally with parameter gradients.
///
/// `targets[i]` holds the supervision views of `grids[i]`. The adversarial
/// term is the generator half of the logistic GAN loss, `mean log(1 - D(N'))`.
pub fn vqvae_loss<T: Real>(
    net: &VqVaeNet,
    store: &ParamStore<T>,
    grids: &[&TsdfGrid],
    targets: &[Vec<ViewTarget>],
    adversary: Option<(&PatchDiscriminator, &ParamStore<T>)>,
    mode: &QuantMode,
    want_grads: bool,
) -> Result<LossOutput<T>> {
    let cfg = &net.config;
    let n = grids.len();
    if n == 0 {
        return Err(validation("empty batch"));
    }
    let use_2d = cfg.gamma_r > 0.0 || cfg.gamma_a > 0.0;
    if use_2d && (targets.len() != n || targets.iter().any(|t| t.is_empty())) {
        return Err(validation("2D losses need at least one view per sample"));
    }
    if cfg.gamma_a > 0.0 && adversary.is_none() {
        return Err(validation(
            "adversarial weight set but no discriminator given",
        ));
    }
    let s = cfg.resolution;
    let sl = cfg.latent_side();
    let d = cfg.latent_dim;
    let thresh = cfg.thresh as f64;

    let mut g = Graph::<T>::new();
    let x = g.constant(net.input_tensor(grids)?);
    let z = net.encoder.forward(&mut g, store, x)?;
    let z_val = g.value(z).clone();
    let book = g.param(store, net.codebook);

    let (dec_in, commit, code) = match mode {
        QuantMode::Nearest => {
            let idx = nearest_indices(z_val.data(), n, d, store.get(net.codebook).data());
            let zq = g.gather_rows(book, &idx, n, &[sl, sl, sl])?;
            let zq_val = g.value(zq).clone();
            let dec_in = g.straight_through(z, zq_val.clone())?;
            let zq_c = g.constant(zq_val);
            let commit = g.sub(z, zq_c)?;
            let z_c = g.constant(z_val.clone());
            let code = g.sub(z_c, zq)?;
            (dec_in, commit, (code, idx))
        }
        QuantMode::Frozen(f) => {
            if f.z.len() != z_val.numel() || f.zq.len() != z_val.numel() {
                return Err(validation("frozen quantisation does not match the batch"));
            }
            let shape = z_val.shape().to_vec();
            let lift = |v: &[f64]| {
                Tensor::from_vec(&shape, v.iter().map(|&a| T::from_f64_lossy(a)).collect())
            };
            let offset: Vec<f64> = f.zq.iter().zip(&f.z).map(|(a, b)| a - b).collect();
            let off = g.constant(lift(&offset)?);
            let dec_in = g.add(z, off)?;
            let zq_c = g.constant(lift(&f.zq)?);
            let commit = g.sub(z, zq_c)?;
            let zq = g.gather_rows(book, &f.indices, n, &[sl, sl, sl])?;
            let z_c = g.constant(lift(&f.z)?);
            let code = g.sub(z_c, zq)?;
            (dec_in, commit, (code, f.indices.clone()))
        }
    };
    let (code, indices) = code;
    let commit = g.square(commit);
    let commit = g.mean(commit);
    let code = g.square(code);
    let code = g.mean(code);

    let xr = net.decoder.forward(&mut g, store, dec_in, thresh)?;
    let mut target = Vec::with_capacity(n * s.pow(3));
    for grid in grids {
        target.extend(grid.values().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let xt = g.constant(Tensor::from_vec(&[n, 1, s, s, s], target)?);
    let diff = g.sub(xr, xt)?;
    let recon = g.abs(diff);
    let recon = g.mean(recon);

    let wc = g.scale(commit, cfg.beta);
    let wcb = g.scale(code, 1.0 - cfg.beta);
    let total = g.add(recon, wc)?;
    let total = g.add(total, wcb)?;

    // 2D terms: render the reconstruction outside the tape, then feed the
    // voxel gradients back in as a second seed.
    let mut render2d = 0.0;
    let mut adversarial = 0.0;
    let mut renders = Vec::new();
    let mut voxel_seed: Option<Tensor<T>> = None;
    if use_2d {
        let xr_val = g.value(xr).clone();
        let views = targets[0].len();
        let mut outs = Vec::with_capacity(n * views);
        for (b, tlist) in targets.iter().enumerate() {
            if tlist.len() != views {
                return Err(validation("every sample needs the same number of views"));
            }
            let field = FieldView {
                resolution: s,
                values: xr_val.batch_slice(b),
            };
            for t in tlist {
                let k = outs.len();
                outs.push(match mode {
                    QuantMode::Frozen(f) if !f.renders.is_empty() => {
                        let base = f
                            .renders
                            .get(k)
                            .ok_or_else(|| validation("frozen renders do not match the views"))?;
                        replay_render(&field, base)
                    }
                    _ => render_field(&field, &t.pose),
                });
            }
        }
        let scale = 1.0 / (n * views) as f64;
        let mut ups: Vec<ImageGradient> = outs
            .iter()
            .map(|o| ImageGradient::zeros(o.depth.width, o.depth.height))
            .collect();
        for (k, out) in outs.iter().enumerate() {
            let t = &targets[k / views][k % views];
            render2d += scale
                * render_l1(
                    t,
                    &out.depth,
                    &out.normals,
                    cfg.gamma_r * scale,
                    &mut ups[k],
                );
        }
        if let Some((disc, dstore)) = adversary.filter(|_| cfg.gamma_a > 0.0) {
            let imgs: Vec<&NormalImage> = outs.iter().map(|o| &o.normals).collect();
            let mut gd = Graph::<T>::new();
            let inp = gd.input(normals_tensor(&imgs)?);
            let logits = disc.forward(&mut gd, dstore, inp)?;
            let neg = gd.scale(logits, -1.0);
            let term = gd.log_sigmoid(neg);
            let adv = gd.mean(term);
            adversarial = gd.scalar(adv).as_f64();
            if want_grads {
                let dn = gd.backward_scalar(adv)?;
                let dn = dn.get(inp).expect("input requires grad");
                let (h, w) = (outs[0].depth.height, outs[0].depth.width);
                for (k, up) in ups.iter_mut().enumerate() {
                    let base = k * 3 * h * w;
                    for p in 0..h * w {
                        for c in 0..3 {
                            up.d_normal[p][c] +=
                                cfg.gamma_a * dn.data()[base + c * h * w + p].as_f64();
                        }
                    }
                }
            }
        }
        if want_grads {
            let mut seed = Vec::with_capacity(n * s.pow(3));
            for b in 0..n {
                let field = FieldView {
                    resolution: s,
                    values: xr_val.batch_slice(b),
                };
                let mut acc = RenderGradient {
                    resolution: s,
                    values: vec![0.0; s.pow(3)],
                    touched: vec![false; s.pow(3)],
                };
                for v in 0..views {
                    accumulate_backward(
                        &field,
                        &outs[b * views + v],
                        &ups[b * views + v],
                        &mut acc,
                    )?;
                }
                seed.extend(acc.values.iter().map(|&v| T::from_f64_lossy(v)));
            }
            voxel_seed = Some(Tensor::from_vec(&[n, 1, s, s, s], seed)?);
        }
        renders = outs;
    }

    let terms = LossTerms {
        total: g.scalar(total).as_f64() + cfg.gamma_r * render2d + cfg.gamma_a * adversarial,
        recon: g.scalar(recon).as_f64(),
        commit: g.scalar(commit).as_f64(),
        codebook: g.scalar(code).as_f64(),
        render2d,
        adversarial,
    };
    let grads = if want_grads {
        let mut seeds = vec![(total, Tensor::scalar(T::one()))];
        if let Some(seed) = voxel_seed {
            seeds.push((xr, seed));
        }
        Some(g.backward(&seeds)?.param_grads(&g))
    } else {
        None
    };
    Ok(LossOutput {
        terms,
        grads,
        indices,
        z: z_val,
        renders,
    })
}
