//! Forward and backward kernels for the heavier operators.
//!
//! Everything here works on plain slices so the kernels can be tested
//! independently of the tape.

use crate::real::{lit, matmul_into, Real};

/// Kernel, stride and zero padding of a (up to) 3D convolution, ordered
/// (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn cube(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    /// Planar convolution expressed on a depth-1 volume.
    pub fn planar(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    ind: [usize; 3],
    outd: [usize; 3],
    g: &ConvGeom,
    cols: &mut [T],
) {
    let [d, h, w] = ind;
    let [od, oh, ow] = outd;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let l = od * oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    row += 1;
                    for oz in 0..od {
                        let plane = &mut dst[oz * oh * ow..(oz + 1) * oh * ow];
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            plane.fill(T::zero());
                            continue;
                        }
                        for oy in 0..oh {
                            let line = &mut plane[oy * ow..(oy + 1) * ow];
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                *v = if ix >= 0 && ix < w as isize {
                                    src[ix as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    ind: [usize; 3],
    outd: [usize; 3],
    g: &ConvGeom,
    dx: &mut [T],
) {
    let [d, h, w] = ind;
    let [od, oh, ow] = outd;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let l = od * oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * l..(row + 1) * l];
                    row += 1;
                    for oz in 0..od {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = &src[(oz * oh + oy) * ow..][..ow];
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            for (ox, &v) in line.iter().enumerate() {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions with at most this many `cin * cout` channel pairs
/// run as direct shifted-line accumulation instead of im2col + gemm.
const DIRECT_CHANNEL_PAIRS: usize = 16 * 16;

fn use_direct(s: &ConvShape, g: &ConvGeom) -> bool {
    g.stride == [1, 1, 1] && !g.is_pointwise() && s.cin * s.cout <= DIRECT_CHANNEL_PAIRS
}

/// Geometry of the padded "wide" layout used by the direct path. With the
/// input zero-padded to `[dp, hp, wp]`, output voxel `(z, y, x)` sits at
/// wide index `(z * hp + y) * wp + x` and reads tap `t` at that index plus a
/// constant offset, so every tap is a single contiguous axpy.
struct Wide {
    padded: [usize; 3],
    /// Length of the wide output range.
    span: usize,
    offsets: Vec<usize>,
}

impl Wide {
    fn new(s: &ConvShape, g: &ConvGeom) -> Self {
        let padded = [
            s.input[0] + 2 * g.pad[0],
            s.input[1] + 2 * g.pad[1],
            s.input[2] + 2 * g.pad[2],
        ];
        let [_, hp, wp] = padded;
        let [od, oh, ow] = s.output;
        let span = ((od - 1) * hp + (oh - 1)) * wp + ow;
        let mut offsets = Vec::with_capacity(g.taps());
        for kz in 0..g.kernel[0] {
            for ky in 0..g.kernel[1] {
                for kx in 0..g.kernel[2] {
                    offsets.push((kz * hp + ky) * wp + kx);
                }
            }
        }
        Self {
            padded,
            span,
            offsets,
        }
    }

    fn plane(&self) -> usize {
        self.padded.iter().product()
    }

    fn pad_into<T: Real>(&self, src: &[T], ind: [usize; 3], pad: [usize; 3], dst: &mut [T]) {
        let [_, hp, wp] = self.padded;
        for z in 0..ind[0] {
            for y in 0..ind[1] {
                let o = ((z + pad[0]) * hp + y + pad[1]) * wp + pad[2];
                let i = (z * ind[1] + y) * ind[2];
                dst[o..o + ind[2]].copy_from_slice(&src[i..i + ind[2]]);
            }
        }
    }

    /// Wide index of every output row start.
    fn rows(&self, out: [usize; 3]) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [_, hp, wp] = self.padded;
        let oh = out[1];
        let ow = out[2];
        (0..out[0] * oh).map(move |r| ((r / oh * hp + r % oh) * wp, r * ow))
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().copied().sum::<T>() + tail
}

fn conv_forward_direct<T: Real>(xn: &[T], w: &[T], s: &ConvShape, g: &ConvGeom, yn: &mut [T]) {
    let wide = Wide::new(s, g);
    let (li, lo, pl) = (s.in_len(), s.out_len(), wide.plane());
    let nt = wide.offsets.len();
    let mut xpad = vec![T::zero(); s.cin * pl];
    for ci in 0..s.cin {
        wide.pad_into(
            &xn[ci * li..(ci + 1) * li],
            s.input,
            g.pad,
            &mut xpad[ci * pl..(ci + 1) * pl],
        );
    }
    let mut ywide = vec![T::zero(); wide.span];
    for co in 0..s.cout {
        ywide.fill(T::zero());
        for ci in 0..s.cin {
            let xc = &xpad[ci * pl..(ci + 1) * pl];
            let wrow = &w[(co * s.cin + ci) * nt..(co * s.cin + ci + 1) * nt];
            for (t, &off) in wide.offsets.iter().enumerate() {
                axpy(&mut ywide, wrow[t], &xc[off..off + wide.span]);
            }
        }
        let yc = &mut yn[co * lo..(co + 1) * lo];
        for (src, dst) in wide.rows(s.output) {
            yc[dst..dst + s.output[2]].copy_from_slice(&ywide[src..src + s.output[2]]);
        }
    }
}

fn conv_backward_direct<T: Real>(
    xn: &[T],
    w: &[T],
    dyn_: &[T],
    s: &ConvShape,
    g: &ConvGeom,
    mut dw: Option<&mut [T]>,
    dxn: Option<&mut [T]>,
) {
    let wide = Wide::new(s, g);
    let (li, lo, pl) = (s.in_len(), s.out_len(), wide.plane());
    let nt = wide.offsets.len();
    let mut dywide = vec![T::zero(); s.cout * wide.span];
    for co in 0..s.cout {
        let dst = &mut dywide[co * wide.span..(co + 1) * wide.span];
        for (wi, oi) in wide.rows(s.output) {
            dst[wi..wi + s.output[2]]
                .copy_from_slice(&dyn_[co * lo + oi..co * lo + oi + s.output[2]]);
        }
    }
    if let Some(dw) = dw.as_deref_mut() {
        let mut xpad = vec![T::zero(); pl];
        for ci in 0..s.cin {
            xpad.fill(T::zero());
            wide.pad_into(&xn[ci * li..(ci + 1) * li], s.input, g.pad, &mut xpad);
            for co in 0..s.cout {
                let dyc = &dywide[co * wide.span..(co + 1) * wide.span];
                let base = (co * s.cin + ci) * nt;
                for (t, &off) in wide.offsets.iter().enumerate() {
                    dw[base + t] += dot(dyc, &xpad[off..off + wide.span]);
                }
            }
        }
    }
    if let Some(dx) = dxn {
        let mut dxpad = vec![T::zero(); pl];
        let [_, hp, wp] = wide.padded;
        for ci in 0..s.cin {
            dxpad.fill(T::zero());
            for co in 0..s.cout {
                let dyc = &dywide[co * wide.span..(co + 1) * wide.span];
                let base = (co * s.cin + ci) * nt;
                for (t, &off) in wide.offsets.iter().enumerate() {
                    axpy(&mut dxpad[off..off + wide.span], w[base + t], dyc);
                }
            }
            let dxc = &mut dx[ci * li..(ci + 1) * li];
            for z in 0..s.input[0] {
                for y in 0..s.input[1] {
                    let o = ((z + g.pad[0]) * hp + y + g.pad[1]) * wp + g.pad[2];
                    let i = (z * s.input[1] + y) * s.input[2];
                    dxc[i..i + s.input[2]].copy_from_slice(&dxpad[o..o + s.input[2]]);
                }
            }
        }
    }
}

/// Shapes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvShape {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }
    fn out_len(&self) -> usize {
        self.output.iter().product()
    }
}

pub fn conv_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    s: &ConvShape,
    g: &ConvGeom,
    y: &mut [T],
) {
    let ck = s.cin * g.taps();
    let (li, lo) = (s.in_len(), s.out_len());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * lo]
    };
    let direct = use_direct(s, g);
    for n in 0..s.batch {
        let xn = &x[n * s.cin * li..(n + 1) * s.cin * li];
        let yn = &mut y[n * s.cout * lo..(n + 1) * s.cout * lo];
        if direct {
            conv_forward_direct(xn, w, s, g, yn);
            if let Some(b) = b {
                for (c, &bc) in b.iter().enumerate() {
                    for v in &mut yn[c * lo..(c + 1) * lo] {
                        *v += bc;
                    }
                }
            }
            continue;
        }
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, s.cin, s.input, s.output, g, &mut cols);
            &cols
        };
        matmul_into(w, false, src, false, s.cout, ck, lo, yn, false);
        if let Some(b) = b {
            for (c, &bc) in b.iter().enumerate() {
                for v in &mut yn[c * lo..(c + 1) * lo] {
                    *v += bc;
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, if `dx` is given, overwrites it
/// with the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    s: &ConvShape,
    g: &ConvGeom,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let ck = s.cin * g.taps();
    let (li, lo) = (s.in_len(), s.out_len());
    let pointwise = g.is_pointwise();
    if use_direct(s, g) {
        if let Some(db) = db {
            for n in 0..s.batch {
                let dyn_ = &dy[n * s.cout * lo..(n + 1) * s.cout * lo];
                for (c, acc) in db.iter_mut().enumerate() {
                    *acc += dyn_[c * lo..(c + 1) * lo].iter().copied().sum::<T>();
                }
            }
        }
        let mut dw = dw;
        let mut dx = dx;
        for n in 0..s.batch {
            let xn = &x[n * s.cin * li..(n + 1) * s.cin * li];
            let dyn_ = &dy[n * s.cout * lo..(n + 1) * s.cout * lo];
            let dxn = dx
                .as_deref_mut()
                .map(|d| &mut d[n * s.cin * li..(n + 1) * s.cin * li]);
            conv_backward_direct(xn, w, dyn_, s, g, dw.as_deref_mut(), dxn);
        }
        return;
    }
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ck * lo]
    };
    if let Some(db) = db {
        for n in 0..s.batch {
            let dyn_ = &dy[n * s.cout * lo..(n + 1) * s.cout * lo];
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyn_[c * lo..(c + 1) * lo].iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dw) = dw {
        for n in 0..s.batch {
            let xn = &x[n * s.cin * li..(n + 1) * s.cin * li];
            let dyn_ = &dy[n * s.cout * lo..(n + 1) * s.cout * lo];
            let src: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, s.cin, s.input, s.output, g, &mut cols);
                &cols
            };
            matmul_into(dyn_, false, src, true, s.cout, lo, ck, dw, true);
        }
    }
    if let Some(dx) = dx {
        for n in 0..s.batch {
            let dyn_ = &dy[n * s.cout * lo..(n + 1) * s.cout * lo];
            let dxn = &mut dx[n * s.cin * li..(n + 1) * s.cin * li];
            if pointwise {
                matmul_into(w, true, dyn_, false, ck, s.cout, lo, dxn, false);
            } else {
                matmul_into(w, true, dyn_, false, ck, s.cout, lo, &mut cols, false);
                dxn.fill(T::zero());
                col2im(&cols, s.cin, s.input, s.output, g, dxn);
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of `[planes, d, h, w]` volumes.
pub fn upsample2x_forward<T: Real>(x: &[T], planes: usize, ind: [usize; 3], y: &mut [T]) {
    let [d, h, w] = ind;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for p in 0..planes {
        let xp = &x[p * d * h * w..(p + 1) * d * h * w];
        let yp = &mut y[p * od * oh * ow..(p + 1) * od * oh * ow];
        for z in 0..od {
            for yy in 0..oh {
                let src = &xp[((z / 2) * h + yy / 2) * w..][..w];
                let dst = &mut yp[(z * oh + yy) * ow..][..ow];
                for (xx, v) in dst.iter_mut().enumerate() {
                    *v = src[xx / 2];
                }
            }
        }
    }
}

pub fn upsample2x_backward<T: Real>(dy: &[T], planes: usize, ind: [usize; 3], dx: &mut [T]) {
    let [d, h, w] = ind;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    dx.fill(T::zero());
    for p in 0..planes {
        let dxp = &mut dx[p * d * h * w..(p + 1) * d * h * w];
        let dyp = &dy[p * od * oh * ow..(p + 1) * od * oh * ow];
        for z in 0..od {
            for yy in 0..oh {
                let src = &dyp[(z * oh + yy) * ow..][..ow];
                let dst = &mut dxp[((z / 2) * h + yy / 2) * w..][..w];
                for (xx, &v) in src.iter().enumerate() {
                    dst[xx / 2] += v;
                }
            }
        }
    }
}

/// Normalisation statistics for `rows` independent segments.
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalisation over `[batch, channels, len]` with per-channel affine.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    len: usize,
    groups: usize,
    eps: f64,
    y: &mut [T],
) -> NormStats<T> {
    let cpg = channels / groups;
    let count = (cpg * len) as f64;
    let mut mean = Vec::with_capacity(batch * groups);
    let mut rstd = Vec::with_capacity(batch * groups);
    for n in 0..batch {
        for g in 0..groups {
            let start = (n * channels + g * cpg) * len;
            let seg = &x[start..start + cpg * len];
            let m = seg.iter().map(|v| v.as_f64()).sum::<f64>() / count;
            let var = seg
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>()
                / count;
            let r = 1.0 / (var + eps).sqrt();
            let (mt, rt) = (lit::<T>(m), lit::<T>(r));
            for c in 0..cpg {
                let ch = g * cpg + c;
                let (ga, be) = (gamma[ch], beta[ch]);
                let off = start + c * len;
                for i in off..off + len {
                    y[i] = (x[i] - mt) * rt * ga + be;
                }
            }
            mean.push(mt);
            rstd.push(rt);
        }
    }
    NormStats { mean, rstd }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    stats: &NormStats<T>,
    batch: usize,
    channels: usize,
    len: usize,
    groups: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let cpg = channels / groups;
    let count = (cpg * len) as f64;
    for n in 0..batch {
        for g in 0..groups {
            let idx = n * groups + g;
            let (m, r) = (stats.mean[idx], stats.rstd[idx]);
            let start = (n * channels + g * cpg) * len;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for c in 0..cpg {
                let ch = g * cpg + c;
                let off = start + c * len;
                let mut dga = T::zero();
                let mut dbe = T::zero();
                for i in off..off + len {
                    let xhat = (x[i] - m) * r;
                    dga += dy[i] * xhat;
                    dbe += dy[i];
                    let dxh = dy[i] * gamma[ch];
                    sum_dxhat += dxh.as_f64();
                    sum_dxhat_xhat += (dxh * xhat).as_f64();
                }
                dgamma[ch] += dga;
                dbeta[ch] += dbe;
            }
            let a = lit::<T>(sum_dxhat / count);
            let b = lit::<T>(sum_dxhat_xhat / count);
            for c in 0..cpg {
                let ch = g * cpg + c;
                let off = start + c * len;
                for i in off..off + len {
                    let xhat = (x[i] - m) * r;
                    dx[i] = r * (dy[i] * gamma[ch] - a - xhat * b);
                }
            }
        }
    }
}

/// Layer normalisation over the trailing dimension of `[rows, width]`.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    width: usize,
    eps: f64,
    y: &mut [T],
) -> NormStats<T> {
    let rows = x.len() / width;
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let seg = &x[r * width..(r + 1) * width];
        let m = seg.iter().map(|v| v.as_f64()).sum::<f64>() / width as f64;
        let var = seg
            .iter()
            .map(|v| {
                let d = v.as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / width as f64;
        let (mt, rt) = (lit::<T>(m), lit::<T>(1.0 / (var + eps).sqrt()));
        let out = &mut y[r * width..(r + 1) * width];
        for i in 0..width {
            out[i] = (seg[i] - mt) * rt * gamma[i] + beta[i];
        }
        mean.push(mt);
        rstd.push(rt);
    }
    NormStats { mean, rstd }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    stats: &NormStats<T>,
    width: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let rows = x.len() / width;
    for r in 0..rows {
        let (m, rs) = (stats.mean[r], stats.rstd[r]);
        let seg = &x[r * width..(r + 1) * width];
        let g = &dy[r * width..(r + 1) * width];
        let mut a = 0.0f64;
        let mut b = 0.0f64;
        for i in 0..width {
            let xhat = (seg[i] - m) * rs;
            dgamma[i] += g[i] * xhat;
            dbeta[i] += g[i];
            let dxh = g[i] * gamma[i];
            a += dxh.as_f64();
            b += (dxh * xhat).as_f64();
        }
        let (a, b) = (lit::<T>(a / width as f64), lit::<T>(b / width as f64));
        let out = &mut dx[r * width..(r + 1) * width];
        for i in 0..width {
            let xhat = (seg[i] - m) * rs;
            out[i] = rs * (g[i] * gamma[i] - a - xhat * b);
        }
    }
}

/// Shapes of a batched single-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    /// Width of queries and keys.
    pub qk_width: usize,
    /// Width of values and outputs.
    pub v_width: usize,
}

/// `softmax(q k^T / sqrt(width)) v`; returns the attention probabilities.
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: &AttnShape,
    out: &mut [T],
) -> Vec<T> {
    let (l, m, c, cv) = (s.queries, s.keys, s.qk_width, s.v_width);
    let scale = lit::<T>(1.0 / (c as f64).sqrt());
    let mut probs = vec![T::zero(); s.batch * l * m];
    for n in 0..s.batch {
        let qn = &q[n * l * c..(n + 1) * l * c];
        let kn = &k[n * m * c..(n + 1) * m * c];
        let vn = &v[n * m * cv..(n + 1) * m * cv];
        let pn = &mut probs[n * l * m..(n + 1) * l * m];
        matmul_into(qn, false, kn, true, l, c, m, pn, false);
        for row in pn.chunks_mut(m) {
            let mut mx = T::neg_infinity();
            for x in row.iter_mut() {
                *x *= scale;
                mx = mx.max(*x);
            }
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        matmul_into(
            pn,
            false,
            vn,
            false,
            l,
            m,
            cv,
            &mut out[n * l * cv..(n + 1) * l * cv],
            false,
        );
    }
    probs
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    s: &AttnShape,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (l, m, c, cv) = (s.queries, s.keys, s.qk_width, s.v_width);
    let scale = lit::<T>(1.0 / (c as f64).sqrt());
    let mut dp = vec![T::zero(); l * m];
    for n in 0..s.batch {
        let qn = &q[n * l * c..(n + 1) * l * c];
        let kn = &k[n * m * c..(n + 1) * m * c];
        let vn = &v[n * m * cv..(n + 1) * m * cv];
        let pn = &probs[n * l * m..(n + 1) * l * m];
        let don = &dout[n * l * cv..(n + 1) * l * cv];
        matmul_into(
            pn,
            true,
            don,
            false,
            m,
            l,
            cv,
            &mut dv[n * m * cv..(n + 1) * m * cv],
            false,
        );
        matmul_into(don, false, vn, true, l, cv, m, &mut dp, false);
        for (drow, prow) in dp.chunks_mut(m).zip(pn.chunks(m)) {
            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (d, &p) in drow.iter_mut().zip(prow) {
                *d = p * (*d - dot) * scale;
            }
        }
        matmul_into(
            &dp,
            false,
            kn,
            false,
            l,
            m,
            c,
            &mut dq[n * l * c..(n + 1) * l * c],
            false,
        );
        matmul_into(
            &dp,
            true,
            qn,
            false,
            m,
            l,
            c,
            &mut dk[n * m * c..(n + 1) * m * c],
            false,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(x: &[f64], w: &[f64], s: &ConvShape, g: &ConvGeom) -> Vec<f64> {
        let [d, h, wd] = s.input;
        let [od, oh, ow] = s.output;
        let [kd, kh, kw] = g.kernel;
        let mut y = vec![0.0; s.batch * s.cout * od * oh * ow];
        for n in 0..s.batch {
            for co in 0..s.cout {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..s.cin {
                                for a in 0..kd {
                                    for b in 0..kh {
                                        for c in 0..kw {
                                            let iz =
                                                (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                            let iy =
                                                (yy * g.stride[1] + b) as isize - g.pad[1] as isize;
                                            let ix =
                                                (xx * g.stride[2] + c) as isize - g.pad[2] as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as isize
                                                || iy >= h as isize
                                                || ix >= wd as isize
                                            {
                                                continue;
                                            }
                                            let xi = (((n * s.cin + ci) * d + iz as usize) * h
                                                + iy as usize)
                                                * wd
                                                + ix as usize;
                                            let wi =
                                                (((co * s.cin + ci) * kd + a) * kh + b) * kw + c;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            y[(((n * s.cout + co) * od + z) * oh + yy) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        // (3, 4) takes the direct path at stride 1, (17, 16) the gemm path.
        for (cin, cout) in [(3, 4), (17, 16)] {
            for g in [
                ConvGeom::cube(3, 1, 1),
                ConvGeom::cube(3, 2, 1),
                ConvGeom::cube(1, 1, 0),
                ConvGeom::planar(4, 2, 1),
            ] {
                let input = if g.kernel[0] == 1 && g.kernel[1] == 4 {
                    [1, 8, 6]
                } else {
                    [5, 6, 4]
                };
                let output = g.out_dims(input).unwrap();
                let s = ConvShape {
                    batch: 2,
                    cin,
                    cout,
                    input,
                    output,
                };
                let x = pseudo(2 * cin * input.iter().product::<usize>(), 1);
                let w = pseudo(cout * cin * g.kernel.iter().product::<usize>(), 2);
                let mut y = vec![0.0; 2 * cout * output.iter().product::<usize>()];
                conv_forward(&x, &w, None, &s, &g, &mut y);
                let oracle = conv_naive(&x, &w, &s, &g);
                for (a, b) in y.iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> == <x, conv^T(dy)> and the same for the weights.
        for (g, cin, cout) in [
            (ConvGeom::cube(3, 2, 1), 2, 3),
            (ConvGeom::cube(3, 1, 1), 2, 3),
            (ConvGeom::cube(3, 1, 1), 17, 16),
        ] {
            let input = [5, 4, 6];
            let output = g.out_dims(input).unwrap();
            let s = ConvShape {
                batch: 2,
                cin,
                cout,
                input,
                output,
            };
            let x = pseudo(2 * cin * 120, 3);
            let w = pseudo(cout * cin * 27, 4);
            let lo: usize = output.iter().product();
            let dy = pseudo(2 * cout * lo, 5);
            let mut y = vec![0.0; dy.len()];
            conv_forward(&x, &w, None, &s, &g, &mut y);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; w.len()];
            conv_backward(&x, &w, &dy, &s, &g, Some(&mut dw), None, Some(&mut dx));
            let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - via_w).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn upsample_round_trip_sums() {
        let x = pseudo(2 * 8, 9);
        let mut y = vec![0.0; 2 * 64];
        upsample2x_forward(&x, 2, [2, 2, 2], &mut y);
        let mut dx = vec![0.0; 16];
        upsample2x_backward(&y, 2, [2, 2, 2], &mut dx);
        for (a, b) in dx.iter().zip(&x) {
            assert!((a - 8.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = AttnShape {
            batch: 1,
            queries: 3,
            keys: 5,
            qk_width: 4,
            v_width: 2,
        };
        let q = pseudo(12, 1);
        let k = pseudo(20, 2);
        let v = pseudo(10, 3);
        let mut out = vec![0.0; 6];
        let p = attention_forward(&q, &k, &v, &s, &mut out);
        for row in p.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
