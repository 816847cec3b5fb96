//! Raycast rendering of depth and normal images from a voxel distance field,
//! with a hand-written backward pass to the voxel values.
//!
//! Each pixel ray is marched in steps of half a voxel through the trilinear
//! interpolant of the grid. The first positive-to-nonpositive transition is
//! refined by linear interpolation between the bracketing samples; the
//! normal is the normalised central-difference gradient of the interpolant
//! at the refined hit. The backward pass differentiates exactly this
//! computation with the bracket (and therefore the march path) held fixed.

use std::io::Write;
use std::path::Path;

use shapediff_nn::Real;

use crate::error::{io_err, validation, Result};
use crate::grid::{CameraPose, TsdfGrid};
use crate::vec3::{self, Vec3};

/// Ray-march step in voxels.
pub const MARCH_STEP: f64 = 0.5;
/// Half-width of the central-difference stencil used for normals.
pub const NORMAL_DELTA: f64 = 0.5;
/// Depth written for pixels without a surface hit.
pub const NO_HIT_DEPTH: f64 = 0.0;

/// Read access to a cubic voxel field of distances in voxel units.
pub trait Field {
    fn resolution(&self) -> usize;
    fn at(&self, index: usize) -> f64;
}

impl Field for TsdfGrid {
    fn resolution(&self) -> usize {
        TsdfGrid::resolution(self)
    }
    #[inline]
    fn at(&self, index: usize) -> f64 {
        self.values()[index] as f64
    }
}

/// Borrowed view over raw values, e.g. a decoder output.
#[derive(Clone, Copy)]
pub struct FieldView<'a, T> {
    pub resolution: usize,
    pub values: &'a [T],
}

impl<T: Real> Field for FieldView<'_, T> {
    fn resolution(&self) -> usize {
        self.resolution
    }
    #[inline]
    fn at(&self, index: usize) -> f64 {
        self.values[index].as_f64()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub hit: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalImage {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vec3>,
    pub hit: Vec<bool>,
}

impl NormalImage {
    /// Planar `[3, height, width]` layout with zeros at empty pixels.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0f32; 3 * n];
        for (i, nrm) in self.normals.iter().enumerate() {
            if self.hit[i] {
                for c in 0..3 {
                    out[c * n + i] = nrm[c] as f32;
                }
            }
        }
        out
    }
}

/// Upstream gradients with respect to the rendered images.
#[derive(Clone, Debug)]
pub struct ImageGradient {
    pub width: usize,
    pub height: usize,
    pub d_depth: Vec<f64>,
    pub d_normal: Vec<Vec3>,
}

impl ImageGradient {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            d_depth: vec![0.0; width * height],
            d_normal: vec![[0.0; 3]; width * height],
        }
    }
}

/// Gradient of a scalar loss with respect to every voxel value.
#[derive(Clone, Debug)]
pub struct RenderGradient {
    pub resolution: usize,
    pub values: Vec<f64>,
    /// Voxels that appear in at least one contributing interpolation stencil.
    pub touched: Vec<bool>,
}

/// Trilinear interpolation stencil at a point, with weight derivatives.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    idx: [usize; 8],
    w: [f64; 8],
    dw: [Vec3; 8],
}

fn stencil(s: usize, p: Vec3) -> Stencil {
    let hi = (s - 1) as f64;
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    let mut live = [1.0; 3];
    for a in 0..3 {
        let c = if p[a] <= 0.0 {
            live[a] = 0.0;
            0.0
        } else if p[a] >= hi {
            live[a] = 0.0;
            hi
        } else {
            p[a]
        };
        let i0 = (c.floor() as usize).min(s - 2);
        base[a] = i0;
        frac[a] = c - i0 as f64;
    }
    let mut st = Stencil {
        idx: [0; 8],
        w: [0.0; 8],
        dw: [[0.0; 3]; 8],
    };
    for corner in 0..8 {
        let bit = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut wa = [0.0; 3];
        let mut da = [0.0; 3];
        for a in 0..3 {
            if bit[a] == 1 {
                wa[a] = frac[a];
                da[a] = live[a];
            } else {
                wa[a] = 1.0 - frac[a];
                da[a] = -live[a];
            }
        }
        let (x, y, z) = (base[0] + bit[0], base[1] + bit[1], base[2] + bit[2]);
        st.idx[corner] = x + s * (y + s * z);
        st.w[corner] = wa[0] * wa[1] * wa[2];
        st.dw[corner] = [
            da[0] * wa[1] * wa[2],
            wa[0] * da[1] * wa[2],
            wa[0] * wa[1] * da[2],
        ];
    }
    st
}

fn sample<F: Field + ?Sized>(field: &F, st: &Stencil) -> f64 {
    (0..8).map(|c| st.w[c] * field.at(st.idx[c])).sum()
}

fn sample_spatial_grad<F: Field + ?Sized>(field: &F, st: &Stencil) -> Vec3 {
    let mut g = [0.0; 3];
    for c in 0..8 {
        let v = field.at(st.idx[c]);
        for a in 0..3 {
            g[a] += st.dw[c][a] * v;
        }
    }
    g
}

/// Trilinear value of `field` at `p` (coordinates clamped to the grid).
pub fn trilinear<F: Field + ?Sized>(field: &F, p: Vec3) -> f64 {
    sample(field, &stencil(field.resolution(), p))
}

fn normal_stencils(s: usize, p: Vec3) -> [(Stencil, Stencil); 3] {
    let mk = |a: usize| {
        let mut plus = p;
        let mut minus = p;
        plus[a] += NORMAL_DELTA;
        minus[a] -= NORMAL_DELTA;
        (stencil(s, plus), stencil(s, minus))
    };
    [mk(0), mk(1), mk(2)]
}

/// Everything the backward pass needs about one pixel's hit.
#[derive(Clone, Copy, Debug)]
pub struct HitRecord {
    pub origin: Vec3,
    pub dir: Vec3,
    /// Ray distance of the last positive sample.
    pub s0: f64,
    pub v0: f64,
    pub v1: f64,
    pub depth: f64,
    /// Unnormalised central-difference gradient at the hit.
    pub grad: Vec3,
}

impl HitRecord {
    pub fn point(&self) -> Vec3 {
        vec3::add(self.origin, vec3::scale(self.dir, self.depth))
    }
}

/// Slab test against the box spanned by the voxel centres.
fn ray_box(origin: Vec3, dir: Vec3, hi: f64) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < 0.0 || origin[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((0.0 - origin[a]) * inv, (hi - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    let start = t0.max(0.0);
    (t1 >= start).then_some((start, t1))
}

/// Marches one ray; returns the refined hit if the field crosses from
/// positive to nonpositive.
pub fn cast_ray<F: Field + ?Sized>(field: &F, origin: Vec3, dir: Vec3) -> Option<HitRecord> {
    let s = field.resolution();
    let (start, end) = ray_box(origin, dir, (s - 1) as f64)?;
    let at = |t: f64| sample(field, &stencil(s, vec3::add(origin, vec3::scale(dir, t))));
    let mut prev_t = start;
    let mut prev_v = at(start);
    let mut k = 1usize;
    loop {
        let t = start + k as f64 * MARCH_STEP;
        if t > end {
            return None;
        }
        let v = at(t);
        if prev_v > 0.0 && v <= 0.0 {
            return Some(refine(field, origin, dir, prev_t, prev_v, v));
        }
        prev_t = t;
        prev_v = v;
        k += 1;
    }
}

fn refine<F: Field + ?Sized>(
    field: &F,
    origin: Vec3,
    dir: Vec3,
    s0: f64,
    v0: f64,
    v1: f64,
) -> HitRecord {
    let s = field.resolution();
    let depth = s0 + MARCH_STEP * v0 / (v0 - v1);
    let p = vec3::add(origin, vec3::scale(dir, depth));
    let mut grad = [0.0; 3];
    for (a, (plus, minus)) in normal_stencils(s, p).iter().enumerate() {
        grad[a] = (sample(field, plus) - sample(field, minus)) / (2.0 * NORMAL_DELTA);
    }
    HitRecord {
        origin,
        dir,
        s0,
        v0,
        v1,
        depth,
        grad,
    }
}

/// Images plus the per-pixel hit records used by the backward pass.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub depth: DepthImage,
    pub normals: NormalImage,
    pub hits: Vec<Option<HitRecord>>,
}

pub fn render_field<F: Field + ?Sized>(field: &F, pose: &CameraPose) -> RenderOutput {
    let (w, h) = (pose.intrinsics.width, pose.intrinsics.height);
    let frame = pose.frame();
    let mut hits = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let dir = pose.ray_direction(&frame, u, v);
            hits.push((cast_ray(field, pose.position, dir), dir));
        }
    }
    assemble(w, h, hits)
}

/// Re-renders `field` through the bracketing sample pairs of an earlier
/// render instead of marching: the hit set and brackets stay fixed, so the
/// images are smooth functions of the field values.
pub fn replay_render<F: Field + ?Sized>(field: &F, base: &RenderOutput) -> RenderOutput {
    let s = field.resolution();
    let hits = base
        .hits
        .iter()
        .map(|rec| match rec {
            Some(r) => {
                let at = |t: f64| {
                    sample(
                        field,
                        &stencil(s, vec3::add(r.origin, vec3::scale(r.dir, t))),
                    )
                };
                let (v0, v1) = (at(r.s0), at(r.s0 + MARCH_STEP));
                (Some(refine(field, r.origin, r.dir, r.s0, v0, v1)), r.dir)
            }
            None => (None, [0.0; 3]),
        })
        .collect();
    assemble(base.depth.width, base.depth.height, hits)
}

fn assemble(w: usize, h: usize, rays: Vec<(Option<HitRecord>, Vec3)>) -> RenderOutput {
    let mut depth = Vec::with_capacity(w * h);
    let mut normals = Vec::with_capacity(w * h);
    let mut hits = Vec::with_capacity(w * h);
    for (hit, dir) in rays {
        match &hit {
            Some(rec) => {
                depth.push(rec.depth);
                normals.push(vec3::normalize(rec.grad).unwrap_or(vec3::scale(dir, -1.0)));
            }
            None => {
                depth.push(NO_HIT_DEPTH);
                normals.push([0.0; 3]);
            }
        }
        hits.push(hit);
    }
    let hit: Vec<bool> = hits.iter().map(Option::is_some).collect();
    RenderOutput {
        depth: DepthImage {
            width: w,
            height: h,
            depth,
            hit: hit.clone(),
        },
        normals: NormalImage {
            width: w,
            height: h,
            normals,
            hit,
        },
        hits,
    }
}

/// Depth and normal images of `grid` seen from `pose`.
pub fn render(grid: &TsdfGrid, pose: &CameraPose) -> (DepthImage, NormalImage) {
    let out = render_field(grid, pose);
    (out.depth, out.normals)
}

/// Gradient of the loss with respect to the voxel values of `grid`.
pub fn render_backward(
    grid: &TsdfGrid,
    pose: &CameraPose,
    upstream: &ImageGradient,
) -> Result<RenderGradient> {
    let out = render_field(grid, pose);
    backward_from_hits(grid, &out, upstream)
}

/// Backward pass reusing the hit records of a previous [`render_field`] of
/// the same field.
pub fn backward_from_hits<F: Field + ?Sized>(
    field: &F,
    out: &RenderOutput,
    upstream: &ImageGradient,
) -> Result<RenderGradient> {
    let n = field.resolution().pow(3);
    let mut grad = RenderGradient {
        resolution: field.resolution(),
        values: vec![0.0; n],
        touched: vec![false; n],
    };
    accumulate_backward(field, out, upstream, &mut grad)?;
    Ok(grad)
}

/// Adds one view's contribution into an existing gradient buffer.
pub fn accumulate_backward<F: Field + ?Sized>(
    field: &F,
    out: &RenderOutput,
    upstream: &ImageGradient,
    grad: &mut RenderGradient,
) -> Result<()> {
    let (w, h) = (out.depth.width, out.depth.height);
    if upstream.width != w
        || upstream.height != h
        || upstream.d_depth.len() != w * h
        || upstream.d_normal.len() != w * h
    {
        return Err(validation(format!(
            "upstream gradient is {}x{}, rendered images are {w}x{h}",
            upstream.width, upstream.height
        )));
    }
    let s = field.resolution();
    if grad.resolution != s {
        return Err(validation("gradient buffer resolution mismatch"));
    }
    for (px, hit) in out.hits.iter().enumerate() {
        let Some(rec) = hit else { continue };
        let dd = upstream.d_depth[px];
        let dn = upstream.d_normal[px];
        let p = rec.point();
        let stencils = normal_stencils(s, p);
        let gnorm = vec3::norm(rec.grad);
        let normal_live = gnorm > 1e-12;
        let mut ds = dd;
        if normal_live {
            let n = vec3::scale(rec.grad, 1.0 / gnorm);
            let proj = vec3::dot(n, dn);
            let dg = vec3::scale(vec3::sub(dn, vec3::scale(n, proj)), 1.0 / gnorm);
            for (a, (plus, minus)) in stencils.iter().enumerate() {
                let coef = dg[a] / (2.0 * NORMAL_DELTA);
                for c in 0..8 {
                    grad.values[plus.idx[c]] += coef * plus.w[c];
                    grad.values[minus.idx[c]] -= coef * minus.w[c];
                    grad.touched[plus.idx[c]] = true;
                    grad.touched[minus.idx[c]] = true;
                }
                if coef != 0.0 {
                    // The stencil moves with the hit point along the ray.
                    let sp = vec3::dot(sample_spatial_grad(field, plus), rec.dir);
                    let sm = vec3::dot(sample_spatial_grad(field, minus), rec.dir);
                    ds += coef * (sp - sm);
                }
            }
        }
        let denom = rec.v0 - rec.v1;
        let dt_dv0 = -rec.v1 / (denom * denom);
        let dt_dv1 = rec.v0 / (denom * denom);
        let p0 = vec3::add(rec.origin, vec3::scale(rec.dir, rec.s0));
        let p1 = vec3::add(rec.origin, vec3::scale(rec.dir, rec.s0 + MARCH_STEP));
        let (st0, st1) = (stencil(s, p0), stencil(s, p1));
        for c in 0..8 {
            grad.values[st0.idx[c]] += ds * MARCH_STEP * dt_dv0 * st0.w[c];
            grad.values[st1.idx[c]] += ds * MARCH_STEP * dt_dv1 * st1.w[c];
            grad.touched[st0.idx[c]] = true;
            grad.touched[st1.idx[c]] = true;
        }
    }
    Ok(())
}

/// Writes depth as a 16-bit binary PGM with 1/256-voxel quantisation
/// (0 = no hit).
pub fn write_depth_pgm(img: &DepthImage, path: &Path) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for (d, &hit) in img.depth.iter().zip(&img.hit) {
        let q = if hit {
            (d * 256.0).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Writes normals as an 8-bit binary PPM mapping `[-1, 1]` to `[0, 255]`
/// (black = no hit).
pub fn write_normals_ppm(img: &NormalImage, path: &Path) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for (n, &hit) in img.normals.iter().zip(&img.hit) {
        for c in n {
            let q = if hit {
                ((c + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            buf.push(q);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{synthesize, Intrinsics, Primitive, ShapeSpec};

    fn sphere(s: usize, r: f64) -> TsdfGrid {
        let c = s as f64 / 2.0;
        synthesize(
            &ShapeSpec::single(Primitive::Sphere {
                center: [c, c, c],
                radius: r,
            }),
            s,
            3.0,
        )
        .unwrap()
    }

    /// Camera on +z at `dist` from the grid centre; odd image so the central
    /// pixel ray is exactly the optical axis.
    fn axis_pose(s: usize, dist: f64) -> CameraPose {
        let c = s as f64 / 2.0;
        CameraPose::new(
            [c, c, c + dist],
            [c, c, c],
            [0.0, 1.0, 0.0],
            Intrinsics::square(33, 40.0),
        )
        .unwrap()
    }

    const CENTRE: usize = 16 * 33 + 16;

    #[test]
    fn empty_grid_has_no_hits() {
        let g = TsdfGrid::filled(16, 3.0, 3.0).unwrap();
        let (d, n) = render(&g, &axis_pose(16, 30.0));
        assert!(d.hit.iter().all(|h| !h));
        assert!(d.depth.iter().all(|&x| x == NO_HIT_DEPTH));
        assert!(n.hit.iter().all(|h| !h));
    }

    #[test]
    fn central_pixel_matches_analytic_sphere() {
        for (s, r, dist) in [(32, 8.0, 51.2), (32, 10.0, 40.0), (64, 16.0, 102.4)] {
            let (d, n) = render(&sphere(s, r), &axis_pose(s, dist));
            assert!(d.hit[CENTRE]);
            assert!(
                (d.depth[CENTRE] - (dist - r)).abs() < 0.05,
                "{} vs {}",
                d.depth[CENTRE],
                dist - r
            );
            let nrm = n.normals[CENTRE];
            for (a, b) in nrm.iter().zip([0.0, 0.0, 1.0]) {
                assert!((a - b).abs() < 1e-2, "{nrm:?}");
            }
        }
    }

    #[test]
    fn normals_are_unit_and_depths_positive() {
        let (d, n) = render(
            &sphere(32, 9.0),
            &CameraPose::orbit(32, 30.0, 20.0, 1.6, 24),
        );
        assert!(d.hit.iter().any(|&h| h));
        for i in 0..d.hit.len() {
            if d.hit[i] {
                assert!(d.depth[i] > 0.0 && d.depth[i].is_finite());
                assert!((vec3::norm(n.normals[i]) - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn deterministic_and_monotone_in_radius() {
        let pose = axis_pose(32, 51.2);
        let a = render(&sphere(32, 8.0), &pose);
        assert_eq!(a, render(&sphere(32, 8.0), &pose));
        let mut last = 0.0;
        for r in [11.0, 10.0, 9.0, 8.0, 7.0, 6.0] {
            let (d, _) = render(&sphere(32, r), &pose);
            assert!(d.depth[CENTRE] > last);
            last = d.depth[CENTRE];
        }
    }

    #[test]
    fn backward_zero_upstream_and_locality() {
        let g = sphere(32, 8.0);
        let pose = axis_pose(32, 51.2);
        let zero = ImageGradient::zeros(33, 33);
        let grad = render_backward(&g, &pose, &zero).unwrap();
        assert!(grad.values.iter().all(|&v| v == 0.0));

        let mut one = ImageGradient::zeros(33, 33);
        one.d_depth[CENTRE] = 1.0;
        one.d_normal[CENTRE] = [0.3, -0.2, 0.5];
        let grad = render_backward(&g, &pose, &one).unwrap();
        assert!(grad.values.iter().any(|&v| v != 0.0));
        let out = render_field(&g, &pose);
        let rec = out.hits[CENTRE].unwrap();
        let p = rec.point();
        for (i, &v) in grad.values.iter().enumerate() {
            if v != 0.0 {
                assert!(grad.touched[i]);
                let q = [(i % 32) as f64, ((i / 32) % 32) as f64, (i / 1024) as f64];
                // Within the stencils around the bracket and the hit.
                assert!((q[0] - p[0]).abs() < 2.0 && (q[1] - p[1]).abs() < 2.0);
                assert!((q[2] - p[2]).abs() < 2.0 + MARCH_STEP);
            }
        }
        assert!(render_backward(&g, &pose, &ImageGradient::zeros(4, 4)).is_err());
    }

    #[test]
    fn replay_on_the_same_field_is_identical() {
        let g = sphere(32, 9.0);
        let out = render_field(&g, &CameraPose::orbit(32, 70.0, 15.0, 1.6, 16));
        let again = replay_render(&g, &out);
        assert_eq!(again.depth, out.depth);
        assert_eq!(again.normals, out.normals);
    }
}
