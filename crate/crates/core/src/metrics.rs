//! Voxelwise l1, occupancy IoU and Chamfer distance between TSDF grids.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::grid::TsdfGrid;
use crate::vec3::Vec3;

/// Surface points kept per shape for Chamfer distance.
pub const DEFAULT_CHAMFER_POINTS: usize = 16384;
const SUBSAMPLE_SEED: u64 = 0x5eed;

fn check_extents(pred: &TsdfGrid, gt: &TsdfGrid) -> Result<()> {
    if pred.resolution() != gt.resolution() {
        return Err(validation(format!(
            "grid extents differ: {}^3 vs {}^3",
            pred.resolution(),
            gt.resolution()
        )));
    }
    Ok(())
}

/// Mean absolute difference of raw values over voxels known in both grids.
pub fn l1_error(pred: &TsdfGrid, gt: &TsdfGrid) -> Result<f64> {
    check_extents(pred, gt)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, (a, b)) in pred.values().iter().zip(gt.values()).enumerate() {
        if pred.is_known(i) && gt.is_known(i) {
            sum += (*a as f64 - *b as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(validation("no voxel is known in both grids"));
    }
    Ok(sum / n as f64)
}

/// `l1_error` divided by the ground-truth truncation.
pub fn normalized_l1(pred: &TsdfGrid, gt: &TsdfGrid) -> Result<f64> {
    Ok(l1_error(pred, gt)? / gt.thresh() as f64)
}

/// Intersection over union of `value < iso` occupancies; 1 when both are empty.
pub fn iou(pred: &TsdfGrid, gt: &TsdfGrid, iso: f32) -> Result<f64> {
    check_extents(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.values().iter().zip(gt.values()) {
        let (oa, ob) = (*a < iso, *b < iso);
        inter += (oa && ob) as usize;
        union += (oa || ob) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Edge subdivisions per voxel used for surface extraction.
pub const SURFACE_SUBDIVISION: usize = 2;

/// Trilinear resampling onto a lattice `k` times finer (same corner nodes).
fn refine_values(grid: &TsdfGrid, k: usize) -> (usize, Vec<f64>) {
    let s = grid.resolution();
    if k == 1 || s < 2 {
        return (s, grid.values().iter().map(|&v| v as f64).collect());
    }
    let m = (s - 1) * k + 1;
    let split = |i: usize| {
        let (c, r) = (i / k, i % k);
        if c + 1 >= s {
            (s - 2, 1.0)
        } else {
            (c, r as f64 / k as f64)
        }
    };
    let mut out = Vec::with_capacity(m * m * m);
    for z in 0..m {
        let (z0, fz) = split(z);
        for y in 0..m {
            let (y0, fy) = split(y);
            for x in 0..m {
                let (x0, fx) = split(x);
                let mut acc = 0.0;
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            let w = wx * wy * wz;
                            if w != 0.0 {
                                acc += w * grid.get(x0 + dx, y0 + dy, z0 + dz) as f64;
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (m, out)
}

/// Zero crossings (`< 0` inside) along the edges of the trilinearly
/// subdivided grid, linearly interpolated, in voxel units. Ordered by
/// (edge axis, lower node index).
pub fn surface_points(grid: &TsdfGrid) -> Vec<Vec3> {
    let k = SURFACE_SUBDIVISION;
    let (m, v) = refine_values(grid, k);
    let h = 1.0 / k as f64;
    let idx = |p: [usize; 3]| p[0] + m * (p[1] + m * p[2]);
    let mut out = Vec::new();
    for axis in 0..3 {
        for z in 0..m {
            for y in 0..m {
                for x in 0..m {
                    let p = [x, y, z];
                    if p[axis] + 1 >= m {
                        continue;
                    }
                    let mut q = p;
                    q[axis] += 1;
                    let (a, b) = (v[idx(p)], v[idx(q)]);
                    if (a < 0.0) != (b < 0.0) {
                        let t = a / (a - b);
                        let mut pt = [x as f64 * h, y as f64 * h, z as f64 * h];
                        pt[axis] += t * h;
                        out.push(pt);
                    }
                }
            }
        }
    }
    out
}

/// At most `n` points: one uniformly chosen point per equal stratum of the
/// ordered list, under a fixed seed.
pub fn stratified_subsample(points: &[Vec3], n: usize) -> Vec<Vec3> {
    if points.len() <= n {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
    (0..n)
        .map(|k| {
            let lo = k * points.len() / n;
            let hi = (k + 1) * points.len() / n;
            points[rng.gen_range(lo..hi)]
        })
        .collect()
}

fn mean_nearest_sq(from: &[Vec3], to: &[Vec3]) -> f64 {
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(to);
    let total: f64 = from
        .iter()
        .map(|p| tree.nearest_one::<SquaredEuclidean>(p).distance)
        .sum();
    total / from.len() as f64
}

/// Chamfer distance between point sets: sum over both directions of the mean
/// squared nearest-neighbour distance.
pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySurface("point set is empty".into()));
    }
    Ok(mean_nearest_sq(a, b) + mean_nearest_sq(b, a))
}

/// Chamfer distance between the zero surfaces of two grids, in squared voxel units.
pub fn chamfer(pred: &TsdfGrid, gt: &TsdfGrid, n_points: usize) -> Result<f64> {
    check_extents(pred, gt)?;
    if n_points == 0 {
        return Err(validation("n_points must be positive"));
    }
    let a = stratified_subsample(&surface_points(pred), n_points);
    let b = stratified_subsample(&surface_points(gt), n_points);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Err(Error::EmptySurface(
            "neither grid has a zero crossing".into(),
        )),
        (true, false) => Err(Error::EmptySurface(
            "prediction has no zero crossing".into(),
        )),
        (false, true) => Err(Error::EmptySurface(
            "ground truth has no zero crossing".into(),
        )),
        _ => chamfer_points(&a, &b),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub name: String,
    pub l1: f64,
    pub l1_normalized: f64,
    pub iou: f64,
    /// `None` when either surface is empty.
    pub chamfer: Option<f64>,
}

impl ShapeMetrics {
    pub fn compute(name: &str, pred: &TsdfGrid, gt: &TsdfGrid, n_points: usize) -> Result<Self> {
        let chamfer = match chamfer(pred, gt, n_points) {
            Ok(c) => Some(c),
            Err(Error::EmptySurface(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            name: name.to_string(),
            l1: l1_error(pred, gt)?,
            l1_normalized: normalized_l1(pred, gt)?,
            iou: iou(pred, gt, 0.0)?,
            chamfer,
        })
    }
}

/// Conventions behind the numbers, stored with every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConventions {
    pub l1: String,
    pub iou: String,
    pub chamfer: String,
    pub chamfer_points: usize,
}

impl MetricConventions {
    pub fn new(chamfer_points: usize) -> Self {
        Self {
            l1: "mean |pred - gt| over voxels known in both, raw units; l1_normalized divides by thresh".into(),
            iou: "occupancy = value < 0".into(),
            chamfer: "mean squared nearest distance, summed over both directions, voxel units".into(),
            chamfer_points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub l1: f64,
    pub l1_normalized: f64,
    pub iou: f64,
    /// Mean over shapes with a defined Chamfer distance.
    pub chamfer: Option<f64>,
    pub shapes: usize,
    pub chamfer_shapes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub conventions: MetricConventions,
    pub shapes: Vec<ShapeMetrics>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(shapes: Vec<ShapeMetrics>, chamfer_points: usize) -> Result<Self> {
        if shapes.is_empty() {
            return Err(validation("a report needs at least one shape"));
        }
        let n = shapes.len() as f64;
        let mean = |f: fn(&ShapeMetrics) -> f64| shapes.iter().map(f).sum::<f64>() / n;
        let cds: Vec<f64> = shapes.iter().filter_map(|s| s.chamfer).collect();
        let aggregate = Aggregate {
            l1: mean(|s| s.l1),
            l1_normalized: mean(|s| s.l1_normalized),
            iou: mean(|s| s.iou),
            chamfer: (!cds.is_empty()).then(|| cds.iter().sum::<f64>() / cds.len() as f64),
            shapes: shapes.len(),
            chamfer_shapes: cds.len(),
        };
        Ok(Self {
            conventions: MetricConventions::new(chamfer_points),
            shapes,
            aggregate,
        })
    }

    /// Evaluates named (prediction, ground truth) pairs.
    pub fn evaluate(
        pairs: &[(String, &TsdfGrid, &TsdfGrid)],
        chamfer_points: usize,
    ) -> Result<Self> {
        let rows = pairs
            .iter()
            .map(|(name, p, g)| ShapeMetrics::compute(name, p, g, chamfer_points))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, chamfer_points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_keeps_small_sets_and_is_deterministic() {
        let pts: Vec<Vec3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(stratified_subsample(&pts, 20), pts);
        let a = stratified_subsample(&pts, 3);
        assert_eq!(a, stratified_subsample(&pts, 3));
        assert_eq!(a.len(), 3);
        assert!(a[0][0] < 3.0 && (3.0..6.0).contains(&a[1][0]) && a[2][0] >= 6.0);
    }
}
