//! Truncated signed distance grids, procedural shapes, virtual cameras and
//! partial-scan simulation.
//!
//! Coordinates are in voxel units: voxel `(i, j, k)` has its centre at the
//! world point `(i, j, k)`, and values are stored x-fastest. Distances are
//! negative inside a shape and positive outside.

mod camera;
mod io;
mod scan;
mod shape;

pub use camera::{CameraPose, Intrinsics};
pub use io::{load_grid, read_grid, save_grid, write_grid};
pub use scan::{fuse_scans, simulate_partial_scan};
pub use shape::{synthesize, CsgOp, Primitive, ShapePart, ShapeSpec};

use crate::error::{validation, Result};

/// Truncation threshold in voxels used by the reference configuration.
pub const DEFAULT_THRESH: f32 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TsdfGrid {
    resolution: usize,
    thresh: f32,
    values: Vec<f32>,
    known: Option<Vec<bool>>,
}

impl TsdfGrid {
    /// Builds a grid, checking extents and the truncation bound.
    pub fn new(
        resolution: usize,
        thresh: f32,
        values: Vec<f32>,
        known: Option<Vec<bool>>,
    ) -> Result<Self> {
        if resolution == 0 {
            return Err(validation("resolution must be positive"));
        }
        if !(thresh > 0.0 && thresh.is_finite()) {
            return Err(validation(format!("truncation {thresh} must be positive")));
        }
        let n = resolution.pow(3);
        if values.len() != n {
            return Err(validation(format!(
                "expected {n} values for resolution {resolution}, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.abs() <= thresh)) {
            return Err(validation(format!(
                "value {bad} outside [-{thresh}, {thresh}]"
            )));
        }
        if let Some(mask) = &known {
            if mask.len() != n {
                return Err(validation(format!(
                    "mask has {} entries, expected {n}",
                    mask.len()
                )));
            }
        }
        Ok(Self {
            resolution,
            thresh,
            values,
            known,
        })
    }

    /// Grid with every voxel set to `value` (clamped to the truncation band).
    pub fn filled(resolution: usize, thresh: f32, value: f32) -> Result<Self> {
        let v = value.clamp(-thresh, thresh);
        Self::new(resolution, thresh, vec![v; resolution.pow(3)], None)
    }

    /// Clamps arbitrary values into the truncation band first.
    pub fn from_unclamped(resolution: usize, thresh: f32, mut values: Vec<f32>) -> Result<Self> {
        for v in &mut values {
            *v = if v.is_nan() {
                thresh
            } else {
                v.clamp(-thresh, thresh)
            };
        }
        Self::new(resolution, thresh, values, None)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn thresh(&self) -> f32 {
        self.thresh
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn known_mask(&self) -> Option<&[bool]> {
        self.known.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn is_known(&self, idx: usize) -> bool {
        self.known.as_ref().map_or(true, |m| m[idx])
    }

    pub fn known_count(&self) -> usize {
        self.known
            .as_ref()
            .map_or(self.values.len(), |m| m.iter().filter(|&&k| k).count())
    }

    /// Values divided by the truncation threshold, in `[-1, 1]`.
    pub fn normalized(&self) -> Vec<f32> {
        self.values.iter().map(|v| v / self.thresh).collect()
    }

    /// Two-channel network input: normalised values followed by the mask
    /// (all ones when no mask is present).
    pub fn masked_channels(&self) -> Vec<f32> {
        let mut out = self.normalized();
        match &self.known {
            Some(m) => out.extend(m.iter().map(|&k| if k { 1.0 } else { 0.0 })),
            None => out.extend(std::iter::repeat(1.0).take(self.values.len())),
        }
        out
    }

    /// Same grid without the known mask.
    pub fn without_mask(&self) -> Self {
        Self {
            known: None,
            ..self.clone()
        }
    }

    /// Grid centre in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let c = self.resolution as f64 / 2.0;
        [c, c, c]
    }
}
