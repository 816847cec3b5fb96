//! Procedural shapes built from analytic signed distance primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TsdfGrid;
use crate::error::{validation, Result};
use crate::vec3::{self, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
    },
    Cylinder {
        center: Vec3,
        axis: Vec3,
        radius: f64,
        half_height: f64,
    },
}

impl Primitive {
    /// Exact signed distance from `p` (negative inside).
    pub fn distance(&self, p: Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => vec3::norm(vec3::sub(p, *center)) - radius,
            Primitive::Box {
                center,
                half_extents,
            } => {
                let d = vec3::sub(p, *center);
                let q = [
                    d[0].abs() - half_extents[0],
                    d[1].abs() - half_extents[1],
                    d[2].abs() - half_extents[2],
                ];
                let outside = vec3::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Cylinder {
                center,
                axis,
                radius,
                half_height,
            } => {
                let a = vec3::normalize(*axis).unwrap_or([0.0, 0.0, 1.0]);
                let d = vec3::sub(p, *center);
                let along = vec3::dot(d, a);
                let radial = vec3::norm(vec3::sub(d, vec3::scale(a, along)));
                let q = [radial - radius, along.abs() - half_height];
                let outside = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2)).sqrt();
                outside + q[0].max(q[1]).min(0.0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
            Primitive::Cylinder {
                axis,
                radius,
                half_height,
                ..
            } => *radius > 0.0 && *half_height > 0.0 && vec3::normalize(*axis).is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(validation(format!(
                "primitive has non-positive extents: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsgOp {
    Union,
    Subtract,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapePart {
    pub op: CsgOp,
    pub primitive: Primitive,
}

/// Ordered CSG composition. The first part seeds the shape; its operator
/// is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub parts: Vec<ShapePart>,
    #[serde(default)]
    pub seed: u64,
}

impl ShapeSpec {
    pub fn single(primitive: Primitive) -> Self {
        Self {
            parts: vec![ShapePart {
                op: CsgOp::Union,
                primitive,
            }],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(validation("shape spec has no primitives"));
        }
        for part in &self.parts {
            part.primitive.validate()?;
        }
        Ok(())
    }

    /// Composite distance bound: `min` for union, `max(a, -b)` for subtraction.
    pub fn distance(&self, p: Vec3) -> f64 {
        let mut parts = self.parts.iter();
        let mut d = parts
            .next()
            .map_or(f64::INFINITY, |s| s.primitive.distance(p));
        for part in parts {
            let e = part.primitive.distance(p);
            d = match part.op {
                CsgOp::Union => d.min(e),
                CsgOp::Subtract => d.max(-e),
            };
        }
        d
    }

    /// Random composite shape for a grid of side `resolution`, fully
    /// determined by `seed`.
    pub fn random(seed: u64, resolution: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = resolution as f64;
        let c = s / 2.0;
        let jitter = |rng: &mut ChaCha8Rng, amount: f64| -> Vec3 {
            [
                c + rng.gen_range(-amount..amount) * s,
                c + rng.gen_range(-amount..amount) * s,
                c + rng.gen_range(-amount..amount) * s,
            ]
        };
        let base_center = jitter(&mut rng, 0.04);
        let base = random_primitive(&mut rng, base_center, s, 0.16, 0.28);
        let mut parts = vec![ShapePart {
            op: CsgOp::Union,
            primitive: base,
        }];
        let extra = rng.gen_range(0..=2);
        for _ in 0..extra {
            let op = if rng.gen_bool(0.6) {
                CsgOp::Union
            } else {
                CsgOp::Subtract
            };
            let center = jitter(&mut rng, 0.14);
            let (lo, hi) = match op {
                CsgOp::Union => (0.08, 0.16),
                CsgOp::Subtract => (0.07, 0.13),
            };
            parts.push(ShapePart {
                op,
                primitive: random_primitive(&mut rng, center, s, lo, hi),
            });
        }
        Self { parts, seed }
    }

    /// Randomly perturbed copy of this spec (translation and scale about the
    /// grid centre), used to expand templates into a corpus.
    pub fn jittered(&self, seed: u64, resolution: usize, amount: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = resolution as f64;
        let c = s / 2.0;
        let k = 1.0 + rng.gen_range(-amount..=amount);
        let shift = [
            rng.gen_range(-amount..=amount) * s * 0.25,
            rng.gen_range(-amount..=amount) * s * 0.25,
            rng.gen_range(-amount..=amount) * s * 0.25,
        ];
        let tf = |p: Vec3| {
            vec3::add(
                vec3::add(vec3::scale(vec3::sub(p, [c, c, c]), k), [c, c, c]),
                shift,
            )
        };
        let parts = self
            .parts
            .iter()
            .map(|part| ShapePart {
                op: part.op,
                primitive: match &part.primitive {
                    Primitive::Sphere { center, radius } => Primitive::Sphere {
                        center: tf(*center),
                        radius: radius * k,
                    },
                    Primitive::Box {
                        center,
                        half_extents,
                    } => Primitive::Box {
                        center: tf(*center),
                        half_extents: vec3::scale(*half_extents, k),
                    },
                    Primitive::Cylinder {
                        center,
                        axis,
                        radius,
                        half_height,
                    } => Primitive::Cylinder {
                        center: tf(*center),
                        axis: *axis,
                        radius: radius * k,
                        half_height: half_height * k,
                    },
                },
            })
            .collect();
        Self { parts, seed }
    }
}

fn random_primitive(rng: &mut ChaCha8Rng, center: Vec3, s: f64, lo: f64, hi: f64) -> Primitive {
    let size = |rng: &mut ChaCha8Rng| rng.gen_range(lo..hi) * s;
    match rng.gen_range(0..3) {
        0 => Primitive::Sphere {
            center,
            radius: size(rng),
        },
        1 => Primitive::Box {
            center,
            half_extents: [size(rng), size(rng), size(rng)],
        },
        _ => {
            let axis = match rng.gen_range(0..3) {
                0 => [1.0, 0.0, 0.0],
                1 => [0.0, 1.0, 0.0],
                _ => [0.0, 0.0, 1.0],
            };
            Primitive::Cylinder {
                center,
                axis,
                radius: size(rng),
                half_height: size(rng),
            }
        }
    }
}

/// Samples the composed distance at every voxel centre and clamps it to the
/// truncation band.
pub fn synthesize(spec: &ShapeSpec, resolution: usize, thresh: f32) -> Result<TsdfGrid> {
    spec.validate()?;
    if resolution < 8 {
        return Err(validation(format!(
            "resolution {resolution} below minimum 8"
        )));
    }
    let t = thresh as f64;
    let mut values = Vec::with_capacity(resolution.pow(3));
    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let d = spec.distance([x as f64, y as f64, z as f64]);
                values.push(d.clamp(-t, t) as f32);
            }
        }
    }
    TsdfGrid::new(resolution, thresh, values, None)
}
