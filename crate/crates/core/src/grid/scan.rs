//! Virtual depth scans fused back into partial TSDF grids.

use super::{CameraPose, TsdfGrid};
use crate::error::{validation, Result};
use crate::render::render_field;
use crate::vec3;

/// Projective fusion of a single depth image rendered from `pose`.
///
/// Every voxel is projected into the camera. Voxels whose pixel saw no
/// surface are observed free space (`+thresh`). Otherwise the voxel's signed
/// distance along the ray is `depth - |p - camera|`; it is kept if it lies in
/// front of the surface or at most `thresh` behind it. Everything else is
/// unknown, with value 0.
pub fn simulate_partial_scan(full: &TsdfGrid, pose: &CameraPose) -> Result<TsdfGrid> {
    if full.known_mask().is_some() {
        return Err(validation(
            "partial scans need a complete grid without known mask",
        ));
    }
    pose.validate()?;
    let s = full.resolution();
    if s < 2 {
        return Err(validation("scan simulation needs resolution at least 2"));
    }
    let t = full.thresh() as f64;
    let out = render_field(full, pose);
    let frame = pose.frame();
    let w = pose.intrinsics.width;
    let mut values = vec![0.0f32; s.pow(3)];
    let mut known = vec![false; s.pow(3)];
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let p = [x as f64, y as f64, z as f64];
                let Some((u, v)) = pose.project(&frame, p) else {
                    continue;
                };
                let px = v * w + u;
                let idx = full.index(x, y, z);
                if !out.depth.hit[px] {
                    values[idx] = t as f32;
                    known[idx] = true;
                    continue;
                }
                let sdf = out.depth.depth[px] - vec3::norm(vec3::sub(p, pose.position));
                if sdf >= -t {
                    values[idx] = sdf.min(t) as f32;
                    known[idx] = true;
                }
            }
        }
    }
    TsdfGrid::new(s, full.thresh(), values, Some(known))
}

/// Union of the known sets; values are averaged where several scans
/// observed the same voxel.
pub fn fuse_scans(scans: &[TsdfGrid]) -> Result<TsdfGrid> {
    let first = scans
        .first()
        .ok_or_else(|| validation("no scans to fuse"))?;
    let (s, thresh) = (first.resolution(), first.thresh());
    let n = s.pow(3);
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for scan in scans {
        if scan.resolution() != s || scan.thresh() != thresh {
            return Err(validation("scans differ in resolution or truncation"));
        }
        for i in 0..n {
            if scan.is_known(i) {
                sum[i] += scan.values()[i] as f64;
                count[i] += 1;
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&v, &c)| if c > 0 { (v / c as f64) as f32 } else { 0.0 })
        .map(|v| v.clamp(-thresh, thresh))
        .collect();
    let known = count.iter().map(|&c| c > 0).collect();
    TsdfGrid::new(s, thresh, values, Some(known))
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

    fn front_pose(s: usize) -> CameraPose {
        let c = s as f64 / 2.0;
        CameraPose::new(
            [c, c, c + 1.6 * s as f64],
            [c, c, c],
            [0.0, 1.0, 0.0],
            Intrinsics::square(48, 60.0),
        )
        .unwrap()
    }

    #[test]
    fn head_on_scan_sees_front_not_back() {
        let g = sphere(32, 8.0);
        let scan = simulate_partial_scan(&g, &front_pose(32)).unwrap();
        let front = scan.index(16, 16, 26);
        assert!(scan.is_known(front));
        assert!(scan.values()[front] > 0.0);
        let back = scan.index(16, 16, 5);
        assert!(!scan.is_known(back));
        assert_eq!(scan.values()[back], 0.0);
        let fraction = scan.known_count() as f64 / scan.len() as f64;
        assert!(fraction > 0.0 && fraction < 1.0);
    }

    #[test]
    fn looking_away_gives_empty_mask() {
        let g = sphere(16, 4.0);
        let pose = CameraPose::new(
            [8.0, 8.0, 40.0],
            [8.0, 8.0, 80.0],
            [0.0, 1.0, 0.0],
            Intrinsics::square(16, 16.0),
        )
        .unwrap();
        let scan = simulate_partial_scan(&g, &pose).unwrap();
        assert_eq!(scan.known_count(), 0);
    }

    #[test]
    fn fusion_is_monotone() {
        let g = sphere(24, 6.0);
        let a = simulate_partial_scan(&g, &CameraPose::orbit(24, 0.0, 0.0, 1.6, 32)).unwrap();
        let b = simulate_partial_scan(&g, &CameraPose::orbit(24, 90.0, 0.0, 1.6, 32)).unwrap();
        let f = fuse_scans(&[a.clone(), b.clone()]).unwrap();
        for i in 0..f.len() {
            if a.is_known(i) || b.is_known(i) {
                assert!(f.is_known(i));
            }
        }
        assert!(f.known_count() > a.known_count().max(b.known_count()));
    }

    #[test]
    fn rejects_masked_input() {
        let g = sphere(16, 4.0);
        let scan = simulate_partial_scan(&g, &front_pose(16)).unwrap();
        assert!(simulate_partial_scan(&scan, &front_pose(16)).is_err());
        assert!(fuse_scans(&[]).is_err());
    }
}
