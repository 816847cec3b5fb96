//! Pinhole cameras in voxel-unit world coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::vec3::{self, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point in pixels; pixel `(u, v)` has its centre at
    /// `(u + 0.5, v + 0.5)`.
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square image with the principal point at the image centre.
    pub fn square(size: usize, focal: f64) -> Self {
        Self {
            focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub intrinsics: Intrinsics,
}

/// Orthonormal camera frame.
#[derive(Clone, Copy, Debug)]
pub struct CameraFrame {
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
}

impl CameraPose {
    pub fn new(position: Vec3, look_at: Vec3, up: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let pose = Self {
            position,
            look_at,
            up,
            intrinsics,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let i = &self.intrinsics;
        if !(i.focal > 0.0) || i.width == 0 || i.height == 0 {
            return Err(validation(
                "camera intrinsics need positive focal length and image size",
            ));
        }
        let f = vec3::sub(self.look_at, self.position);
        let (Some(fw), Some(up)) = (vec3::normalize(f), vec3::normalize(self.up)) else {
            return Err(validation(
                "camera needs distinct position/look_at and a nonzero up vector",
            ));
        };
        if vec3::norm(vec3::cross(fw, up)) < 1e-9 {
            return Err(validation(
                "camera up vector is parallel to the viewing direction",
            ));
        }
        Ok(())
    }

    pub fn frame(&self) -> CameraFrame {
        let forward =
            vec3::normalize(vec3::sub(self.look_at, self.position)).expect("validated pose");
        let right = vec3::normalize(vec3::cross(forward, self.up)).expect("validated pose");
        let up = vec3::cross(right, forward);
        CameraFrame { forward, right, up }
    }

    pub fn pixel_count(&self) -> usize {
        self.intrinsics.width * self.intrinsics.height
    }

    /// Unit ray direction through the centre of pixel `(u, v)`; `v` grows
    /// downwards in the image.
    pub fn ray_direction(&self, frame: &CameraFrame, u: usize, v: usize) -> Vec3 {
        let i = &self.intrinsics;
        let x = (u as f64 + 0.5 - i.cx) / i.focal;
        let y = (v as f64 + 0.5 - i.cy) / i.focal;
        let d = vec3::add(
            frame.forward,
            vec3::sub(vec3::scale(frame.right, x), vec3::scale(frame.up, y)),
        );
        vec3::normalize(d).expect("forward component is one")
    }

    /// Pixel containing the projection of `p`, or `None` when `p` is behind
    /// the camera or outside the image.
    pub fn project(&self, frame: &CameraFrame, p: Vec3) -> Option<(usize, usize)> {
        let rel = vec3::sub(p, self.position);
        let zc = vec3::dot(rel, frame.forward);
        if zc <= 1e-9 {
            return None;
        }
        let i = &self.intrinsics;
        let x = i.cx + i.focal * vec3::dot(rel, frame.right) / zc;
        let y = i.cy - i.focal * vec3::dot(rel, frame.up) / zc;
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let (u, v) = (x.floor() as usize, y.floor() as usize);
        (u < i.width && v < i.height).then_some((u, v))
    }

    /// Camera on a circle around the centre of a grid of side `resolution`,
    /// at `radius_factor * resolution` from the centre. Angles in degrees;
    /// elevation is measured from the x/z plane towards +y.
    pub fn orbit(
        resolution: usize,
        azimuth_deg: f64,
        elevation_deg: f64,
        radius_factor: f64,
        image_size: usize,
    ) -> Self {
        let c = resolution as f64 / 2.0;
        let r = radius_factor * resolution as f64;
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let position = [
            c + r * el.cos() * az.sin(),
            c + r * el.sin(),
            c + r * el.cos() * az.cos(),
        ];
        // Frame the sphere bounding the volume.
        let half_fov = ((3f64).sqrt() * c / r).min(1.0).asin() * 1.05;
        let focal = image_size as f64 / 2.0 / half_fov.tan();
        Self {
            position,
            look_at: [c, c, c],
            up: [0.0, 1.0, 0.0],
            intrinsics: Intrinsics::square(image_size, focal),
        }
    }

    /// The fixed supervision views: four azimuths 90 degrees apart at 20
    /// degrees elevation, radius 1.6 times the grid side.
    pub fn fixed_views(resolution: usize, image_size: usize) -> Vec<Self> {
        (0..4)
            .map(|k| Self::orbit(resolution, 45.0 + 90.0 * k as f64, 20.0, 1.6, image_size))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_poses() {
        let i = Intrinsics::square(8, 8.0);
        assert!(CameraPose::new([0.0; 3], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0], i).is_err());
        assert!(CameraPose::new([0.0; 3], [0.0; 3], [0.0, 1.0, 0.0], i).is_err());
        let bad = Intrinsics { focal: 0.0, ..i };
        assert!(CameraPose::new([0.0; 3], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], bad).is_err());
        assert!(CameraPose::new([0.0; 3], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], i).is_ok());
    }

    #[test]
    fn projection_inverts_pixel_rays() {
        let pose = CameraPose::orbit(32, 30.0, 20.0, 1.6, 17);
        let frame = pose.frame();
        for (u, v) in [(0, 0), (8, 8), (16, 3), (5, 12)] {
            let d = pose.ray_direction(&frame, u, v);
            let p = vec3::add(pose.position, vec3::scale(d, 40.0));
            assert_eq!(pose.project(&frame, p), Some((u, v)));
        }
        let behind = vec3::sub(pose.position, frame.forward);
        assert_eq!(pose.project(&frame, behind), None);
    }

    #[test]
    fn orbit_views_see_the_whole_volume() {
        for pose in CameraPose::fixed_views(32, 24) {
            let frame = pose.frame();
            for corner in 0..8 {
                let p = [
                    if corner & 1 == 0 { 0.0 } else { 31.0 },
                    if corner & 2 == 0 { 0.0 } else { 31.0 },
                    if corner & 4 == 0 { 0.0 } else { 31.0 },
                ];
                assert!(pose.project(&frame, p).is_some());
            }
        }
    }
}
