//! Pinhole camera and the per-pixel sample transform used by pixel striding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Ray, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("vertical fov {0} must lie strictly inside (0, 180) degrees")]
    Fov(f32),
    #[error("camera position coincides with look_at")]
    Degenerate,
    #[error("up vector is parallel to the view direction")]
    UpParallel,
    #[error("non-finite camera parameter")]
    NonFinite,
    #[error("invalid pixel transform: {0}")]
    Transform(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Degrees.
    pub vertical_fov: f32,
}

impl Camera {
    pub fn new(position: Vec3, look_at: Vec3, up: Vec3, vertical_fov: f32) -> Camera {
        Camera { position, look_at, up, vertical_fov }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.position.is_finite() && self.look_at.is_finite() && self.up.is_finite() && self.vertical_fov.is_finite())
        {
            return Err(CameraError::NonFinite);
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < 180.0) {
            return Err(CameraError::Fov(self.vertical_fov));
        }
        let fwd = self.look_at - self.position;
        if fwd.length_squared() == 0.0 {
            return Err(CameraError::Degenerate);
        }
        let c = fwd.normalize().cross(self.up);
        if self.up.length_squared() == 0.0 || c.length() <= 1e-6 * self.up.length() {
            return Err(CameraError::UpParallel);
        }
        Ok(())
    }

    /// Orthonormal frame for ray generation. `aspect` is width / height of the full image.
    pub fn frame(&self, aspect: f32) -> CameraFrame {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(self.up).normalize();
        let up = right.cross(forward);
        let half_h = (self.vertical_fov.to_radians() * 0.5).tan();
        CameraFrame { origin: self.position, forward, right: right * (half_h * aspect), up: up * half_h }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    origin: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
}

impl CameraFrame {
    /// Ray through normalized screen point `(sx, sy)`; `(0, 0)` is the top-left corner.
    #[inline]
    pub fn ray(&self, sx: f32, sy: f32) -> Ray {
        let dir = self.forward + self.right * (2.0 * sx - 1.0) + self.up * (1.0 - 2.0 * sy);
        Ray::new(self.origin, dir.normalize())
    }
}

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: u32,
    pub height: u32,
}

impl Dims {
    pub const fn new(width: u32, height: u32) -> Dims {
        Dims { width, height }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Scale applied to a pixel's sample bounds and translation applied to its sample
/// position, both in pixel units of the image being rendered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelTransform {
    pub scale: (f32, f32),
    pub translate: (f32, f32),
}

impl Default for PixelTransform {
    fn default() -> Self {
        PixelTransform::IDENTITY
    }
}

impl PixelTransform {
    pub const IDENTITY: PixelTransform = PixelTransform { scale: (1.0, 1.0), translate: (0.0, 0.0) };

    pub fn new(scale: (f32, f32), translate: (f32, f32)) -> Result<PixelTransform, CameraError> {
        let in_scale = |s: f32| s > 0.0 && s <= 1.0;
        let in_translate = |t: f32| (0.0..1.0).contains(&t);
        if !(in_scale(scale.0) && in_scale(scale.1)) {
            return Err(CameraError::Transform(format!("scale {scale:?} outside (0,1]")));
        }
        if !(in_translate(translate.0) && in_translate(translate.1)) {
            return Err(CameraError::Transform(format!("translate {translate:?} outside [0,1)")));
        }
        if translate.0 + scale.0 > 1.0 + 1e-6 || translate.1 + scale.1 > 1.0 + 1e-6 {
            return Err(CameraError::Transform("sub-cell leaves the pixel footprint".into()));
        }
        Ok(PixelTransform { scale, translate })
    }

    pub fn is_identity(&self) -> bool {
        *self == PixelTransform::IDENTITY
    }

    /// Stride factor and intra-block offset this transform selects along each axis.
    pub fn stride_cell(&self) -> ((u32, u32), (u32, u32)) {
        let fx = (1.0 / self.scale.0).round() as u32;
        let fy = (1.0 / self.scale.1).round() as u32;
        let ox = (self.translate.0 / self.scale.0).round() as u32;
        let oy = (self.translate.1 / self.scale.1).round() as u32;
        ((fx, fy), (ox, oy))
    }

    /// Aspect ratio of the full image this transform's sub-image is sampled from.
    pub fn full_aspect(&self, sub: Dims) -> f32 {
        (sub.width as f32 / self.scale.0) / (sub.height as f32 / self.scale.1)
    }

    /// Normalized screen position of jitter `(u, v)` in pixel `(px, py)` of `sub`.
    #[inline]
    pub fn screen_point(&self, sub: Dims, px: u32, py: u32, u: f32, v: f32) -> (f32, f32) {
        let x = px as f32 + self.translate.0 + self.scale.0 * u;
        let y = py as f32 + self.translate.1 + self.scale.1 * v;
        (x / sub.width as f32, y / sub.height as f32)
    }
}

/// Primary ray for jitter `(u, v)` inside pixel `(px, py)` of a `sub`-sized image.
pub fn sample_camera_ray(camera: &Camera, sub: Dims, px: u32, py: u32, u: f32, v: f32, transform: &PixelTransform) -> Ray {
    let frame = camera.frame(transform.full_aspect(sub));
    let (sx, sy) = transform.screen_point(sub, px, py, u, v);
    frame.ray(sx, sy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(Vec3::new(0.0, 0.0, 5.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 60.0)
    }

    #[test]
    fn validate_rejects_bad_cameras() {
        let mut c = cam();
        c.vertical_fov = 180.0;
        assert_eq!(c.validate(), Err(CameraError::Fov(180.0)));
        c.vertical_fov = 0.0;
        assert_eq!(c.validate(), Err(CameraError::Fov(0.0)));
        let mut c = cam();
        c.up = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(c.validate(), Err(CameraError::UpParallel));
        let mut c = cam();
        c.look_at = c.position;
        assert_eq!(c.validate(), Err(CameraError::Degenerate));
        assert!(cam().validate().is_ok());
    }

    #[test]
    fn identity_center_ray_hits_pixel_center() {
        // 1x1 image: the pixel center is the view axis.
        let r = sample_camera_ray(&cam(), Dims::new(1, 1), 0, 0, 0.5, 0.5, &PixelTransform::IDENTITY);
        assert!((r.dir - Vec3::new(0.0, 0.0, -1.0)).length() < 1e-6);
        // Pixel (1,1) of 4x4 at u=v=0.5 sits at screen (0.375, 0.375).
        let (sx, sy) = PixelTransform::IDENTITY.screen_point(Dims::new(4, 4), 1, 1, 0.5, 0.5);
        assert_eq!((sx, sy), (0.375, 0.375));
    }

    #[test]
    fn corner_cell_transform() {
        let t = PixelTransform::new((0.5, 0.5), (0.5, 0.5)).unwrap();
        let (sx, sy) = t.screen_point(Dims::new(2, 2), 0, 0, 0.0, 0.0);
        // pixel-space (0.5, 0.5) of a 2x2 sub-image
        assert_eq!((sx, sy), (0.25, 0.25));
        assert_eq!(t.stride_cell(), ((2, 2), (1, 1)));
    }

    #[test]
    fn transform_validation() {
        assert!(PixelTransform::new((0.0, 1.0), (0.0, 0.0)).is_err());
        assert!(PixelTransform::new((0.5, 0.5), (0.75, 0.0)).is_err());
        assert!(PixelTransform::new((0.5, 0.5), (1.0, 0.0)).is_err());
        assert!(PixelTransform::new((0.5, 0.25), (0.5, 0.75)).is_ok());
    }

    #[test]
    fn stride_transforms_tile_the_pixel_footprint() {
        // Monte-Carlo coverage: every point of the unit pixel is claimed by exactly one
        // of the four 2x2 sub-cells.
        let cells: Vec<PixelTransform> = [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)]
            .iter()
            .map(|&t| PixelTransform::new((0.5, 0.5), t).unwrap())
            .collect();
        let mut state = 0x1234_5678u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f32 / (1u64 << 24) as f32
        };
        let mut hits = [0usize; 4];
        for _ in 0..20_000 {
            let (x, y) = (next(), next());
            let owners: Vec<usize> = cells
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    x >= c.translate.0
                        && x < c.translate.0 + c.scale.0
                        && y >= c.translate.1
                        && y < c.translate.1 + c.scale.1
                })
                .map(|(i, _)| i)
                .collect();
            assert_eq!(owners.len(), 1, "point ({x},{y}) owned by {owners:?}");
            hits[owners[0]] += 1;
        }
        // and every sub-cell's samples land inside its own cell
        for c in &cells {
            for _ in 0..1000 {
                let (u, v) = (next(), next());
                let px = c.translate.0 + c.scale.0 * u;
                let py = c.translate.1 + c.scale.1 * v;
                assert!(px >= c.translate.0 && px < c.translate.0 + c.scale.0);
                assert!(py >= c.translate.1 && py < c.translate.1 + c.scale.1);
            }
        }
        for h in hits {
            assert!((4000..6000).contains(&h), "{hits:?}");
        }
    }
}
