//! Procedural per-frame vertex animation.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::scene::Mesh;

/// Travelling sine wave along x, displacing y. Vertices with `x <= pinned_x` never
/// move; amplitude ramps up linearly from there to the far edge of the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveSpec {
    pub mesh: u32,
    pub amplitude: f32,
    pub wavelength: f32,
    /// Phase advance per frame, radians.
    pub speed: f32,
    pub pinned_x: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Animation {
    spec: WaveSpec,
    rest: Vec<Vec3>,
    x_max: f32,
}

impl Animation {
    /// Captures the mesh's current positions as the rest pose.
    pub fn wave(spec: WaveSpec, mesh: &Mesh) -> Animation {
        let x_max = mesh.positions.iter().map(|p| p.x).fold(f32::NEG_INFINITY, f32::max);
        Animation { spec, rest: mesh.positions.clone(), x_max }
    }

    pub fn spec(&self) -> &WaveSpec {
        &self.spec
    }

    pub fn mesh(&self) -> u32 {
        self.spec.mesh
    }

    pub(crate) fn validate(&self, meshes: &[Mesh]) -> Result<(), String> {
        let m = meshes.get(self.spec.mesh as usize).ok_or_else(|| format!("mesh {} does not exist", self.spec.mesh))?;
        if m.positions.len() != self.rest.len() {
            return Err("rest pose does not match the mesh".into());
        }
        if !(self.spec.wavelength > 0.0) || !self.spec.amplitude.is_finite() || !self.spec.speed.is_finite() {
            return Err("wave parameters must be finite with positive wavelength".into());
        }
        Ok(())
    }

    /// Vertex positions at `frame_time`; a pure function of the frame.
    pub fn positions_at(&self, frame_time: u64) -> Vec<Vec3> {
        let s = &self.spec;
        let span = (self.x_max - s.pinned_x).max(f32::MIN_POSITIVE);
        let phase = s.speed * (frame_time % (1 << 24)) as f32;
        self.rest
            .iter()
            .map(|&p| {
                let ramp = ((p.x - s.pinned_x) / span).clamp(0.0, 1.0);
                if ramp == 0.0 {
                    return p;
                }
                let dy = s.amplitude * ramp * (2.0 * PI * p.x / s.wavelength - phase).sin();
                Vec3::new(p.x, p.y + dy, p.z)
            })
            .collect()
    }
}
