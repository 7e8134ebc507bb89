//! Persistent scene state with frame-time updates.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::animation::Animation;
use crate::bvh::{Bvh, BvhError};
use crate::camera::{Camera, CameraError};
use crate::math::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("{what} references material {id} but only {count} materials exist")]
    MissingMaterial { what: String, id: u32, count: usize },
    #[error("mesh {mesh}: index {index} out of range for {vertices} vertices")]
    IndexOutOfRange { mesh: usize, index: u32, vertices: usize },
    #[error("invalid material {index}: {reason}")]
    InvalidMaterial { index: usize, reason: String },
    #[error("invalid light {index}: {reason}")]
    InvalidLight { index: usize, reason: String },
    #[error("sphere {index} has non-positive radius")]
    InvalidSphere { index: usize },
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("mesh {mesh}: {source}")]
    Bvh {
        mesh: usize,
        #[source]
        source: BvhError,
    },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("stale update: frame time {update} is older than scene frame time {scene}")]
    StaleUpdate { update: u64, scene: u64 },
    #[error("update targets mesh {0} which does not exist")]
    UnknownMesh(u32),
    #[error("mesh {mesh}: vertex range {start}..{end} exceeds {vertices} vertices")]
    RangeOutOfBounds { mesh: u32, start: u32, end: u64, vertices: usize },
    #[error("mesh {mesh}: vertex ranges must be sorted and disjoint")]
    OverlappingRanges { mesh: u32 },
    #[error("animation: {0}")]
    Animation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Material {
    Diffuse {
        albedo: Vec3,
    },
    Metal {
        albedo: Vec3,
        #[serde(default)]
        roughness: f32,
    },
    Dielectric {
        ior: f32,
        #[serde(default = "white")]
        albedo: Vec3,
    },
    Emissive {
        emission: Vec3,
    },
}

fn white() -> Vec3 {
    Vec3::ONE
}

impl Material {
    fn validate(&self) -> Result<(), String> {
        let unit = |v: Vec3| (0..3).all(|i| (0.0..=1.0).contains(&v[i]));
        match *self {
            Material::Diffuse { albedo } if !unit(albedo) => Err("albedo outside [0,1]".into()),
            Material::Metal { albedo, .. } if !unit(albedo) => Err("albedo outside [0,1]".into()),
            Material::Metal { roughness, .. } if !(0.0..=1.0).contains(&roughness) => {
                Err("roughness outside [0,1]".into())
            }
            Material::Dielectric { ior, .. } if !(ior > 1.0 && ior.is_finite()) => {
                Err("ior must be > 1".into())
            }
            Material::Dielectric { albedo, .. } if !unit(albedo) => Err("albedo outside [0,1]".into()),
            Material::Emissive { emission }
                if !(emission.is_finite() && emission.x >= 0.0 && emission.y >= 0.0 && emission.z >= 0.0) =>
            {
                Err("emission must be finite and >= 0".into())
            }
            _ => Ok(()),
        }
    }

    /// Reflectance used for the energy bound; emitters do not scatter.
    pub fn max_albedo(&self) -> f32 {
        match *self {
            Material::Diffuse { albedo } | Material::Metal { albedo, .. } | Material::Dielectric { albedo, .. } => {
                albedo.max_component()
            }
            Material::Emissive { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub positions: Vec<Vec3>,
    pub indices: Vec<[u32; 3]>,
    pub material: u32,
}

impl Mesh {
    pub fn triangle(&self, prim: usize) -> [Vec3; 3] {
        let [a, b, c] = self.indices[prim];
        [self.positions[a as usize], self.positions[b as usize], self.positions[c as usize]]
    }

    pub fn triangle_count(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f32,
    pub material: u32,
}

/// One-sided parallelogram emitter. Emits along `edge_u x edge_v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadLight {
    pub corner: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
    pub radiance: Vec3,
}

impl QuadLight {
    pub fn normal(&self) -> Vec3 {
        self.edge_u.cross(self.edge_v).normalize()
    }

    pub fn area(&self) -> f32 {
        self.edge_u.cross(self.edge_v).length()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Environment {
    Constant { radiance: Vec3 },
    /// Linear blend from `bottom` (straight down) to `top` (straight up).
    Gradient { bottom: Vec3, top: Vec3 },
}

impl Environment {
    #[inline]
    pub fn radiance(&self, dir: Vec3) -> Vec3 {
        match *self {
            Environment::Constant { radiance } => radiance,
            Environment::Gradient { bottom, top } => {
                let t = (0.5 * (dir.y + 1.0)).clamp(0.0, 1.0);
                bottom * (1.0 - t) + top * t
            }
        }
    }

    pub fn max_radiance(&self) -> f32 {
        match *self {
            Environment::Constant { radiance } => radiance.max_component(),
            Environment::Gradient { bottom, top } => bottom.max_component().max(top.max_component()),
        }
    }
}

impl Default for Environment {
    fn default() -> Self {
        Environment::Constant { radiance: Vec3::ZERO }
    }
}

/// Plain scene data, as loaded from a scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDesc {
    pub materials: Vec<Material>,
    pub meshes: Vec<Mesh>,
    pub spheres: Vec<Sphere>,
    pub lights: Vec<QuadLight>,
    pub environment: Environment,
    pub camera: Camera,
    pub animation: Option<Animation>,
}

/// Replacement positions for one contiguous vertex range of a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexRange {
    pub start: u32,
    pub positions: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshDelta {
    pub mesh: u32,
    pub ranges: Vec<VertexRange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneUpdate {
    pub frame_time: u64,
    pub meshes: Vec<MeshDelta>,
    pub camera: Option<Camera>,
}

impl SceneUpdate {
    pub fn empty(frame_time: u64) -> SceneUpdate {
        SceneUpdate { frame_time, meshes: Vec::new(), camera: None }
    }

    pub fn vertex_count(&self) -> usize {
        self.meshes.iter().flat_map(|m| &m.ranges).map(|r| r.positions.len()).sum()
    }

    /// Ranges covering every vertex of `old` that differs (bitwise) from `new`.
    pub fn diff_positions(old: &[Vec3], new: &[Vec3]) -> Vec<VertexRange> {
        let mut out = Vec::new();
        let mut i = 0;
        let same = |a: Vec3, b: Vec3| {
            a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits() && a.z.to_bits() == b.z.to_bits()
        };
        while i < new.len() {
            if i < old.len() && same(old[i], new[i]) {
                i += 1;
                continue;
            }
            let start = i;
            while i < new.len() && !(i < old.len() && same(old[i], new[i])) {
                i += 1;
            }
            out.push(VertexRange { start: start as u32, positions: new[start..i].to_vec() });
        }
        out
    }
}

/// What an update touched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    pub refit_meshes: Vec<u32>,
    pub rebuilt_meshes: Vec<u32>,
    pub vertices_written: usize,
    pub camera_changed: bool,
}

#[derive(Debug, Clone)]
pub struct Scene {
    materials: Vec<Material>,
    meshes: Vec<Mesh>,
    bvhs: Vec<Bvh>,
    spheres: Vec<Sphere>,
    lights: Vec<QuadLight>,
    environment: Environment,
    camera: Camera,
    animation: Option<Animation>,
    frame_time: u64,
}

impl Scene {
    pub fn new(desc: SceneDesc) -> Result<Scene, SceneError> {
        let SceneDesc { materials, meshes, spheres, lights, environment, camera, animation } = desc;
        for (index, m) in materials.iter().enumerate() {
            m.validate().map_err(|reason| SceneError::InvalidMaterial { index, reason })?;
        }
        let check_mat = |what: String, id: u32| {
            if (id as usize) < materials.len() {
                Ok(())
            } else {
                Err(SceneError::MissingMaterial { what, id, count: materials.len() })
            }
        };
        for (i, m) in meshes.iter().enumerate() {
            check_mat(format!("mesh {i}"), m.material)?;
            let vertices = m.positions.len();
            if let Some(&index) = m.indices.iter().flatten().find(|&&ix| ix as usize >= vertices) {
                return Err(SceneError::IndexOutOfRange { mesh: i, index, vertices });
            }
        }
        for (index, s) in spheres.iter().enumerate() {
            check_mat(format!("sphere {index}"), s.material)?;
            if !(s.radius > 0.0 && s.radius.is_finite()) {
                return Err(SceneError::InvalidSphere { index });
            }
        }
        for (index, l) in lights.iter().enumerate() {
            let r = l.radiance;
            if !(r.is_finite() && r.x >= 0.0 && r.y >= 0.0 && r.z >= 0.0) {
                return Err(SceneError::InvalidLight { index, reason: "radiance must be finite and >= 0".into() });
            }
            if l.area() <= 0.0 || !l.area().is_finite() {
                return Err(SceneError::InvalidLight { index, reason: "zero area".into() });
            }
        }
        let env_ok = match environment {
            Environment::Constant { radiance } => radiance.is_finite() && radiance.min(Vec3::ZERO) == Vec3::ZERO,
            Environment::Gradient { bottom, top } => {
                bottom.is_finite()
                    && top.is_finite()
                    && bottom.min(Vec3::ZERO) == Vec3::ZERO
                    && top.min(Vec3::ZERO) == Vec3::ZERO
            }
        };
        if !env_ok {
            return Err(SceneError::InvalidEnvironment("radiance must be finite and >= 0".into()));
        }
        camera.validate()?;
        if let Some(anim) = &animation {
            anim.validate(&meshes).map_err(SceneError::Animation)?;
        }
        let bvhs = meshes
            .iter()
            .enumerate()
            .map(|(i, m)| Bvh::build(m).map_err(|source| SceneError::Bvh { mesh: i, source }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Scene { materials, meshes, bvhs, spheres, lights, environment, camera, animation, frame_time: 0 })
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    pub fn meshes(&self) -> &[Mesh] {
        &self.meshes
    }

    pub fn bvh(&self, mesh: usize) -> &Bvh {
        &self.bvhs[mesh]
    }

    pub fn spheres(&self) -> &[Sphere] {
        &self.spheres
    }

    pub fn lights(&self) -> &[QuadLight] {
        &self.lights
    }

    pub fn environment(&self) -> &Environment {
        &self.environment
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn animation(&self) -> Option<&Animation> {
        self.animation.as_ref()
    }

    pub fn frame_time(&self) -> u64 {
        self.frame_time
    }

    pub fn triangle_count(&self) -> usize {
        self.meshes.iter().map(Mesh::triangle_count).sum()
    }

    /// Applies a frame-time update in place. Touched meshes are refit, never rebuilt,
    /// unless a triangle that was degenerate at build time has gained area (the tree
    /// does not contain it, so only a rebuild can make it visible).
    ///
    /// Validation happens before any mutation: a rejected update leaves the scene untouched.
    pub fn apply_update(&mut self, update: &SceneUpdate) -> Result<UpdateReport, SceneError> {
        if update.frame_time < self.frame_time {
            return Err(SceneError::StaleUpdate { update: update.frame_time, scene: self.frame_time });
        }
        for delta in &update.meshes {
            let mesh = self.meshes.get(delta.mesh as usize).ok_or(SceneError::UnknownMesh(delta.mesh))?;
            let vertices = mesh.positions.len();
            let mut prev_end = 0u64;
            for (i, r) in delta.ranges.iter().enumerate() {
                let end = r.start as u64 + r.positions.len() as u64;
                if end > vertices as u64 {
                    return Err(SceneError::RangeOutOfBounds { mesh: delta.mesh, start: r.start, end, vertices });
                }
                if i > 0 && (r.start as u64) < prev_end {
                    return Err(SceneError::OverlappingRanges { mesh: delta.mesh });
                }
                prev_end = end;
            }
            if update.meshes.iter().filter(|d| d.mesh == delta.mesh).count() > 1 {
                return Err(SceneError::OverlappingRanges { mesh: delta.mesh });
            }
        }
        if let Some(cam) = &update.camera {
            cam.validate()?;
        }

        let mut report = UpdateReport::default();
        for delta in &update.meshes {
            let id = delta.mesh as usize;
            let mesh = &mut self.meshes[id];
            for r in &delta.ranges {
                let start = r.start as usize;
                mesh.positions[start..start + r.positions.len()].copy_from_slice(&r.positions);
                report.vertices_written += r.positions.len();
            }
            match self.bvhs[id].refit(mesh) {
                Ok(()) => report.refit_meshes.push(delta.mesh),
                Err(BvhError::DegeneracyChanged) => {
                    self.bvhs[id] = Bvh::build(mesh).map_err(|source| SceneError::Bvh { mesh: id, source })?;
                    report.rebuilt_meshes.push(delta.mesh);
                }
                Err(source) => return Err(SceneError::Bvh { mesh: id, source }),
            }
        }
        if let Some(cam) = update.camera {
            self.camera = cam;
            report.camera_changed = true;
        }
        self.frame_time = update.frame_time;
        Ok(report)
    }

    /// Update that moves the scene's animated geometry to `frame_time`, carrying only
    /// the vertices that differ from the current state. Empty for static scenes.
    pub fn animation_update(&self, frame_time: u64) -> SceneUpdate {
        let mut update = SceneUpdate::empty(frame_time);
        if let Some(anim) = &self.animation {
            let mesh = anim.mesh() as usize;
            let target = anim.positions_at(frame_time);
            let ranges = SceneUpdate::diff_positions(&self.meshes[mesh].positions, &target);
            if !ranges.is_empty() {
                update.meshes.push(MeshDelta { mesh: mesh as u32, ranges });
            }
        }
        update
    }

    /// Digest over geometry, camera and frame time; used to compare replicas across processes.
    pub fn state_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.frame_time.to_le_bytes());
        for m in &self.meshes {
            h.update((m.positions.len() as u64).to_le_bytes());
            for p in &m.positions {
                for c in p.to_array() {
                    h.update(c.to_le_bytes());
                }
            }
            for t in &m.indices {
                for i in t {
                    h.update(i.to_le_bytes());
                }
            }
            h.update(m.material.to_le_bytes());
        }
        for s in &self.spheres {
            for c in s.center.to_array() {
                h.update(c.to_le_bytes());
            }
            h.update(s.radius.to_le_bytes());
        }
        let c = &self.camera;
        for v in [c.position, c.look_at, c.up] {
            for x in v.to_array() {
                h.update(x.to_le_bytes());
            }
        }
        h.update(c.vertical_fov.to_le_bytes());
        h.finalize().into()
    }
}

/// Fingerprint of a triangle index list, used to detect topology changes.
pub(crate) fn topology_fingerprint(indices: &[[u32; 3]]) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_usize(indices.len());
    for t in indices {
        for &i in t {
            h.write_u32(i);
        }
    }
    h.finish()
}
