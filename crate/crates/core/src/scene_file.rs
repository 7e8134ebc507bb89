//! TOML scene files and the bundled scenes.
//!
//! ```toml
//! [camera]
//! position = [0.0, 1.6, 4.5]
//! look_at = [0.0, 0.5, 0.0]
//! up = [0.0, 1.0, 0.0]
//! fov = 40.0                      # vertical, degrees
//!
//! [environment]                   # kind = "constant" (radiance) or "gradient" (bottom, top)
//! kind = "gradient"
//! bottom = [0.05, 0.05, 0.05]
//! top = [0.5, 0.6, 0.8]
//!
//! [[materials]]                   # kind: diffuse | metal | dielectric | emissive
//! name = "floor"
//! kind = "diffuse"
//! albedo = [0.6, 0.6, 0.6]
//!
//! [[meshes]]                      # source: inline | blob | grid
//! material = "floor"
//! source = "inline"
//! positions = [[-1.0, 0.0, -1.0], [1.0, 0.0, -1.0], [0.0, 0.0, 1.0]]
//! indices = [[0, 2, 1]]
//!
//! [[spheres]]
//! center = [0.0, 0.5, 0.0]
//! radius = 0.5
//! material = "floor"
//!
//! [[lights]]                      # emits along edge_u x edge_v
//! corner = [-1.0, 3.5, -1.0]
//! edge_u = [2.0, 0.0, 0.0]
//! edge_v = [0.0, 0.0, 2.0]
//! radiance = [8.0, 8.0, 8.0]
//! ```
//!
//! `blob` meshes read `positions_file` (little-endian f32 triples) and
//! `indices_file` (little-endian u32 triples) relative to the scene file.
//! `grid` meshes are a flat `resolution[0] x resolution[1]` cell sheet in the
//! xz-plane. An optional `[animation]` table (`kind = "wave"`) animates one mesh.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::animation::{Animation, WaveSpec};
use crate::camera::Camera;
use crate::math::Vec3;
use crate::scene::{Environment, Material, Mesh, QuadLight, Scene, SceneDesc, SceneError, Sphere};

pub const BUNDLED_SCENES: &[(&str, &str)] =
    &[("gloss", include_str!("../scenes/gloss.toml")), ("deform", include_str!("../scenes/deform.toml"))];

#[derive(Debug, Error)]
pub enum SceneFileError {
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown material name {0:?}")]
    UnknownMaterial(String),
    #[error("duplicate material name {0:?}")]
    DuplicateMaterial(String),
    #[error("blob {path}: length {len} is not a multiple of 12 bytes")]
    BlobLength { path: PathBuf, len: usize },
    #[error("grid mesh needs a resolution of at least 1x1")]
    GridResolution,
    #[error("unknown scene {0:?}")]
    UnknownScene(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileCamera {
    position: Vec3,
    look_at: Vec3,
    up: Vec3,
    fov: f32,
}

#[derive(Debug, Deserialize)]
struct FileMaterial {
    name: String,
    #[serde(flatten)]
    material: Material,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
enum FileMeshSource {
    Inline { positions: Vec<Vec3>, indices: Vec<[u32; 3]> },
    Blob { positions_file: PathBuf, indices_file: PathBuf },
    Grid { center: Vec3, size: [f32; 2], resolution: [u32; 2] },
}

#[derive(Debug, Deserialize)]
struct FileMesh {
    material: String,
    #[serde(flatten)]
    source: FileMeshSource,
}

#[derive(Debug, Deserialize)]
struct FileSphere {
    center: Vec3,
    radius: f32,
    material: String,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum FileAnimation {
    Wave(WaveSpec),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    camera: FileCamera,
    #[serde(default)]
    environment: Environment,
    #[serde(default)]
    materials: Vec<FileMaterial>,
    #[serde(default)]
    meshes: Vec<FileMesh>,
    #[serde(default)]
    spheres: Vec<FileSphere>,
    #[serde(default)]
    lights: Vec<QuadLight>,
    animation: Option<FileAnimation>,
}

/// Flat sheet in the xz-plane with upward-facing triangles.
pub fn grid_mesh(center: Vec3, size: [f32; 2], resolution: [u32; 2], material: u32) -> Mesh {
    let [nx, nz] = resolution;
    let mut positions = Vec::with_capacity(((nx + 1) * (nz + 1)) as usize);
    for j in 0..=nz {
        for i in 0..=nx {
            let x = center.x + size[0] * (i as f32 / nx as f32 - 0.5);
            let z = center.z + size[1] * (j as f32 / nz as f32 - 0.5);
            positions.push(Vec3::new(x, center.y, z));
        }
    }
    let w = nx + 1;
    let mut indices = Vec::with_capacity((2 * nx * nz) as usize);
    for j in 0..nz {
        for i in 0..nx {
            let a = j * w + i;
            indices.push([a, a + w, a + 1]);
            indices.push([a + 1, a + w, a + w + 1]);
        }
    }
    Mesh { positions, indices, material }
}

fn read_blob(base: &Path, rel: &Path) -> Result<Vec<[u8; 4]>, SceneFileError> {
    let path = base.join(rel);
    let bytes = std::fs::read(&path).map_err(|source| SceneFileError::Io { path: path.clone(), source })?;
    if bytes.len() % 12 != 0 {
        return Err(SceneFileError::BlobLength { path, len: bytes.len() });
    }
    Ok(bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

/// Parses scene text; blob paths resolve against `base_dir`.
pub fn parse_scene(text: &str, base_dir: &Path) -> Result<SceneDesc, SceneFileError> {
    let file: SceneFile = toml::from_str(text)?;
    let mut names = HashMap::new();
    let mut materials = Vec::with_capacity(file.materials.len());
    for m in file.materials {
        if names.insert(m.name.clone(), materials.len() as u32).is_some() {
            return Err(SceneFileError::DuplicateMaterial(m.name));
        }
        materials.push(m.material);
    }
    let lookup = |name: &str| names.get(name).copied().ok_or_else(|| SceneFileError::UnknownMaterial(name.to_string()));

    let mut meshes = Vec::with_capacity(file.meshes.len());
    for m in file.meshes {
        let material = lookup(&m.material)?;
        let mesh = match m.source {
            FileMeshSource::Inline { positions, indices } => Mesh { positions, indices, material },
            FileMeshSource::Blob { positions_file, indices_file } => {
                let p = read_blob(base_dir, &positions_file)?;
                let positions = p
                    .chunks_exact(3)
                    .map(|c| Vec3::new(f32::from_le_bytes(c[0]), f32::from_le_bytes(c[1]), f32::from_le_bytes(c[2])))
                    .collect();
                let i = read_blob(base_dir, &indices_file)?;
                let indices = i
                    .chunks_exact(3)
                    .map(|c| [u32::from_le_bytes(c[0]), u32::from_le_bytes(c[1]), u32::from_le_bytes(c[2])])
                    .collect();
                Mesh { positions, indices, material }
            }
            FileMeshSource::Grid { center, size, resolution } => {
                if resolution[0] == 0 || resolution[1] == 0 {
                    return Err(SceneFileError::GridResolution);
                }
                grid_mesh(center, size, resolution, material)
            }
        };
        meshes.push(mesh);
    }
    let spheres = file
        .spheres
        .iter()
        .map(|s| Ok(Sphere { center: s.center, radius: s.radius, material: lookup(&s.material)? }))
        .collect::<Result<Vec<_>, SceneFileError>>()?;
    let animation = match file.animation {
        None => None,
        Some(FileAnimation::Wave(spec)) => {
            let mesh = meshes.get(spec.mesh as usize).ok_or_else(|| {
                SceneFileError::Scene(SceneError::Animation(format!("mesh {} does not exist", spec.mesh)))
            })?;
            Some(Animation::wave(spec, mesh))
        }
    };
    let c = file.camera;
    Ok(SceneDesc {
        materials,
        meshes,
        spheres,
        lights: file.lights,
        environment: file.environment,
        camera: Camera::new(c.position, c.look_at, c.up, c.fov),
        animation,
    })
}

pub fn load_scene_file(path: &Path) -> Result<SceneDesc, SceneFileError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| SceneFileError::Io { path: path.to_path_buf(), source })?;
    parse_scene(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn bundled_scene_text(name: &str) -> Option<&'static str> {
    BUNDLED_SCENES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Resolves a scene by name: `<scene_dir>/<name>.toml` when present, else a bundled scene.
/// A name ending in `.toml` is treated as a path.
pub fn load_named_scene(name: &str, scene_dir: Option<&Path>) -> Result<Scene, SceneFileError> {
    let desc = if name.ends_with(".toml") {
        load_scene_file(Path::new(name))?
    } else if let Some(path) = scene_dir.map(|d| d.join(format!("{name}.toml"))).filter(|p| p.exists()) {
        load_scene_file(&path)?
    } else {
        let text = bundled_scene_text(name).ok_or_else(|| SceneFileError::UnknownScene(name.to_string()))?;
        parse_scene(text, Path::new("."))?
    };
    Ok(Scene::new(desc)?)
}
