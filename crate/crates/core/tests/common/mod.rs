#![allow(dead_code)]

use clusterpt_core::camera::Camera;
use clusterpt_core::distribution::{stride_transform, StrideLayout};
use clusterpt_core::render::{render_pixel, RenderSettings, SampleRange};
use clusterpt_core::scene::{Environment, Material, Mesh, SceneDesc, Sphere};
use clusterpt_core::{Dims, RadianceBuffer, Scene, Vec3};

pub fn v(x: f32, y: f32, z: f32) -> Vec3 {
    Vec3::new(x, y, z)
}

pub fn gloss() -> Scene {
    clusterpt_core::scene_file::load_named_scene("gloss", None).unwrap()
}

pub fn deform() -> Scene {
    clusterpt_core::scene_file::load_named_scene("deform", None).unwrap()
}

pub fn camera_at(z: f32) -> Camera {
    Camera::new(v(0.0, 0.0, z), v(0.0, 0.0, 0.0), v(0.0, 1.0, 0.0), 40.0)
}

/// A single sphere of `albedo` at the origin in a uniform environment.
pub fn furnace(albedo: f32, env: f32) -> Scene {
    Scene::new(SceneDesc {
        materials: vec![Material::Diffuse { albedo: Vec3::splat(albedo) }],
        meshes: Vec::<Mesh>::new(),
        spheres: vec![Sphere { center: Vec3::ZERO, radius: 1.0, material: 0 }],
        lights: vec![],
        environment: Environment::Constant { radiance: Vec3::splat(env) },
        camera: camera_at(4.0),
        animation: None,
    })
    .unwrap()
}

/// Renders every final pixel independently with the transform and sub-pixel the
/// stride mapping assigns it, in one pass over the full image.
pub fn stride_oracle(scene: &Scene, camera: &Camera, layout: &StrideLayout, spp: u32, seed: u64) -> RadianceBuffer {
    let settings = RenderSettings { seed, max_depth: clusterpt_core::render::DEFAULT_MAX_DEPTH };
    let mut out = RadianceBuffer::new(layout.full, spp, scene.frame_time());
    for y in 0..layout.full.height {
        for x in 0..layout.full.width {
            let k = (y % layout.h_n) * layout.w_n + x % layout.w_n;
            let (t, sub) = stride_transform(k, layout).unwrap();
            let frame = camera.frame(t.full_aspect(sub));
            let (sum, _) = render_pixel(scene, &frame, sub, &t, x / layout.w_n, y / layout.h_n, (x, y), SampleRange::spp(spp), &settings);
            let i = out.index(x, y);
            out.rgb[i] = sum;
        }
    }
    out
}

/// Root-mean-square error of per-pixel mean radiance over all channels.
pub fn rmse(a: &RadianceBuffer, b: &RadianceBuffer) -> f64 {
    assert_eq!(a.dims, b.dims);
    let mut acc = 0.0f64;
    for (p, q) in a.means().zip(b.means()) {
        for c in 0..3 {
            let d = p[c] as f64 - q[c] as f64;
            acc += d * d;
        }
    }
    (acc / (a.dims.pixel_count() * 3) as f64).sqrt()
}

pub fn dims(w: u32, h: u32) -> Dims {
    Dims::new(w, h)
}
