//! Unidirectional path tracing with next-event estimation toward quad lights,
//! combined with BSDF sampling by the balance heuristic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsdf::{self, is_delta};
use crate::buffer::RadianceBuffer;
use crate::camera::{Camera, CameraFrame, Dims, PixelTransform};
use crate::geometry::{intersect_quad, intersect_sphere};
use crate::math::{Ray, Vec3};
use crate::rng::SampleKey;
use crate::scene::{Material, Scene};

pub const DEFAULT_MAX_DEPTH: u32 = 10;

const T_MIN: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Rect {
        Rect { x, y, width, height }
    }

    pub fn full(d: Dims) -> Rect {
        Rect::new(0, 0, d.width, d.height)
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.width, self.height)
    }

    pub fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// The set of pixels one render call produces.
///
/// `sub_dims` is the image the transform's pixel grid lives in (the full image for
/// tiling and sample splitting, the strided sub-image for pixel striding); `window`
/// selects the rectangle of that grid to render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub sub_dims: Dims,
    pub transform: PixelTransform,
    pub window: Rect,
}

impl Region {
    pub fn full(dims: Dims) -> Region {
        Region { sub_dims: dims, transform: PixelTransform::IDENTITY, window: Rect::full(dims) }
    }

    pub fn strided(sub_dims: Dims, transform: PixelTransform) -> Region {
        Region { sub_dims, transform, window: Rect::full(sub_dims) }
    }

    pub fn tile(dims: Dims, window: Rect) -> Region {
        Region { sub_dims: dims, transform: PixelTransform::IDENTITY, window }
    }

    /// Final-image coordinates of window pixel `(lx, ly)`; these key the random streams.
    #[inline]
    pub fn global_pixel(&self, lx: u32, ly: u32) -> (u32, u32) {
        let ((fx, fy), (ox, oy)) = self.transform.stride_cell();
        ((self.window.x + lx) * fx + ox, (self.window.y + ly) * fy + oy)
    }
}

/// Half-open range of global sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRange {
    pub first: u32,
    pub count: u32,
}

impl SampleRange {
    pub fn new(first: u32, count: u32) -> SampleRange {
        SampleRange { first, count }
    }

    pub fn spp(count: u32) -> SampleRange {
        SampleRange { first: 0, count }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderSettings {
    pub seed: u64,
    pub max_depth: u32,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { seed: 0, max_depth: DEFAULT_MAX_DEPTH }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub buffer: RadianceBuffer,
    /// Samples whose radiance was NaN or infinite and was replaced by zero.
    pub nonfinite_samples: u64,
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    Mesh { mesh: u32 },
    Sphere(u32),
    Light(u32),
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f32,
    point: Vec3,
    normal: Vec3,
    surface: Surface,
}

fn intersect_scene(scene: &Scene, ray: &Ray, t_max: f32) -> Option<Hit> {
    let mut best: Option<(f32, Surface, Vec3)> = None;
    let mut limit = t_max;
    for (i, mesh) in scene.meshes().iter().enumerate() {
        if let Some(h) = scene.bvh(i).intersect(mesh, ray, T_MIN, limit) {
            limit = h.t;
            best = Some((h.t, Surface::Mesh { mesh: i as u32 }, h.normal));
        }
    }
    for (i, s) in scene.spheres().iter().enumerate() {
        if let Some(t) = intersect_sphere(ray, s, T_MIN, limit) {
            limit = t;
            best = Some((t, Surface::Sphere(i as u32), Vec3::ZERO));
        }
    }
    for (i, q) in scene.lights().iter().enumerate() {
        if let Some((t, _, _)) = intersect_quad(ray, q, T_MIN, limit) {
            limit = t;
            best = Some((t, Surface::Light(i as u32), q.normal()));
        }
    }
    best.map(|(t, surface, n)| {
        let point = ray.at(t);
        let normal = match surface {
            Surface::Sphere(i) => {
                let s = &scene.spheres()[i as usize];
                (point - s.center) / s.radius
            }
            _ => n,
        };
        Hit { t, point, normal, surface }
    })
}

fn occluded(scene: &Scene, ray: &Ray, t_max: f32) -> bool {
    scene.meshes().iter().enumerate().any(|(i, m)| scene.bvh(i).occluded(m, ray, T_MIN, t_max))
        || scene.spheres().iter().any(|s| intersect_sphere(ray, s, T_MIN, t_max).is_some())
        || scene.lights().iter().any(|q| intersect_quad(ray, q, T_MIN, t_max).is_some())
}

#[inline]
fn offset_origin(p: Vec3, n: Vec3, dir: Vec3) -> Vec3 {
    let scale = 1e-4 * p.x.abs().max(p.y.abs()).max(p.z.abs()).max(1.0);
    if n.dot(dir) >= 0.0 {
        p + n * scale
    } else {
        p - n * scale
    }
}

/// Radiance arriving along `ray`, estimated with one path.
fn trace(scene: &Scene, mut ray: Ray, key: &SampleKey, max_depth: u32) -> Vec3 {
    let lights = scene.lights();
    let light_pick = 1.0 / lights.len().max(1) as f32;
    let mut radiance = Vec3::ZERO;
    let mut beta = Vec3::ONE;
    // Solid-angle pdf of the BSDF sample that produced `ray`; None after camera or delta events.
    let mut prev_pdf: Option<f32> = None;

    for depth in 0..max_depth {
        let Some(hit) = intersect_scene(scene, &ray, f32::INFINITY) else {
            radiance += beta.mul_elem(scene.environment().radiance(ray.dir));
            break;
        };
        let material = match hit.surface {
            Surface::Light(i) => {
                let q = &lights[i as usize];
                let cos_l = -ray.dir.dot(hit.normal);
                if cos_l > 0.0 {
                    let w = match prev_pdf {
                        None => 1.0,
                        Some(pdf_b) => {
                            let pdf_l = hit.t * hit.t / (cos_l * q.area()) * light_pick;
                            pdf_b / (pdf_b + pdf_l)
                        }
                    };
                    radiance += beta.mul_elem(q.radiance) * w;
                }
                break;
            }
            Surface::Mesh { mesh } => scene.materials()[scene.meshes()[mesh as usize].material as usize],
            Surface::Sphere(i) => scene.materials()[scene.spheres()[i as usize].material as usize],
        };
        if let Material::Emissive { emission } = material {
            radiance += beta.mul_elem(emission);
            break;
        }

        let wo = -ray.dir;
        let facing = if hit.normal.dot(wo) < 0.0 { -hit.normal } else { hit.normal };
        let mut rs = key.stream(depth + 1);
        let u_pick = rs.next();
        let (u_l0, u_l1) = rs.next2();
        let u_bsdf = [rs.next(), rs.next(), rs.next()];

        if !is_delta(&material) && !lights.is_empty() {
            let idx = ((u_pick * lights.len() as f32) as usize).min(lights.len() - 1);
            let q = &lights[idx];
            let target = q.corner + q.edge_u * u_l0 + q.edge_v * u_l1;
            let origin = offset_origin(hit.point, facing, facing);
            let to = target - origin;
            let dist2 = to.length_squared();
            let dist = dist2.sqrt();
            let wi = to / dist;
            let cos_l = -wi.dot(q.normal());
            let cos_s = facing.dot(wi);
            if cos_l > 0.0 && cos_s > 0.0 {
                let pdf_l = dist2 / (cos_l * q.area()) * light_pick;
                let (f, pdf_b) = bsdf::eval(&material, wo, wi, facing);
                if f != Vec3::ZERO && !occluded(scene, &Ray::new(origin, wi), dist * (1.0 - 1e-4)) {
                    radiance += beta.mul_elem(f.mul_elem(q.radiance)) * (cos_s / (pdf_l + pdf_b));
                }
            }
        }

        let shading_n = if matches!(material, Material::Dielectric { .. }) { hit.normal } else { facing };
        let Some(bs) = bsdf::sample(&material, wo, shading_n, u_bsdf) else {
            break;
        };
        beta = beta.mul_elem(bs.weight);
        if beta == Vec3::ZERO {
            break;
        }
        ray = Ray::new(offset_origin(hit.point, hit.normal, bs.wi), bs.wi);
        prev_pdf = (!bs.delta).then_some(bs.pdf);
    }
    radiance
}

/// Sums `samples` of one pixel. `(sub_px, sub_py)` addresses the transform's pixel
/// grid; `(gx, gy)` are the final-image coordinates that key the random streams.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn render_pixel(
    scene: &Scene,
    frame: &CameraFrame,
    sub_dims: Dims,
    transform: &PixelTransform,
    sub_px: u32,
    sub_py: u32,
    global: (u32, u32),
    samples: SampleRange,
    settings: &RenderSettings,
) -> ([f32; 3], u64) {
    let mut sum = [0.0f32; 3];
    let mut bad = 0u64;
    for s in samples.first..samples.first + samples.count {
        let key = SampleKey::new(settings.seed, global.0, global.1, s);
        let mut jitter = key.stream(0);
        let (u, v) = jitter.next2();
        let (sx, sy) = transform.screen_point(sub_dims, sub_px, sub_py, u, v);
        let l = trace(scene, frame.ray(sx, sy), &key, settings.max_depth);
        if l.is_finite() {
            sum[0] += l.x;
            sum[1] += l.y;
            sum[2] += l.z;
        } else {
            bad += 1;
        }
    }
    (sum, bad)
}

/// Renders `region` with the given global sample range. The result is a pure
/// function of the arguments; internal parallelism never changes a bit.
pub fn render_region(
    scene: &Scene,
    camera: &Camera,
    region: &Region,
    samples: SampleRange,
    settings: &RenderSettings,
) -> RenderOutput {
    assert!(samples.count >= 1, "render_region needs at least one sample per pixel");
    let frame = camera.frame(region.transform.full_aspect(region.sub_dims));
    let dims = region.window.dims();
    let mut buffer = RadianceBuffer::new(dims, samples.count, scene.frame_time());
    let width = dims.width as usize;
    let nonfinite = if width == 0 {
        0
    } else {
        buffer
            .rgb
            .par_chunks_mut(width)
            .enumerate()
            .map(|(ly, row)| {
                let mut bad = 0;
                for (lx, px) in row.iter_mut().enumerate() {
                    let (lx, ly) = (lx as u32, ly as u32);
                    let (sum, b) = render_pixel(
                        scene,
                        &frame,
                        region.sub_dims,
                        &region.transform,
                        region.window.x + lx,
                        region.window.y + ly,
                        region.global_pixel(lx, ly),
                        samples,
                        settings,
                    );
                    *px = sum;
                    bad += b;
                }
                bad
            })
            .sum()
    };
    if nonfinite > 0 {
        log::warn!("render: {nonfinite} non-finite samples clamped to zero");
    }
    RenderOutput { buffer, nonfinite_samples: nonfinite }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Environment, Mesh, QuadLight, SceneDesc, Sphere};

    fn cam() -> Camera {
        Camera::new(Vec3::new(0.0, 0.0, 3.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 40.0)
    }

    fn desc(env: Environment) -> SceneDesc {
        SceneDesc {
            materials: vec![],
            meshes: vec![],
            spheres: vec![],
            lights: vec![],
            environment: env,
            camera: cam(),
            animation: None,
        }
    }

    #[test]
    fn constant_environment_is_exact() {
        let scene = Scene::new(desc(Environment::Constant { radiance: Vec3::ONE })).unwrap();
        let out = render_region(&scene, &cam(), &Region::full(Dims::new(8, 6)), SampleRange::spp(3), &RenderSettings::default());
        for m in out.buffer.means() {
            assert_eq!(m, [1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn emissive_quad_filling_the_frame() {
        let mut d = desc(Environment::Constant { radiance: Vec3::new(0.0, 5.0, 0.0) });
        d.materials.push(Material::Emissive { emission: Vec3::new(2.0, 0.0, 0.0) });
        let s = 10.0;
        d.meshes.push(Mesh {
            positions: vec![
                Vec3::new(-s, -s, 0.0),
                Vec3::new(s, -s, 0.0),
                Vec3::new(s, s, 0.0),
                Vec3::new(-s, s, 0.0),
            ],
            indices: vec![[0, 1, 2], [0, 2, 3]],
            material: 0,
        });
        let scene = Scene::new(d).unwrap();
        let settings = RenderSettings { seed: 3, max_depth: 1 };
        let out = render_region(&scene, &cam(), &Region::full(Dims::new(16, 16)), SampleRange::spp(1), &settings);
        for m in out.buffer.means() {
            assert_eq!(m, [2.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn quad_light_seen_directly() {
        let mut d = desc(Environment::default());
        d.lights.push(QuadLight {
            corner: Vec3::new(-5.0, -5.0, 0.0),
            edge_u: Vec3::new(10.0, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 10.0, 0.0),
            radiance: Vec3::new(0.5, 1.0, 1.5),
        });
        let scene = Scene::new(d).unwrap();
        let out = render_region(&scene, &cam(), &Region::full(Dims::new(4, 4)), SampleRange::spp(2), &RenderSettings::default());
        for m in out.buffer.means() {
            assert_eq!(m, [0.5, 1.0, 1.5]);
        }
        // seen from behind the light is opaque and black
        let back = Camera::new(Vec3::new(0.0, 0.0, -3.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 40.0);
        let out = render_region(&scene, &back, &Region::full(Dims::new(4, 4)), SampleRange::spp(2), &RenderSettings::default());
        for m in out.buffer.means() {
            assert_eq!(m, [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn rendering_is_deterministic_and_partition_invariant() {
        let mut d = desc(Environment::Gradient { bottom: Vec3::splat(0.1), top: Vec3::new(0.6, 0.7, 1.0) });
        d.materials.push(Material::Diffuse { albedo: Vec3::splat(0.7) });
        d.materials.push(Material::Metal { albedo: Vec3::splat(0.9), roughness: 0.3 });
        d.spheres.push(Sphere { center: Vec3::new(-0.5, 0.0, 0.0), radius: 0.5, material: 0 });
        d.spheres.push(Sphere { center: Vec3::new(0.6, 0.0, 0.0), radius: 0.4, material: 1 });
        d.lights.push(QuadLight {
            corner: Vec3::new(-1.0, 2.0, -1.0),
            edge_u: Vec3::new(0.0, 0.0, 2.0),
            edge_v: Vec3::new(2.0, 0.0, 0.0),
            radiance: Vec3::splat(4.0),
        });
        let scene = Scene::new(d).unwrap();
        let dims = Dims::new(12, 10);
        let settings = RenderSettings { seed: 11, max_depth: 6 };
        let a = render_region(&scene, &cam(), &Region::full(dims), SampleRange::spp(4), &settings).buffer;
        let b = render_region(&scene, &cam(), &Region::full(dims), SampleRange::spp(4), &settings).buffer;
        assert!(a.bitwise_eq(&b));
        // two horizontal halves stitched
        let top = render_region(&scene, &cam(), &Region::tile(dims, Rect::new(0, 0, 12, 4)), SampleRange::spp(4), &settings).buffer;
        let bot = render_region(&scene, &cam(), &Region::tile(dims, Rect::new(0, 4, 12, 6)), SampleRange::spp(4), &settings).buffer;
        let mut rgb = top.rgb.clone();
        rgb.extend_from_slice(&bot.rgb);
        let stitched = RadianceBuffer::from_sums(dims, 4, 0, rgb).unwrap();
        assert!(stitched.bitwise_eq(&a));
        assert!(a.all_finite());
    }

    #[test]
    fn global_pixel_of_strided_region() {
        let t = PixelTransform::new((0.5, 0.5), (0.5, 0.0)).unwrap();
        let r = Region::strided(Dims::new(2, 2), t);
        assert_eq!(r.global_pixel(1, 1), (3, 2));
        assert_eq!(Region::tile(Dims::new(8, 8), Rect::new(4, 2, 2, 2)).global_pixel(1, 0), (5, 2));
    }
}
