mod common;

use clusterpt_core::render::{render_region, Region, RenderSettings, SampleRange};
use clusterpt_core::scene::{Environment, Material, QuadLight, SceneDesc, Sphere};
use clusterpt_core::{Dims, Scene, Vec3};
use common::v;
use proptest::prelude::*;

fn render(scene: &Scene, d: Dims, samples: SampleRange, seed: u64) -> clusterpt_core::RenderOutput {
    let settings = RenderSettings { seed, ..RenderSettings::default() };
    render_region(scene, scene.camera(), &Region::full(d), samples, &settings)
}

/// Pixels whose whole footprint lies on the sphere or entirely off it.
fn classify(scene: &Scene, d: Dims) -> Vec<Option<bool>> {
    let cam = scene.camera();
    let frame = cam.frame(d.width as f32 / d.height as f32);
    let mut out = Vec::new();
    for y in 0..d.height {
        for x in 0..d.width {
            let mut hits = 0;
            for (u, w) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.5, 0.5)] {
                let r = frame.ray((x as f32 + u) / d.width as f32, (y as f32 + w) / d.height as f32);
                let oc = r.origin;
                let b = oc.dot(r.dir);
                let c = oc.dot(oc) - 1.0;
                if b * b - c > 0.0 {
                    hits += 1;
                }
            }
            out.push(match hits {
                5 => Some(true),
                0 => Some(false),
                _ => None,
            });
        }
    }
    out
}

#[test]
fn furnace_half_albedo_sphere() {
    let scene = common::furnace(0.5, 1.0);
    let d = Dims::new(32, 32);
    let out = render(&scene, d, SampleRange::spp(64), 0);
    let class = classify(&scene, d);
    let (mut inside, mut outside) = (0, 0);
    for (m, c) in out.buffer.means().zip(class) {
        match c {
            Some(true) => {
                inside += 1;
                for ch in m {
                    assert!((ch - 0.5).abs() <= 0.01, "sphere pixel {ch}");
                }
            }
            Some(false) => {
                outside += 1;
                assert_eq!(m, [1.0; 3]);
            }
            None => {}
        }
    }
    assert!(inside > 50 && outside > 50);
}

#[test]
fn furnace_white_sphere_is_invisible() {
    let scene = common::furnace(1.0, 1.0);
    let out = render(&scene, Dims::new(24, 24), SampleRange::spp(32), 5);
    for m in out.buffer.means() {
        for ch in m {
            assert!((ch - 1.0).abs() <= 0.02, "{ch}");
        }
    }
}

#[test]
fn no_nan_on_bundled_scenes() {
    for scene in [common::gloss(), common::deform()] {
        let out = render(&scene, Dims::new(24, 16), SampleRange::spp(4), 1);
        assert!(out.buffer.all_finite());
        assert_eq!(out.nonfinite_samples, 0);
    }
}

#[test]
fn rmse_falls_as_inverse_root_spp() {
    let scene = common::gloss();
    let d = Dims::new(32, 18);
    let reference = render(&scene, d, SampleRange::new(1_000_000, 1024), 9).buffer;
    let low = render(&scene, d, SampleRange::spp(4), 0).buffer;
    let high = render(&scene, d, SampleRange::spp(16), 0).buffer;
    let ratio = common::rmse(&high, &reference) / common::rmse(&low, &reference);
    assert!((0.35..=0.7).contains(&ratio), "rmse ratio {ratio}, expected about 0.5");
}

#[test]
fn sample_ranges_compose() {
    let scene = common::gloss();
    let d = Dims::new(16, 9);
    let whole = render(&scene, d, SampleRange::spp(8), 3).buffer;
    let a = render(&scene, d, SampleRange::new(0, 4), 3).buffer;
    let b = render(&scene, d, SampleRange::new(4, 4), 3).buffer;
    for ((w, x), y) in whole.rgb.iter().zip(&a.rgb).zip(&b.rgb) {
        for c in 0..3 {
            let s = x[c] + y[c];
            assert!((w[c] - s).abs() <= 1e-5 * w[c].abs().max(1e-3));
        }
    }
}

fn sphere_scene(albedos: Vec<(f32, bool)>, env: f32, light: f32) -> Scene {
    let mut materials = Vec::new();
    let mut spheres = Vec::new();
    for (i, (a, metal)) in albedos.iter().enumerate() {
        let albedo = Vec3::splat(*a);
        materials.push(if *metal { Material::Metal { albedo, roughness: 0.3 } } else { Material::Diffuse { albedo } });
        spheres.push(Sphere { center: v(-1.5 + i as f32, 0.0, (i % 2) as f32 * 0.7), radius: 0.45, material: i as u32 });
    }
    Scene::new(SceneDesc {
        materials,
        meshes: vec![],
        spheres,
        lights: vec![QuadLight { corner: v(-1.0, 2.0, -1.0), edge_u: v(2.0, 0.0, 0.0), edge_v: v(0.0, 0.0, 2.0), radiance: Vec3::splat(light) }],
        environment: Environment::Constant { radiance: Vec3::splat(env) },
        camera: common::camera_at(5.0),
        animation: None,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn energy_bound(
        albedos in prop::collection::vec((0.0f32..0.9, any::<bool>()), 1..4),
        env in 0.0f32..2.0,
        light in 0.0f32..6.0,
        seed in any::<u64>(),
    ) {
        let scene = sphere_scene(albedos.clone(), env, light);
        let max_albedo = albedos.iter().map(|a| a.0).fold(0.0, f32::max);
        let bound = env.max(light) / (1.0 - max_albedo);
        let out = render(&scene, Dims::new(12, 12), SampleRange::spp(8), seed);
        prop_assert!(out.buffer.all_finite());
        for m in out.buffer.means() {
            for ch in m {
                prop_assert!(ch <= bound * 1.0001 + 1e-6, "{} > {}", ch, bound);
            }
        }
    }
}
