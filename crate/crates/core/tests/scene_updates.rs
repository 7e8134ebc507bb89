mod common;

use clusterpt_core::render::{render_region, Region, RenderSettings, SampleRange};
use clusterpt_core::scene::SceneUpdate;
use clusterpt_core::scene_file::{bundled_scene_text, parse_scene};
use clusterpt_core::{Dims, Scene};

#[test]
fn thirty_incremental_updates_equal_direct_build() {
    let mut live = common::deform();
    let frames = 30;
    let mut refits = 0;
    let mut shipped = 0;
    for f in 1..=frames {
        let update = live.animation_update(f);
        shipped += update.vertex_count();
        let report = live.apply_update(&update).unwrap();
        refits += report.refit_meshes.len();
        assert!(report.rebuilt_meshes.is_empty());
    }
    assert_eq!(refits, frames as usize);

    let mut desc = parse_scene(bundled_scene_text("deform").unwrap(), std::path::Path::new(".")).unwrap();
    let anim = desc.animation.clone().unwrap();
    desc.meshes[anim.mesh() as usize].positions = anim.positions_at(frames);
    let mut direct = Scene::new(desc).unwrap();
    direct.apply_update(&SceneUpdate::empty(frames)).unwrap();
    assert_eq!(live.state_hash(), direct.state_hash());

    let settings = RenderSettings::default();
    let region = Region::full(Dims::new(32, 24));
    let a = render_region(&live, live.camera(), &region, SampleRange::spp(2), &settings);
    let b = render_region(&direct, direct.camera(), &region, SampleRange::spp(2), &settings);
    assert!(a.buffer.bitwise_eq(&b.buffer));

    // pinned vertices never travel
    let total = live.meshes()[anim.mesh() as usize].positions.len();
    assert!(shipped < total * frames as usize);
}

#[test]
fn update_only_touches_listed_vertices() {
    let mut scene = common::deform();
    let before: Vec<_> = scene.meshes().iter().map(|m| m.positions.clone()).collect();
    let update = scene.animation_update(5);
    scene.apply_update(&update).unwrap();
    let mut touched = vec![vec![false; 0]; before.len()];
    for (i, m) in before.iter().enumerate() {
        touched[i] = vec![false; m.len()];
    }
    for d in &update.meshes {
        for r in &d.ranges {
            for k in 0..r.positions.len() {
                touched[d.mesh as usize][r.start as usize + k] = true;
            }
        }
    }
    for (i, m) in scene.meshes().iter().enumerate() {
        for (k, p) in m.positions.iter().enumerate() {
            if !touched[i][k] {
                assert_eq!(*p, before[i][k]);
            }
        }
    }
}

#[test]
fn rejected_update_leaves_scene_untouched() {
    let mut scene = common::deform();
    scene.apply_update(&scene.animation_update(3)).unwrap();
    let hash = scene.state_hash();
    let mut bad = scene.animation_update(4);
    bad.meshes[0].ranges.last_mut().unwrap().start = u32::MAX - 1;
    assert!(scene.apply_update(&bad).is_err());
    assert_eq!(scene.state_hash(), hash);
    assert!(scene.apply_update(&SceneUpdate::empty(2)).is_err());
    assert_eq!(scene.state_hash(), hash);
}
