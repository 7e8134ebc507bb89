mod common;

use std::io::Read;
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use clusterpt::client::{run_client, PathSpec};
use clusterpt::master::Master;
use clusterpt::net;
use clusterpt::postprocess::decode_frame;
use clusterpt::worker::{handshake, run_worker, WorkerConfig};
use clusterpt_core::distribution::Strategy;
use clusterpt_core::protocol::{
    self, decode_header, CameraEvent, Config, Encoding, Hello, Message, Role, Stats, HEADER_LEN, PROTOCOL_VERSION,
    RADIANCE_HEADER_LEN,
};
use clusterpt_core::scene_file::load_named_scene;
use clusterpt_core::{render_region, Dims, Region, RenderSettings, SampleRange};
use common::{client_config, deploy, master_config, run};

#[test]
fn thread_census_is_four_plus_three_per_worker() {
    for w in [0usize, 1, 2, 3] {
        let out = run(master_config(w, Strategy::Stride, Dims::new(24, 12), 1), 4, |_| {});
        let want = 4 + 3 * w;
        assert_eq!(out.registry.total(), want, "threads registered with {w} workers");
        assert_eq!(out.registry.peak(), want, "threads alive at once with {w} workers");
        assert_eq!(out.registry.live(), 0);
    }
}

#[test]
fn zero_workers_render_locally() {
    let out = run(master_config(0, Strategy::Stride, Dims::new(16, 8), 1), 1, |_| {});
    assert_eq!(out.client.frames.len(), 1);
    assert_eq!(out.master.frames, 1);
    assert!(out.master.stats[0].worker_render_ms.is_empty());
}

#[test]
fn orbit_run_delivers_every_frame_in_order() {
    let out = run(master_config(1, Strategy::Stride, Dims::new(16, 8), 1), 100, |c| c.path = PathSpec::Orbit(360.0));
    let ids: Vec<u64> = out.client.frames.iter().map(|f| f.frame_id).collect();
    assert_eq!(ids, (0..100).collect::<Vec<_>>());
    assert_eq!(out.client.stats.len(), 100);
    assert!(out.client.fps > 0.0);
    assert!(out.client.frames.iter().all(|f| f.latency_ms >= 0.0 && !f.dropped));
    assert_eq!(out.workers[0].frames, 100);
}

#[test]
fn repeated_runs_produce_identical_frames() {
    let frames = |strategy| {
        let mut cfg = master_config(2, strategy, Dims::new(24, 16), 2);
        cfg.encoding = Encoding::Png;
        let out = run(cfg, 5, |c| {
            c.keep_frames = true;
            c.path = PathSpec::Orbit(60.0);
        });
        out.client.images
    };
    for strategy in [Strategy::Stride, Strategy::Sample, Strategy::Tile] {
        let a = frames(strategy);
        let b = frames(strategy);
        assert_eq!(a.len(), 5);
        assert_eq!(a, b, "{strategy} frames differ between runs");
    }
}

/// Radiance-encoded frames from a striding cluster equal a direct single-process render
/// of the whole image.
#[test]
fn merged_stride_frame_equals_single_process_render() {
    let dims = Dims::new(32, 24);
    for workers in [0usize, 1, 3] {
        let mut cfg = master_config(workers, Strategy::Stride, dims, 3);
        cfg.encoding = Encoding::RadianceF32;
        let out = run(cfg, 2, |c| c.keep_frames = true);
        let mut scene = load_named_scene("gloss", None).unwrap();
        for f in 0..2u64 {
            scene.apply_update(&scene.animation_update(f)).unwrap();
            let oracle = render_region(
                &scene,
                &scene.camera().clone(),
                &Region::full(dims),
                SampleRange::spp(3),
                &RenderSettings { seed: 0, max_depth: 10 },
            );
            let got = decode_frame(&out.client.images[f as usize]).unwrap().to_f32();
            let want: Vec<[f32; 3]> = oracle.buffer.means().collect();
            assert!(
                got.iter().zip(&want).all(|(a, b)| a.map(f32::to_bits) == b.map(f32::to_bits)),
                "frame {f} with {workers} workers differs from the oracle"
            );
        }
    }
}

#[test]
fn sample_strategy_sums_samples_over_participants() {
    let out = run(master_config(4, Strategy::Sample, Dims::new(12, 8), 10), 2, |_| {});
    assert!(out.master.stats.iter().all(|s| s.total_spp == 50));
    assert_eq!(out.client.total_spp, 50);
    assert!(out.master.stats.iter().all(|s| s.worker_render_ms.len() == 4));
}

#[test]
fn worker_scenes_track_the_master() {
    let mut cfg = master_config(2, Strategy::Stride, Dims::new(16, 12), 1);
    cfg.scene = "deform".into();
    let out = run(cfg, 30, |_| {});
    let mut oracle = load_named_scene("deform", None).unwrap();
    for f in 0..30 {
        oracle.apply_update(&oracle.animation_update(f)).unwrap();
    }
    assert_eq!(out.master.state_hash, oracle.state_hash());
    for w in &out.workers {
        assert_eq!(w.frames, 30);
        assert_eq!(w.state_hash, out.master.state_hash, "participant {}", w.participant);
    }
    assert!(out.master.stats.iter().skip(1).all(|s| s.scene_update_ms > 0.0));
}

#[test]
fn upstream_bytes_match_share_size() {
    let dims = Dims::new(40, 24);
    for strategy in [Strategy::Stride, Strategy::Sample, Strategy::Tile] {
        let mut cfg = master_config(3, strategy, dims, 1);
        cfg.tile_size = (16, 16);
        let out = run(cfg, 3, |_| {});
        let total: usize = out
            .workers
            .iter()
            .map(|w| {
                let pixels = match strategy {
                    Strategy::Sample => dims.pixel_count(),
                    Strategy::Stride => dims.pixel_count() / 4,
                    Strategy::Tile => {
                        // 3x2 tiles dealt round-robin to 4 participants.
                        let tiles: Vec<usize> = (0..6).filter(|t| t % 4 == w.participant as usize).collect();
                        tiles.iter().map(|&t| { let (tx, ty) = (t % 3, t / 3); let tw = if tx == 2 { 8 } else { 16 }; let th = if ty == 1 { 8 } else { 16 }; tw * th }).sum()
                    }
                };
                let want = HEADER_LEN + RADIANCE_HEADER_LEN + pixels * 12;
                assert_eq!(w.upstream_bytes, vec![want; 3], "{strategy} participant {}", w.participant);
                pixels
            })
            .sum();
        match strategy {
            Strategy::Sample => assert_eq!(total, 3 * dims.pixel_count()),
            _ => assert!(total < dims.pixel_count()),
        }
    }
}

#[test]
fn master_post_processing_overlaps_next_render() {
    let out = run(master_config(1, Strategy::Stride, Dims::new(48, 32), 2), 12, |_| {});
    let s = &out.master.stats;
    let overlapping = s
        .windows(2)
        .filter(|w| w[0].post_start_ms < w[1].render_end_ms && w[1].render_start_ms < w[0].post_end_ms)
        .count();
    assert!(overlapping > 0, "no frame's post-processing overlapped the next render");
    for row in s {
        assert!(row.render_start_ms <= row.render_end_ms && row.render_end_ms <= row.post_end_ms);
        assert!(row.merge_ms >= 0.0 && row.tone_map_ms >= 0.0 && row.compression_ms >= 0.0);
        assert!(row.denoise_ms == 0.0);
    }
}

#[test]
fn stats_are_written_and_echoed() {
    let dir = tempdir();
    let path = dir.join("stats.csv");
    let mut cfg = master_config(2, Strategy::Stride, Dims::new(24, 8), 1);
    cfg.stats_out = Some(path.clone());
    cfg.denoise = true;
    let out = run(cfg, 4, |_| {});
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().next().unwrap().contains("worker_render_ms_2"));
    for (m, c) in out.master.stats.iter().zip(&out.client.stats) {
        assert_eq!(m.frame_id, c.frame_id);
        assert_eq!(m.total_spp, c.total_spp);
        assert!((m.worker_render_ms_mean - (m.worker_render_ms[0] + m.worker_render_ms[1]) / 2.0).abs() < 1e-9);
        assert!(m.denoise_ms > 0.0);
    }
}

fn tempdir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("clusterpt-test-{}-{}", std::process::id(), rand_suffix()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn rand_suffix() -> u128 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_nanos()
}

/// Reads one raw frame: header plus payload, exactly as it came off the wire.
fn read_raw(s: &mut TcpStream) -> Vec<u8> {
    let mut head = [0u8; HEADER_LEN];
    s.read_exact(&mut head).unwrap();
    let (_, len) = decode_header(&head).unwrap();
    let mut frame = head.to_vec();
    frame.resize(HEADER_LEN + len, 0);
    s.read_exact(&mut frame[HEADER_LEN..]).unwrap();
    frame
}

/// Fake workers record the exact bytes the master forwards and answer with real renders.
#[test]
fn forwarded_events_are_byte_identical_across_workers() {
    let cfg = master_config(4, Strategy::Stride, Dims::new(20, 12), 1);
    let master = Master::bind(MasterConfig { scene: "deform".into(), ..cfg }).unwrap();
    let addrs = master.addrs();
    let master = std::thread::spawn(move || master.run());
    let fakes: Vec<_> = addrs
        .workers
        .iter()
        .map(|a| {
            let a = *a;
            std::thread::spawn(move || {
                let stream = net::connect_retry(&a.to_string(), Duration::from_secs(5)).unwrap();
                let mut raw = stream.try_clone().unwrap();
                let (mut r, mut w) = net::split(stream).unwrap();
                let (config, assignment, mut scene) = handshake(&mut r, &mut w, None).unwrap();
                drop(r);
                let mut captured = Vec::new();
                loop {
                    let frame = read_raw(&mut raw);
                    let msg = protocol::decode_exact(&frame).unwrap();
                    match msg {
                        Message::SceneUpdate { update, .. } => {
                            scene.apply_update(&update).unwrap();
                        }
                        Message::CameraEvent(e) => {
                            let out = assignment.render_share(config.participant, &scene, &e.camera(), config.max_depth);
                            w.send(&Message::RadianceBuffer { participant: config.participant, buffer: out.buffer }).unwrap();
                            w.send(&Message::Stats(Stats { frame_id: e.frame_id, fields: vec![("render_ms".into(), 1.0)] }))
                                .unwrap();
                        }
                        Message::Shutdown { .. } => return captured,
                        other => panic!("unexpected {}", other.name()),
                    }
                    captured.push(frame);
                }
            })
        })
        .collect();
    let d = common::Deployment { registry: Default::default(), client_addr: addrs.client.unwrap().to_string(), master, workers: vec![] };
    let report = run_client(clusterpt::ClientConfig { path: PathSpec::Orbit(45.0), ..client_config(&d, 6) }).unwrap();
    assert_eq!(report.frames.len(), 6);
    let captures: Vec<Vec<Vec<u8>>> = fakes.into_iter().map(|f| f.join().unwrap()).collect();
    assert_eq!(captures[0].len(), 12, "one scene update and one camera event per frame");
    for c in &captures[1..] {
        assert_eq!(c, &captures[0]);
    }
    let m = d.master.join().unwrap().unwrap();
    assert_eq!(m.frames, 6);
}

use clusterpt::master::MasterConfig;

#[test]
fn master_rejects_worker_with_other_version() {
    let master = Master::bind(master_config(1, Strategy::Stride, Dims::new(8, 8), 1)).unwrap();
    let addr = master.addrs().workers[0];
    let master = std::thread::spawn(move || master.run());
    let (mut r, mut w) = net::split(TcpStream::connect(addr).unwrap()).unwrap();
    w.send(&Message::Hello(Hello { role: Role::Worker, node_id: 0, version: PROTOCOL_VERSION + 1 })).unwrap();
    match r.recv().unwrap() {
        Message::Shutdown { reason } => assert!(reason.contains("version"), "{reason}"),
        other => panic!("expected SHUTDOWN, got {}", other.name()),
    }
    let err = master.join().unwrap().unwrap_err();
    assert!(format!("{err:#}").contains("version"), "{err:#}");
}

/// A fake master speaking `version` and naming `scene` in its CONFIG.
fn fake_master(version: u16, scene: &str) -> (std::thread::JoinHandle<Message>, String) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let scene = scene.to_string();
    let h = std::thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        let (mut r, mut w) = net::split(s).unwrap();
        assert!(matches!(r.recv().unwrap(), Message::Hello(h) if h.role == Role::Worker));
        w.send(&Message::Hello(Hello { role: Role::Master, node_id: 0, version })).unwrap();
        let _ = w.send(&Message::Config(Config {
            width: 8,
            height: 8,
            strategy: Strategy::Sample,
            layout: (0, 0),
            tile_size: (64, 64),
            per_node_spp: 1,
            participant: 1,
            participants: 2,
            max_depth: 4,
            seed: 0,
            scene,
        }));
        r.recv().unwrap()
    });
    (h, addr)
}

#[test]
fn worker_refuses_master_with_other_version() {
    let (fake, addr) = fake_master(PROTOCOL_VERSION + 7, "gloss");
    let err = run_worker(WorkerConfig { connect: addr, ..WorkerConfig::default() }).unwrap_err();
    assert!(format!("{err:#}").contains("version"));
    match fake.join().unwrap() {
        Message::Shutdown { reason } => assert!(reason.contains("version")),
        other => panic!("expected SHUTDOWN, got {}", other.name()),
    }
}

#[test]
fn worker_refuses_unknown_scene() {
    let (fake, addr) = fake_master(PROTOCOL_VERSION, "no-such-scene");
    let err = run_worker(WorkerConfig { connect: addr, ..WorkerConfig::default() }).unwrap_err();
    assert!(format!("{err:#}").contains("unknown scene"));
    assert!(matches!(fake.join().unwrap(), Message::Shutdown { reason } if reason.contains("unknown scene")));
}

#[test]
fn worker_acknowledges_a_valid_config() {
    let (fake, addr) = fake_master(PROTOCOL_VERSION, "gloss");
    let worker = std::thread::spawn(move || run_worker(WorkerConfig { connect: addr, ..WorkerConfig::default() }));
    assert!(matches!(fake.join().unwrap(), Message::Hello(h) if h.role == Role::Worker && h.node_id == 1));
    // The fake master hangs up after the handshake.
    let err = worker.join().unwrap().unwrap_err();
    assert!(format!("{err:#}").contains("master connection lost"), "{err:#}");
}

/// A worker that dies mid-run takes the cluster down and leaves the client with a
/// partial report.
#[test]
fn lost_worker_fails_fast() {
    let master = Master::bind(master_config(1, Strategy::Stride, Dims::new(16, 8), 1)).unwrap();
    let addrs = master.addrs();
    let master = std::thread::spawn(move || master.run());
    let worker_addr = addrs.workers[0].to_string();
    let fake = std::thread::spawn(move || {
        let stream = net::connect_retry(&worker_addr, Duration::from_secs(5)).unwrap();
        let (mut r, mut w) = net::split(stream).unwrap();
        handshake(&mut r, &mut w, None).unwrap();
        // Take two messages (frame 0's update and camera), then vanish.
        r.recv().unwrap();
        r.recv().unwrap();
    });
    let report = run_client(clusterpt::ClientConfig {
        connect: addrs.client.unwrap().to_string(),
        frames: 10,
        ..Default::default()
    })
    .unwrap();
    fake.join().unwrap();
    assert!(report.partial);
    assert!(report.frames.is_empty());
    let err = master.join().unwrap().unwrap_err();
    assert!(format!("{err:#}").contains("worker 1"), "{err:#}");
}

#[test]
fn client_stops_early_when_master_frame_limit_is_lower() {
    let mut cfg = master_config(1, Strategy::Stride, Dims::new(8, 8), 1);
    cfg.frames = Some(3);
    let d = deploy(cfg);
    let report = run_client(client_config(&d, 10)).unwrap();
    assert!(report.partial);
    assert_eq!(report.frames.len(), 3);
    let out = d.finish(report);
    assert_eq!(out.master.frames, 3);
}

#[test]
fn infeasible_stride_is_rejected_before_listening() {
    let err = Master::bind(master_config(2, Strategy::Stride, Dims::new(16, 8), 1)).err().expect("3 participants cannot stride 16x8");
    assert!(format!("{err:#}").contains("divisible"), "{err:#}");
}

#[test]
fn client_rejects_out_of_order_camera_ids_at_master() {
    let master = Master::bind(master_config(0, Strategy::Stride, Dims::new(8, 8), 1)).unwrap();
    let addr = master.addrs().client.unwrap();
    let master = std::thread::spawn(move || master.run());
    let (mut r, mut w) = net::split(TcpStream::connect(addr).unwrap()).unwrap();
    w.send(&net::hello(Role::Client, 0)).unwrap();
    assert!(matches!(r.recv().unwrap(), Message::Hello(_)));
    let Message::Config(_) = r.recv().unwrap() else { panic!("expected CONFIG") };
    let Message::CameraEvent(initial) = r.recv().unwrap() else { panic!("expected CAMERA_EVENT") };
    w.send(&Message::CameraEvent(CameraEvent { frame_id: 3, ..initial })).unwrap();
    let err = master.join().unwrap().unwrap_err();
    assert!(format!("{err:#}").contains("expected 0"), "{err:#}");
}
