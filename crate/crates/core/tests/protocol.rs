use clusterpt_core::camera::Camera;
use clusterpt_core::distribution::Strategy;
use clusterpt_core::protocol::*;
use clusterpt_core::scene::{MeshDelta, SceneUpdate, VertexRange};
use clusterpt_core::{Dims, RadianceBuffer, Vec3};
use proptest::prelude::*;
use proptest::strategy::Strategy as Gen;

fn f32s() -> impl Gen<Value = f32> {
    prop_oneof![any::<f32>().prop_filter("NaN never equals itself", |x| !x.is_nan()), -10.0f32..10.0]
}

fn v3() -> impl Gen<Value = [f32; 3]> {
    prop::array::uniform3(f32s())
}

fn camera() -> impl Gen<Value = Camera> {
    (v3(), v3(), v3(), f32s()).prop_map(|(p, l, u, f)| Camera::new(p.into(), l.into(), u.into(), f))
}

fn strategy() -> impl Gen<Value = Strategy> {
    prop_oneof![Just(Strategy::Tile), Just(Strategy::Sample), Just(Strategy::Stride)]
}

fn encoding() -> impl Gen<Value = Encoding> {
    prop_oneof![Just(Encoding::RawRgb8), Just(Encoding::Png), Just(Encoding::Jpeg), Just(Encoding::RadianceF32)]
}

fn scene_update() -> impl Gen<Value = SceneUpdate> {
    let range = (any::<u32>(), prop::collection::vec(v3().prop_map(Vec3::from), 0..6))
        .prop_map(|(start, positions)| VertexRange { start, positions });
    let delta = (any::<u32>(), prop::collection::vec(range, 0..4)).prop_map(|(mesh, ranges)| MeshDelta { mesh, ranges });
    (any::<u64>(), prop::collection::vec(delta, 0..3), prop::option::of(camera()))
        .prop_map(|(frame_time, meshes, camera)| SceneUpdate { frame_time, meshes, camera })
}

fn radiance() -> impl Gen<Value = RadianceBuffer> {
    (0u32..6, 0u32..6, any::<u32>(), any::<u64>()).prop_flat_map(|(w, h, spp, frame)| {
        prop::collection::vec(v3(), (w * h) as usize)
            .prop_map(move |rgb| RadianceBuffer { dims: Dims::new(w, h), spp, frame_id: frame, rgb })
    })
}

fn message() -> impl Gen<Value = Message> {
    prop_oneof![
        (prop_oneof![Just(Role::Client), Just(Role::Master), Just(Role::Worker)], any::<u32>(), any::<u16>())
            .prop_map(|(role, node_id, version)| Message::Hello(Hello { role, node_id, version })),
        (any::<[u32; 10]>(), strategy(), any::<u64>(), ".{0,12}").prop_map(|(n, strategy, seed, scene)| {
            Message::Config(Config {
                width: n[0],
                height: n[1],
                strategy,
                layout: (n[2], n[3]),
                tile_size: (n[4], n[5]),
                per_node_spp: n[6],
                participant: n[7],
                participants: n[8],
                max_depth: n[9],
                seed,
                scene,
            })
        }),
        (any::<u64>(), v3(), v3(), v3(), f32s()).prop_map(|(frame_id, position, look_at, up, fov)| {
            Message::CameraEvent(CameraEvent { frame_id, position, look_at, up, fov })
        }),
        (any::<u64>(), scene_update()).prop_map(|(frame_id, update)| Message::SceneUpdate { frame_id, update }),
        (any::<u32>(), radiance()).prop_map(|(participant, buffer)| Message::RadianceBuffer { participant, buffer }),
        (any::<u64>(), encoding(), any::<u32>(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..64)).prop_map(
            |(frame_id, encoding, width, height, bytes)| Message::FrameImage(FrameImage { frame_id, encoding, width, height, bytes })
        ),
        (any::<u64>(), prop::collection::vec(("[a-z_]{0,10}", any::<f64>().prop_filter("not NaN", |x| !x.is_nan())), 0..6))
            .prop_map(|(frame_id, fields)| Message::Stats(Stats { frame_id, fields })),
        ".{0,24}".prop_map(|reason| Message::Shutdown { reason }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip(msg in message()) {
        let bytes = encode(&msg).unwrap();
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        prop_assert_eq!(len + HEADER_LEN, bytes.len());
        prop_assert_eq!(bytes[4], msg.tag());
        let (back, used) = decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn fuzzed_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
        let mut framed = Vec::from(MAGIC);
        framed.extend_from_slice(&bytes);
        let _ = decode(&framed);
    }

    #[test]
    fn mutated_frames_never_panic(msg in message(), flips in prop::collection::vec((any::<usize>(), any::<u8>()), 1..8), cut in any::<usize>()) {
        let mut bytes = encode(&msg).unwrap();
        for (i, b) in flips {
            let n = bytes.len();
            bytes[i % n] ^= b;
        }
        let _ = decode(&bytes);
        let _ = decode(&bytes[..cut % (bytes.len() + 1)]);
        let _ = read_message(&mut std::io::Cursor::new(&bytes));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn byte_stream_splits_into_frames(msgs in prop::collection::vec(message(), 1..6), chunk in 1usize..40) {
        let mut wire = Vec::new();
        for m in &msgs {
            wire.extend(encode(m).unwrap());
        }
        // feed the stream in arbitrary chunks, decoding whenever a whole frame is present
        let mut pending = Vec::new();
        let mut got = Vec::new();
        for piece in wire.chunks(chunk) {
            pending.extend_from_slice(piece);
            loop {
                match decode(&pending) {
                    Ok((m, used)) => {
                        got.push(m);
                        pending.drain(..used);
                    }
                    Err(DecodeError::Incomplete { .. }) => break,
                    Err(e) => panic!("{e}"),
                }
            }
        }
        prop_assert!(pending.is_empty());
        prop_assert_eq!(got, msgs);
    }
}

#[test]
fn radiance_size_formula() {
    for (w, h) in [(2u32, 2u32), (0, 5), (7, 3)] {
        let b = RadianceBuffer::new(Dims::new(w, h), 1, 0);
        let bytes = encode(&Message::RadianceBuffer { participant: 0, buffer: b }).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 24 + 12 * (w * h) as usize);
    }
}
