use proptest::prelude::*;
use proptest::strategy::ValueTree;
use scenebridge::codec::*;
use scenebridge::geometry::{Quaternion, Vec3};
use scenebridge::tf::TransformStamped;

fn finite() -> impl Strategy<Value = f64> + Clone {
    prop_oneof![
        -1e6f64..1e6,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
    ]
}

fn vec3() -> impl Strategy<Value = Vec3> {
    (finite(), finite(), finite()).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn quat() -> impl Strategy<Value = Quaternion> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("norm", |(x, y, z, w)| x * x + y * y + z * z + w * w > 0.01)
        .prop_map(|(x, y, z, w)| Quaternion::new(x, y, z, w).unwrap())
}

fn pose() -> impl Strategy<Value = Pose> {
    ((-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0), quat())
        .prop_map(|((x, y, z), orientation)| Pose { position: Vec3::new(x, y, z), orientation })
}

fn header() -> impl Strategy<Value = Header> {
    (any::<i64>(), "[a-z_/]{0,12}").prop_map(|(s, f)| Header::new(s, f))
}

fn table<T: std::fmt::Debug + Clone + 'static>(cell: impl Strategy<Value = T> + Clone + 'static) -> impl Strategy<Value = Table<T>> {
    (0u32..6, 0u32..6).prop_flat_map(move |(r, c)| {
        proptest::collection::vec(cell.clone(), (r * c) as usize).prop_map(move |d| Table { rows: r, cols: c, data: d })
    })
}

fn image() -> impl Strategy<Value = Image> {
    (header(), 0u32..6, 0u32..6, prop_oneof![Just(("mono8", 1u32)), Just(("rgb8", 3u32))], 0u32..3).prop_flat_map(
        |(h, height, width, (enc, ch), pad)| {
            let step = width * ch + pad;
            proptest::collection::vec(any::<u8>(), (height * step) as usize).prop_map(move |data| Image {
                header: h.clone(),
                height,
                width,
                encoding: enc.to_string(),
                step,
                data,
            })
        },
    )
}

fn transform() -> impl Strategy<Value = TransformStamped> {
    ("[a-z]{1,6}", "[A-Z]{1,6}", any::<i64>(), pose()).prop_map(|(p, c, s, pose)| TransformStamped {
        parent_frame: p,
        child_frame: c,
        stamp_ns: s,
        translation: pose.position,
        rotation: pose.orientation,
    })
}

fn any_value() -> impl Strategy<Value = BridgeValue> {
    prop_oneof![
        ".{0,40}".prop_map(BridgeValue::String),
        any::<bool>().prop_map(BridgeValue::Bool),
        any::<i64>().prop_map(BridgeValue::Int),
        finite().prop_map(BridgeValue::Double),
        proptest::collection::vec(any::<i64>(), 0..20).prop_map(BridgeValue::IntArray),
        proptest::collection::vec(finite(), 0..20).prop_map(BridgeValue::DoubleArray),
        table(any::<i64>()).prop_map(BridgeValue::IntTable),
        table(finite()).prop_map(BridgeValue::DoubleTable),
        (header(), pose()).prop_map(|(header, pose)| BridgeValue::PoseStamped { header, pose }),
        (header(), vec3(), vec3()).prop_map(|(header, force, torque)| BridgeValue::WrenchStamped { header, force, torque }),
        (header(), proptest::collection::vec(pose(), 0..8)).prop_map(|(header, poses)| BridgeValue::PoseArray { header, poses }),
        image().prop_map(BridgeValue::UInt8Image),
        (header(), proptest::collection::vec(any::<[f32; 3]>().prop_filter("finite", |p| p.iter().all(|v| v.is_finite())), 0..20))
            .prop_map(|(header, points)| BridgeValue::PointCloud { header, points }),
        (any::<i64>(), proptest::collection::vec(("[a-z0-9_]{1,8}", finite()), 0..8)).prop_map(|(s, js)| {
            let (names, positions) = js.into_iter().unzip();
            BridgeValue::JointState(JointState { stamp_ns: s, names, positions })
        }),
        transform().prop_map(BridgeValue::TfTransform),
    ]
}

fn header_of(v: &BridgeValue) -> Header {
    match v {
        BridgeValue::PoseStamped { header, .. }
        | BridgeValue::WrenchStamped { header, .. }
        | BridgeValue::PoseArray { header, .. }
        | BridgeValue::PointCloud { header, .. } => header.clone(),
        BridgeValue::UInt8Image(i) => i.header.clone(),
        BridgeValue::JointState(j) => Header::new(j.stamp_ns, ""),
        BridgeValue::TfTransform(t) => Header::new(t.stamp_ns, ""),
        _ => Header::default(),
    }
}

fn quat_close(a: &Quaternion, b: &Quaternion) -> bool {
    let (a, b) = (a.canonical(), b.canonical());
    (a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9 && (a.z - b.z).abs() < 1e-9 && (a.w - b.w).abs() < 1e-9
}

/// Exact on everything except orientations.
fn same_content(a: &BridgeValue, b: &BridgeValue) -> bool {
    match (a, b) {
        (BridgeValue::PoseStamped { header: h1, pose: p1 }, BridgeValue::PoseStamped { header: h2, pose: p2 }) => {
            h1 == h2 && p1.position == p2.position && quat_close(&p1.orientation, &p2.orientation)
        }
        (BridgeValue::PoseArray { header: h1, poses: a }, BridgeValue::PoseArray { header: h2, poses: b }) => {
            h1 == h2
                && a.len() == b.len()
                && a.iter().zip(b).all(|(p, q)| p.position.distance(q.position) < 1e-12 && quat_close(&p.orientation, &q.orientation))
        }
        (BridgeValue::TfTransform(x), BridgeValue::TfTransform(y)) => {
            x.parent_frame == y.parent_frame
                && x.child_frame == y.child_frame
                && x.stamp_ns == y.stamp_ns
                && x.translation.distance(y.translation) < 1e-12
                && quat_close(&x.rotation, &y.rotation)
        }
        _ => a == b,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn wire_round_trip_is_byte_exact(v in any_value(), topic in "/[a-z_/]{1,20}") {
        let bytes = encode(&topic, &v).unwrap();
        let (t, back) = decode(&bytes).unwrap();
        prop_assert_eq!(&t, &topic);
        prop_assert_eq!(encode(&t, &back).unwrap(), bytes);
    }

    #[test]
    fn scene_round_trip(v in any_value()) {
        let scene = bridge_to_scene(&v).unwrap();
        let back = scene_to_bridge(&scene, v.tag(), &header_of(&v)).unwrap();
        prop_assert!(same_content(&v, &back), "{:?} vs {:?}", v, back);
    }

    #[test]
    fn tables_keep_row_major_order(t in table(any::<i64>())) {
        let v = BridgeValue::IntTable(t.clone());
        let (_, back) = decode(&encode("/t", &v).unwrap()).unwrap();
        let BridgeValue::IntTable(b) = back else { panic!("tag changed") };
        for r in 0..t.rows {
            for c in 0..t.cols {
                prop_assert_eq!(b.get(r, c), t.get(r, c));
            }
        }
    }

    #[test]
    fn reader_splits_arbitrary_chunks(vs in proptest::collection::vec(any_value(), 1..6), cut in 1usize..40) {
        let frames: Vec<Vec<u8>> = vs.iter().map(|v| encode("/s", v).unwrap()).collect();
        let stream: Vec<u8> = frames.concat();
        let mut r = FrameReader::new();
        let mut got = Vec::new();
        for chunk in stream.chunks(cut) {
            r.push(chunk);
            while let Some(f) = r.next_frame() {
                got.push(f.unwrap());
            }
        }
        prop_assert_eq!(got, frames);
    }
}

#[test]
fn every_tag_is_covered() {
    let mut seen = std::collections::BTreeSet::new();
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strat = any_value();
    for _ in 0..3000 {
        seen.insert(strat.new_tree(&mut runner).unwrap().current().tag());
    }
    assert_eq!(seen.len(), 15);
}

#[test]
fn hello_world_frame_bytes() {
    let bytes = encode("/pub", &BridgeValue::String("Hello world.".into())).unwrap();
    let mut want = b"SRB2".to_vec();
    want.extend([1, 1, 4, 0]);
    want.extend(b"/pub");
    want.extend(16u32.to_le_bytes());
    want.extend(12u32.to_le_bytes());
    want.extend(b"Hello world.");
    assert_eq!(bytes, want);
    assert_eq!(decode(&bytes).unwrap(), ("/pub".to_string(), BridgeValue::String("Hello world.".into())));
}

#[test]
fn pose_with_identity_rotation_is_translation() {
    let v = BridgeValue::PoseStamped {
        header: Header::new(5, "base"),
        pose: Pose { position: Vec3::new(1.0, 2.0, 3.0), orientation: Quaternion::IDENTITY },
    };
    assert_eq!(bridge_to_scene(&v).unwrap(), SceneValue::Matrix(scenebridge::geometry::Mat4::translation(1.0, 2.0, 3.0)));
    assert_eq!(bridge_to_scene(&BridgeValue::Bool(true)).unwrap(), SceneValue::Bool(true));
}

#[test]
fn null_wrench_and_shape_mismatch() {
    let h = Header::new(0, "");
    let w = scene_to_bridge(&SceneValue::DoubleArray(vec![0.0; 6]), TypeTag::WrenchStamped, &h).unwrap();
    assert_eq!(w, BridgeValue::WrenchStamped { header: h.clone(), force: Vec3::ZERO, torque: Vec3::ZERO });
    assert!(matches!(
        scene_to_bridge(&SceneValue::DoubleArray(vec![0.0; 5]), TypeTag::WrenchStamped, &h),
        Err(CodecError::InvalidInput(_))
    ));
    let mut skew = scenebridge::geometry::Mat4::IDENTITY;
    skew.set(0, 1, 0.5);
    assert!(scene_to_bridge(&SceneValue::Matrix(skew), TypeTag::PoseStamped, &h).is_err());
    assert_eq!(
        scene_to_bridge(&SceneValue::DoubleArray(vec![]), TypeTag::DoubleArray, &h).unwrap(),
        BridgeValue::DoubleArray(vec![])
    );
}

#[test]
fn transform_collection_order_preserved() {
    let ms: Vec<_> = (0..5).map(|i| scenebridge::geometry::Mat4::translation(i as f64, 0.0, 0.0)).collect();
    let b = scene_to_bridge(&SceneValue::TransformCollection(ms.clone()), TypeTag::PoseArray, &Header::default()).unwrap();
    let BridgeValue::PoseArray { poses, .. } = &b else { panic!() };
    assert_eq!(poses.len(), 5);
    for (i, p) in poses.iter().enumerate() {
        assert_eq!(p.position.x, i as f64);
    }
}

#[test]
fn empty_point_cloud_round_trips() {
    let v = BridgeValue::PointCloud { header: Header::default(), points: vec![] };
    assert_eq!(decode(&encode("/c", &v).unwrap()).unwrap().1, v);
}

#[test]
fn decode_errors() {
    let good = encode("/x", &BridgeValue::Int(7)).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert_eq!(decode(&bad_magic), Err(CodecError::Framing));
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(matches!(decode(&bad_version), Err(CodecError::Unsupported { what: "version", .. })));
    let mut bad_tag = good.clone();
    bad_tag[5] = 99;
    assert!(matches!(decode(&bad_tag), Err(CodecError::Unsupported { what: "type tag", .. })));
    assert!(matches!(decode(&good[..good.len() - 1]), Err(CodecError::Truncated { .. })));
    assert!(encode("", &BridgeValue::Int(1)).is_err());
}

#[test]
fn reader_resyncs_after_garbage() {
    let a = encode("/a", &BridgeValue::Int(1)).unwrap();
    let b = encode("/b", &BridgeValue::Int(2)).unwrap();
    let mut stream = a.clone();
    stream.extend(b"garbage SRB");
    stream.extend(&b);
    let mut r = FrameReader::new();
    r.push(&stream);
    let mut frames = Vec::new();
    let mut errors = 0;
    while let Some(f) = r.next_frame() {
        match f {
            Ok(f) => frames.push(f),
            Err(_) => errors += 1,
        }
    }
    assert_eq!(frames, vec![a, b]);
    assert!(errors >= 1);
}

#[test]
fn image_invariants_checked() {
    let img = Image {
        header: Header::default(),
        height: 2,
        width: 2,
        encoding: "rgb8".into(),
        step: 4,
        data: vec![0; 8],
    };
    assert!(BridgeValue::UInt8Image(img.clone()).validate().is_err());
    let bgr = Image { encoding: "bgr8".into(), step: 6, data: vec![0; 12], ..img };
    assert!(BridgeValue::UInt8Image(bgr).validate().is_err());
}
