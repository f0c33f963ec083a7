use std::fs;

use imd_core::{CameraFrame, DepthMap, Image};
use imd_data::{gen_synthetic_pair, load_dataset, write_dataset, DataError, PairRecord, Supervision, TextureMode};
use nalgebra::{Matrix3, Vector3};

fn posed_record() -> PairRecord {
    let k = Matrix3::new(40.0, 0.0, 15.5, 0.0, 40.0, 15.5, 0.0, 0.0, 1.0);
    let a = CameraFrame::new(k, Matrix3::identity(), Vector3::zeros(), Some(DepthMap::constant(32, 32, 2.0))).unwrap();
    let b = CameraFrame::new(k, Matrix3::identity(), Vector3::new(0.1, 0.0, 0.0), None).unwrap();
    PairRecord {
        id: "pose-0".into(),
        image_a: Image::filled("a", 32, 32, [10, 20, 30]).unwrap(),
        image_b: Image::filled("b", 32, 32, [30, 20, 10]).unwrap(),
        supervision: Supervision::Posed { a, b },
        split: "test".into(),
    }
}

fn warp_record(seed: u64) -> PairRecord {
    let p = gen_synthetic_pair(seed, TextureMode::Shapes, 0.4, (32, 32)).unwrap();
    PairRecord { id: p.id, image_a: p.image_a, image_b: p.image_b, supervision: Supervision::Homography(p.h), split: "train".into() }
}

#[test]
fn posed_records_round_trip_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![warp_record(2), posed_record(), warp_record(1)];
    write_dataset(dir.path(), &records).unwrap();
    let it = load_dataset(dir.path()).unwrap();
    assert_eq!(it.len(), 3);
    let loaded: Vec<PairRecord> = it.map(|r| r.unwrap()).collect();
    let ids: Vec<&str> = loaded.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["warp-2", "pose-0", "warp-1"]);
    let Supervision::Posed { a, b } = &loaded[1].supervision else { panic!("expected pose") };
    assert_eq!(a.depth.as_ref().unwrap().data, vec![2.0; 32 * 32]);
    assert!(b.depth.is_none());
    assert_eq!(b.t, Vector3::new(0.1, 0.0, 0.0));
}

#[test]
fn missing_image_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &[warp_record(3)]).unwrap();
    fs::remove_file(dir.path().join("warp-3-b.png")).unwrap();
    let err = load_dataset(dir.path()).unwrap().next().unwrap().unwrap_err();
    assert!(matches!(err, DataError::Record { .. }));
    assert!(err.to_string().contains("warp-3-b.png"), "{err}");
}

#[test]
fn two_supervision_sources_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &[warp_record(4), posed_record()]).unwrap();
    let index_path = dir.path().join("index.json");
    let mut index: serde_json::Value = serde_json::from_str(&fs::read_to_string(&index_path).unwrap()).unwrap();
    let pose = index["pairs"][1]["pose_a"].clone();
    let depth = index["pairs"][1]["depth_a"].clone();
    index["pairs"][0]["pose_a"] = pose.clone();
    index["pairs"][0]["pose_b"] = pose;
    index["pairs"][0]["depth_a"] = depth;
    fs::write(&index_path, index.to_string()).unwrap();
    let results: Vec<_> = load_dataset(dir.path()).unwrap().collect();
    let err = results[0].as_ref().unwrap_err().to_string();
    assert!(err.contains("exactly one"), "{err}");
    assert!(results[1].is_ok());
}

#[test]
fn missing_index_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).is_err());
}
