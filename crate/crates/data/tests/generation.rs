use std::path::PathBuf;

use imd_core::NdTensor;
use imd_data::synth::overlap_fraction;
use imd_data::{gen_multi_instance_pair, gen_synthetic_pair, TextureMode};
use nalgebra::Vector3;

#[test]
fn mean_overlap_is_at_least_half() {
    let n = 1000;
    let total: f64 = (0..n)
        .map(|seed| {
            let p = gen_synthetic_pair(seed, TextureMode::Noise, 1.0, (32, 32)).unwrap();
            overlap_fraction(&p.h, 32, 32)
        })
        .sum();
    assert!(total / n as f64 >= 0.5, "mean overlap {}", total / n as f64);
}

#[test]
fn all_texture_modes_render_deterministically() {
    for mode in [TextureMode::Noise, TextureMode::Shapes, TextureMode::Mixed] {
        let a = gen_synthetic_pair(5, mode, 0.6, (64, 48)).unwrap();
        assert_eq!(a, gen_synthetic_pair(5, mode, 0.6, (64, 48)).unwrap());
        assert_eq!(a.image_a.dims(), (64, 48));
    }
    assert!("stripes".parse::<TextureMode>().is_err());
}

#[test]
fn designated_centroid_lands_in_its_target_mask() {
    for seed in 0..20 {
        let p = gen_multi_instance_pair(seed, 3, (64, 64)).unwrap();
        let mp = p.evaluation_masks();
        let (cx, cy) = mp.source_mask.centroid().unwrap();
        let t = p.motions[p.designated] * Vector3::new(cx, cy, 1.0);
        assert!(mp.target_mask.contains(t.x, t.y), "seed {seed}");
        for (i, a) in p.instances.iter().enumerate() {
            for b in &p.instances[i + 1..] {
                assert_eq!(a.source_mask.intersection(&b.source_mask), 0);
            }
        }
    }
}

#[test]
fn multi_instance_golden_record() {
    let p = gen_multi_instance_pair(7, 2, (64, 64)).unwrap();
    let mut bytes = p.image_a.pixels().to_vec();
    bytes.extend(p.image_b.pixels());
    for mp in &p.instances {
        bytes.extend(mp.source_mask.to_bytes());
        bytes.extend(mp.target_mask.to_bytes());
    }
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/multi-7.imdt");
    let n = bytes.len();
    if !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        NdTensor::u8(vec![n], bytes).unwrap().write(&path).unwrap();
        return;
    }
    assert_eq!(NdTensor::read(&path).unwrap().as_u8().unwrap(), bytes.as_slice());
}
