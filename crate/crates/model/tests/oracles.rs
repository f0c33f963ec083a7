use imd_core::{CoarseMatch, CoarseMatchSet, FeatureMap};
use imd_model::coarse::{dual_softmax, select_matches, ProbabilityMatrix, ScoreMatrix};
use imd_model::fine::{
    crop_patches, expectation_offset, local_match, refine, subpixel_expectation, Patch, PatchPair, Window,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_mnn(p: &[Vec<f64>], tau: f64) -> Vec<(usize, usize)> {
    let (n, m) = (p.len(), p[0].len());
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let row_max = (0..m).all(|k| p[i][k] <= p[i][j]);
            let col_max = (0..n).all(|l| p[l][j] <= p[i][j]);
            if row_max && col_max && p[i][j] > tau {
                out.push((i, j));
            }
        }
    }
    out
}

#[test]
fn select_matches_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..100 {
        let rows: Vec<Vec<f64>> = (0..16).map(|_| (0..16).map(|_| rng.random::<f64>()).collect()).collect();
        let rows = if trial % 2 == 0 {
            rows
        } else {
            let s: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 40.0).collect()).collect();
            dual_softmax(&ScoreMatrix::from_rows(&s).unwrap()).unwrap().to_rows().unwrap()
        };
        let got: Vec<(usize, usize)> = select_matches(&ProbabilityMatrix::from_rows(&rows).unwrap(), 0.2)
            .unwrap()
            .iter()
            .map(|m| (m.idx_a, m.idx_b))
            .collect();
        assert_eq!(got, brute_mnn(&rows, 0.2), "trial {trial}");
    }
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, stride: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, stride, (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn exhaustive_local(pp: &PatchPair, temp: f64) -> (usize, usize, bool) {
    let (na, nb) = (pp.patch_a.len(), pp.patch_b.len());
    let s = |i: usize, j: usize| -> f64 {
        pp.patch_a.pixel(i).iter().zip(pp.patch_b.pixel(j)).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / temp
    };
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..na {
        for j in 0..nb {
            let v = s(i, j);
            let row_first = (0..nb).all(|k| s(i, k) < v || (s(i, k) == v && k >= j));
            let col_first = (0..na).all(|l| s(l, j) < v || (s(l, j) == v && l >= i));
            if row_first && col_first && best.is_none_or(|b| v > b.2) {
                best = Some((i, j, v));
            }
        }
    }
    match best {
        Some((i, j, _)) => (i, j, false),
        None => {
            let mut top = (0, 0, f64::NEG_INFINITY);
            for i in 0..na {
                for j in 0..nb {
                    if s(i, j) > top.2 {
                        top = (i, j, s(i, j));
                    }
                }
            }
            (top.0, top.1, true)
        }
    }
}

#[test]
fn local_match_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for w in [3, 5] {
        for trial in 0..50 {
            let fa = random_map(&mut rng, 6, 8, 8, 2);
            let fb = random_map(&mut rng, 6, 8, 8, 2);
            let ca = (rng.random_range(0..8), rng.random_range(0..8));
            let cb = (rng.random_range(0..8), rng.random_range(0..8));
            let pp = PatchPair {
                patch_a: Patch::extract(&fa, Window::around(ca, w, (8, 8))),
                patch_b: Patch::extract(&fb, Window::around(cb, w, (8, 8))),
                coarse_parent: 0,
            };
            let (lm, scores) = local_match(&pp, 0.1);
            assert_eq!(scores.len(), w.pow(4));
            assert_eq!((lm.slot_a, lm.slot_b, lm.low_confidence), exhaustive_local(&pp, 0.1), "w={w} trial={trial}");
        }
    }
}

#[test]
fn equal_scores_pick_lowest_index() {
    let zeros = FeatureMap::zeros(4, 8, 8, 2);
    let pp = PatchPair {
        patch_a: Patch::extract(&zeros, Window::around((4, 4), 3, (8, 8))),
        patch_b: Patch::extract(&zeros, Window::around((4, 4), 3, (8, 8))),
        coarse_parent: 0,
    };
    let (lm, _) = local_match(&pp, 0.1);
    assert_eq!((lm.slot_a, lm.slot_b), (0, 0));
}

#[test]
fn crop_matches_direct_indexing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fa = random_map(&mut rng, 3, 16, 16, 2);
    let fb = random_map(&mut rng, 3, 16, 16, 2);
    let matches = CoarseMatchSet::new(
        vec![
            CoarseMatch { idx_a: 0, idx_b: 15, confidence: 0.9 },
            CoarseMatch { idx_a: 5, idx_b: 6, confidence: 0.5 },
        ],
        16,
        16,
    )
    .unwrap();
    let pairs = crop_patches(&fa, &fb, &matches, 5).unwrap();
    assert_eq!(pairs[1].patch_a.window.origin, (4, 4));
    assert_eq!(pairs[0].patch_a.window.origin, (0, 0));
    for pp in &pairs {
        for (map, patch) in [(&fa, &pp.patch_a), (&fb, &pp.patch_b)] {
            for dy in 0..5isize {
                for dx in 0..5isize {
                    let x = (patch.window.origin.0 + dx).clamp(0, 15) as usize;
                    let y = (patch.window.origin.1 + dy).clamp(0, 15) as usize;
                    let k = (dy * 5 + dx) as usize;
                    for c in 0..3 {
                        assert_eq!(patch.pixel(k)[c], map.at(c, y, x));
                    }
                }
            }
        }
    }
    assert!(crop_patches(&fa, &fb, &matches, 4).is_err());
}

fn hand_expectation(qa: &[f32], fb: &FeatureMap, center: (usize, usize), temp: f64) -> (f64, f64) {
    let mut num = (0.0, 0.0);
    let mut den = 0.0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let x = (center.0 as isize + dx).clamp(0, fb.width() as isize - 1) as usize;
            let y = (center.1 as isize + dy).clamp(0, fb.height() as isize - 1) as usize;
            let l: f64 = (0..qa.len()).map(|c| qa[c] as f64 * fb.at(c, y, x) as f64).sum::<f64>() / temp;
            let e = l.exp();
            num.0 += e * x as f64;
            num.1 += e * y as f64;
            den += e;
        }
    }
    (2.0 * num.0 / den + 0.5, 2.0 * num.1 / den + 0.5)
}

#[test]
fn subpixel_equals_nine_term_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let fb = random_map(&mut rng, 4, 6, 6, 2);
        let qa: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let center = (rng.random_range(0..6), rng.random_range(0..6));
        let got = subpixel_expectation(&qa, &fb, center, 0.5);
        let want = hand_expectation(&qa, &fb, center, 0.5);
        assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9, "{got:?} vs {want:?}");
    }
}

#[test]
fn degenerate_expectations() {
    assert_eq!(expectation_offset(&[0.3; 9]), (0.0, 0.0));
    let mut one_hot = [0.0; 9];
    one_hot[0] = 1e4;
    let (dx, dy) = expectation_offset(&one_hot);
    assert!((dx + 1.0).abs() < 1e-12 && (dy + 1.0).abs() < 1e-12);
}

#[test]
fn identical_maps_refine_to_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_map(&mut rng, 16, 16, 16, 2);
    let entries = (0..16).map(|i| CoarseMatch { idx_a: i, idx_b: i, confidence: 1.0 }).collect();
    let matches = CoarseMatchSet::new(entries, 16, 16).unwrap();
    let fine = refine(&f, &f, &matches, 5, 0.1).unwrap();
    assert_eq!(fine.len(), 16);
    for m in fine.iter() {
        assert!((m.xa - m.xb).hypot(m.ya - m.yb) < 0.5, "{m:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dual_softmax_factors_normalize(vals in prop::collection::vec(-5.0f64..5.0, 30)) {
        let rows: Vec<Vec<f64>> = vals.chunks(6).map(|c| c.to_vec()).collect();
        let p = dual_softmax(&ScoreMatrix::from_rows(&rows).unwrap()).unwrap().to_rows().unwrap();
        let (n, m) = (5, 6);
        let row_sm: Vec<Vec<f64>> = rows.iter().map(|r| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(|v| v.exp() / z).collect()
        }).collect();
        let col_z: Vec<f64> = (0..m).map(|j| (0..n).map(|i| rows[i][j].exp()).sum()).collect();
        for i in 0..n {
            let mut row_factor_sum = 0.0;
            for j in 0..m {
                let col = rows[i][j].exp() / col_z[j];
                prop_assert!((p[i][j] - row_sm[i][j] * col).abs() < 1e-6);
                row_factor_sum += p[i][j] / col;
            }
            prop_assert!((row_factor_sum - 1.0).abs() < 1e-6);
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| p[i][j] / row_sm[i][j]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn expectation_offsets_stay_in_unit_box(logits in prop::array::uniform9(-50.0f64..50.0)) {
        let (dx, dy) = expectation_offset(&logits);
        prop_assert!((-1.0..=1.0).contains(&dx) && (-1.0..=1.0).contains(&dy));
    }
}

#[test]
fn probability_matrix_rejects_ragged_rows() {
    assert!(ProbabilityMatrix::from_rows(&[vec![0.1, 0.2], vec![0.3]]).is_err());
}
