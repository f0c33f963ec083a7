use imd_core::{FineMatchSet, InstanceMaskPair, Mask};
use imd_eval::{aggregate_imim, auc, auc_at, imim_score, ErrorCurve};
use proptest::prelude::*;

fn riemann(errors: &[f64], t: f64) -> f64 {
    let steps = 1_000_000;
    let de = t / steps as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut k = 0;
    let mut acc = 0.0;
    for s in 0..steps {
        let e = (s as f64 + 0.5) * de;
        while k < sorted.len() && sorted[k] <= e {
            k += 1;
        }
        acc += k as f64 / n * de;
    }
    acc / t
}

#[test]
fn hand_example() {
    assert!((auc_at(&[1.0, 3.0], 5.0) - 0.6).abs() < 1e-12);
    assert_eq!(auc(&[f64::INFINITY, 9.0], &[3.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    assert!(ErrorCurve::new(vec![1.0], vec![5.0, 3.0]).is_err());
    assert!(ErrorCurve::new(vec![-1.0], vec![5.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn matches_riemann_sum(errors in prop::collection::vec(0.0f64..12.0, 1..20), t in 1.0f64..10.0) {
        prop_assert!((auc_at(&errors, t) - riemann(&errors, t)).abs() < 1e-6);
    }

    #[test]
    fn auc_is_monotone_and_order_free(errors in prop::collection::vec(0.0f64..12.0, 1..20), bump in 0.0f64..3.0, k in 0usize..20) {
        let t = 5.0;
        let base = auc_at(&errors, t);
        let mut worse = errors.clone();
        let i = k % worse.len();
        worse[i] += bump;
        prop_assert!(auc_at(&worse, t) <= base + 1e-12);
        let mut rev = errors.clone();
        rev.reverse();
        prop_assert!((auc_at(&rev, t) - base).abs() < 1e-12);
    }
}

fn square_mask(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Mask {
    let mut m = Mask::empty(w, h);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(x, y, true);
        }
    }
    m
}

fn pair() -> InstanceMaskPair {
    InstanceMaskPair::new(square_mask(32, 32, 4, 4, 8), square_mask(32, 32, 10, 10, 8), "box").unwrap()
}

#[test]
fn imim_counts() {
    let mp = pair();
    let inside = FineMatchSet::from_points(vec![(5.0, 5.0, 11.0, 11.0), (6.2, 7.4, 12.0, 15.0)]);
    assert_eq!(imim_score(&inside, &mp, (32, 32), (32, 32)).unwrap().score, Some(100.0));

    let hand = FineMatchSet::from_points(vec![
        (5.0, 5.0, 11.0, 11.0),
        (6.0, 6.0, 12.0, 12.0),
        (7.0, 7.0, 13.0, 13.0),
        (8.0, 8.0, 30.0, 30.0),
        (20.0, 20.0, 11.0, 11.0),
    ]);
    let r = imim_score(&hand, &mp, (32, 32), (32, 32)).unwrap();
    assert_eq!((r.n_source_hits, r.n_both_hits, r.score), (4, 3, Some(75.0)));

    let outside = FineMatchSet::from_points(vec![(30.0, 30.0, 11.0, 11.0)]);
    let r = imim_score(&outside, &mp, (32, 32), (32, 32)).unwrap();
    assert!(!r.valid && r.score.is_none() && r.n_source_hits == 0);

    assert!(imim_score(&inside, &mp, (32, 31), (32, 32)).is_err());
}

#[test]
fn aggregates_differ_by_weighting() {
    let mp = pair();
    let a = FineMatchSet::from_points(vec![(5.0, 5.0, 11.0, 11.0)]);
    let b = FineMatchSet::from_points(vec![(5.0, 5.0, 11.0, 11.0), (6.0, 6.0, 1.0, 1.0), (7.0, 7.0, 1.0, 1.0)]);
    let reports = [imim_score(&a, &mp, (32, 32), (32, 32)).unwrap(), imim_score(&b, &mp, (32, 32), (32, 32)).unwrap()];
    let agg = aggregate_imim(&reports);
    assert!((agg.mean_of_ratios.unwrap() - (100.0 + 100.0 / 3.0) / 2.0).abs() < 1e-9);
    assert!((agg.ratio_of_sums.unwrap() - 50.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn imim_ignores_order_and_outside_matches(
        pts in prop::collection::vec((0.0f64..31.0, 0.0f64..31.0, 0.0f64..31.0, 0.0f64..31.0), 0..30),
        extra in (20.0f64..31.0, 20.0f64..31.0, 0.0f64..31.0, 0.0f64..31.0),
    ) {
        let mp = pair();
        let base = imim_score(&FineMatchSet::from_points(pts.clone()), &mp, (32, 32), (32, 32)).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        prop_assert_eq!(&imim_score(&FineMatchSet::from_points(rev), &mp, (32, 32), (32, 32)).unwrap(), &base);
        let mut more = pts;
        more.push(extra);
        prop_assert_eq!(&imim_score(&FineMatchSet::from_points(more), &mp, (32, 32), (32, 32)).unwrap(), &base);
    }
}
