use super::*;
use crate::loss::MaskRole;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn pair_maps(pairs: &[(u8, u8)]) -> (LabelMap, LabelMap) {
    let n = pairs.len();
    let truth = LabelMap::single(1, n, pairs.iter().map(|p| p.0).collect()).unwrap();
    let pred = LabelMap::single(1, n, pairs.iter().map(|p| p.1).collect()).unwrap();
    (pred, truth)
}

#[test]
fn two_class_confusion_example() {
    let cm = ConfusionMatrix::from_counts(&[vec![2, 0], vec![1, 1]]).unwrap();
    let r = cm.report();
    assert!((r.oa - 0.75).abs() < 1e-9);
    assert!((r.aa - 0.75).abs() < 1e-9);
    assert!((r.miou - 0.583333).abs() < 1e-6);
    assert!((r.mf1 - 0.733333).abs() < 1e-6);
}

#[test]
fn accumulate_matches_counts() {
    let (pred, truth) = pair_maps(&[(0, 0), (0, 0), (1, 0), (1, 1), (UNLABELED, 1)]);
    let r = metrics(&pred, &truth, 2).unwrap();
    let direct = ConfusionMatrix::from_counts(&[vec![2, 0], vec![1, 1]]).unwrap().report();
    assert_eq!(r, direct);
}

#[test]
fn perfect_prediction_scores_one() {
    let (pred, truth) = pair_maps(&[(0, 0), (2, 2), (1, 1), (2, 2)]);
    let r = metrics(&pred, &truth, 4).unwrap();
    for v in r.csv_values() {
        assert_eq!(v, 1.0);
    }
    assert_eq!(r.iou[3], None);
}

#[test]
fn absent_class_is_excluded() {
    let (pred, truth) = pair_maps(&[(0, 0), (0, 1), (1, 1)]);
    let two = metrics(&pred, &truth, 2).unwrap();
    let five = metrics(&pred, &truth, 5).unwrap();
    assert_eq!(two.miou, five.miou);
    assert_eq!(two.aa, five.aa);
    assert_eq!(two.mf1, five.mf1);
}

#[test]
fn empty_truth_is_flagged() {
    let (pred, truth) = pair_maps(&[(UNLABELED, 0)]);
    assert!(metrics(&pred, &truth, 2).unwrap().empty);
}

proptest! {
    #[test]
    fn metrics_equivariant_under_relabeling(
        pairs in prop::collection::vec((0u8..3, 0u8..3), 1..40),
        perm in Just([0u8, 1, 2]).prop_shuffle(),
    ) {
        let (pred, truth) = pair_maps(&pairs);
        let mapped: Vec<(u8, u8)> = pairs.iter().map(|&(t, p)| (perm[t as usize], perm[p as usize])).collect();
        let (pred2, truth2) = pair_maps(&mapped);
        let a = metrics(&pred, &truth, 3).unwrap();
        let b = metrics(&pred2, &truth2, 3).unwrap();
        for (x, y) in a.csv_values().iter().zip(b.csv_values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for v in a.csv_values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn gaussian(seed: u64, n: usize, shift: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect()
}

#[test]
fn hist_kl_shifted_gaussians_near_analytic() {
    // KL(N(0,1) || N(1,1)) = 1/2
    let a = gaussian(1, 1_000_000, 0.0);
    let b = gaussian(2, 1_000_000, 1.0);
    let kl = hist_kl(&a, &b, HIST_BINS).unwrap();
    assert!((kl / 0.5 - 1.0).abs() < 0.02, "{kl}");
}

/// Sorts both samples and walks the bin edges.
fn kl_oracle(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let probs = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        let mut out = Vec::new();
        let mut start = 0;
        for k in 0..bins {
            let end = if k + 1 == bins { v.len() } else { v.partition_point(|&x| (x - lo) / (hi - lo) * (bins as f64) < (k + 1) as f64) };
            let n = (end - start) as f64;
            out.push(if n == 0.0 { 1e-10 } else { n / v.len() as f64 });
            start = end;
        }
        let z: f64 = out.iter().sum();
        out.into_iter().map(|p| p / z).collect::<Vec<_>>()
    };
    let (p, q) = (probs(a), probs(b));
    p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum()
}

#[test]
fn hist_kl_matches_sorted_oracle() {
    let a = gaussian(6, 5000, 0.0);
    let b = gaussian(7, 3000, 0.7);
    let kl = hist_kl(&a, &b, HIST_BINS).unwrap();
    assert!((kl - kl_oracle(&a, &b, HIST_BINS)).abs() < 1e-12);
}

#[test]
fn hist_kl_identical_and_constant() {
    let a = gaussian(3, 1000, 0.0);
    assert_eq!(hist_kl(&a, &a, HIST_BINS).unwrap(), 0.0);
    assert_eq!(hist_kl(&[2.0; 5], &[2.0; 3], HIST_BINS).unwrap(), 0.0);
}

#[test]
fn hist_kl_disjoint_is_bounded() {
    let kl = hist_kl(&[0.0, 0.1], &[5.0, 5.1], HIST_BINS).unwrap();
    assert!(kl.is_finite() && kl > 10.0);
    assert!(kl <= (1.0 / HIST_EPS).ln() + 1.0);
}

proptest! {
    #[test]
    fn hist_kl_nonnegative(a in prop::collection::vec(-10.0f64..10.0, 1..50), b in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        prop_assert!(hist_kl(&a, &b, HIST_BINS).unwrap() >= 0.0);
    }
}

#[test]
fn pca_isotropic_cloud_halves() {
    let xs = gaussian(4, 20_000, 0.0);
    let ys = gaussian(5, 20_000, 0.0);
    let f: Vec<Vec<f64>> = xs.iter().zip(&ys).map(|(&x, &y)| vec![x, y]).collect();
    let c = pca_accumulated_variance(&f).unwrap();
    assert!((c.curve[0] - 0.5).abs() < 0.02, "{:?}", c.curve);
    assert_eq!(c.curve[1], 1.0);
}

#[test]
fn pca_line_is_rank_one() {
    let f: Vec<Vec<f64>> = (0..10).map(|i| {
        let t = i as f64;
        vec![t, 2.0 * t, -t]
    }).collect();
    let c = pca_accumulated_variance(&f).unwrap();
    for v in c.curve {
        assert!((v - 1.0).abs() < 1e-9);
    }
}

#[test]
fn pca_constant_is_degenerate() {
    let c = pca_accumulated_variance(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    assert!(c.degenerate);
    assert_eq!(c.curve, vec![1.0, 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn pca_curve_monotone_and_rotation_invariant(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..20),
        theta in 0.0f64..6.28,
    ) {
        let c = pca_accumulated_variance(&pts).unwrap();
        prop_assert!(c.curve.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        prop_assert!((c.curve[2] - 1.0).abs() < 1e-9);
        let (s, co) = theta.sin_cos();
        let rot: Vec<Vec<f64>> = pts.iter().map(|p| vec![co * p[0] - s * p[1], s * p[0] + co * p[1], p[2]]).collect();
        let r = pca_accumulated_variance(&rot).unwrap();
        if !c.degenerate {
            for (a, b) in c.curve.iter().zip(&r.curve) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

fn mask(v: Vec<f64>) -> WeightMask {
    let n = v.len();
    WeightMask::new(MaskRole::LabelBased, 1, 1, n, v).unwrap()
}

#[test]
fn perfect_flags_give_unit_precision_recall() {
    let clean = LabelMap::single(1, 4, vec![0, 1, 0, 1]).unwrap();
    let noisy = LabelMap::single(1, 4, vec![0, 0, 0, 0]).unwrap();
    let r = noise_detection_report(&mask(vec![1.0, 0.2, 1.0, 0.0]), &clean, &noisy).unwrap();
    assert_eq!(r.precision, Some(1.0));
    assert_eq!(r.recall, Some(1.0));
}

#[test]
fn clean_labels_have_no_recall() {
    let clean = LabelMap::single(1, 3, vec![0, 1, 0]).unwrap();
    let r = noise_detection_report(&mask(vec![0.5, 1.0, 0.3]), &clean, &clean).unwrap();
    assert_eq!(r.recall, None);
    assert_eq!(r.flagged, 2);
    assert_eq!(r.precision, Some(0.0));
}

#[test]
fn random_flags_precision_near_noise_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 50_000;
    let clean: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let noisy: Vec<u8> = clean.iter().map(|&c| if rng.random_bool(0.3) { (c + 1) % 4 } else { c }).collect();
    let w: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 0.5 } else { 1.0 }).collect();
    let r = noise_detection_report(
        &mask(w),
        &LabelMap::single(1, n, clean).unwrap(),
        &LabelMap::single(1, n, noisy).unwrap(),
    )
    .unwrap();
    assert!((r.precision.unwrap() - 0.3).abs() < 0.015);
}

#[test]
fn curve_csv_layout() {
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, "components", "ratio", &[0.5, 1.0]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "components,ratio\n1,0.5\n2,1.0\n");
}
