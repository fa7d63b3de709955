mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use textped_core::data::{synthetic_sample, SyntheticSpec};
use textped_core::metrics::{
    auc, detect_keypoints, inception_score, pose_score, pose_variance, BandLayoutDetector,
    KeypointDetector, KeypointSet, DEFAULT_B_MAX, NUM_KEYPOINTS,
};

fn fixtures(seed: u64, n: usize) -> Vec<KeypointSet> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let p = r.random_range(0.0..1.0);
            random_keypoints(&mut r, p, 256.0)
        })
        .collect()
}

#[test]
fn pose_metrics_equal_loop_oracles_exactly() {
    for seed in 0..50 {
        let sets = fixtures(seed, 2 + seed as usize % 20);
        assert_eq!(pose_score(&sets).unwrap(), pose_score_oracle(&sets), "seed {seed}");
        assert_eq!(
            pose_variance(&sets, DEFAULT_B_MAX).unwrap(),
            pose_variance_oracle(&sets, DEFAULT_B_MAX),
            "seed {seed}"
        );
    }
}

#[test]
fn pose_score_examples() {
    let mut half = KeypointSet::empty();
    for p in half.parts.iter_mut().take(9) {
        *p = Some((1.0, 1.0));
    }
    let mut full = KeypointSet::empty();
    full.parts = [Some((2.0, 3.0)); NUM_KEYPOINTS];
    assert_eq!(pose_score(&[full.clone(), half]).unwrap(), 0.75);
    assert_eq!(pose_score(&[KeypointSet::empty()]).unwrap(), 0.0);
    assert!(pose_score(&[]).is_err());
    let constant = vec![full; 10];
    assert!((pose_variance(&constant, DEFAULT_B_MAX).unwrap() - 1.0).abs() < 1e-12);
    assert!(pose_variance(&constant[..1], DEFAULT_B_MAX).is_err());
}

#[test]
fn inception_examples() {
    let c = 7;
    let uniform = vec![vec![1.0 / c as f64; c]; 30];
    let (m, s) = inception_score(&uniform, 3).unwrap();
    assert!((m - 1.0).abs() < 1e-9 && s.abs() < 1e-9);
    let one_hot: Vec<Vec<f64>> = (0..c)
        .map(|i| (0..c).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    let (m, _) = inception_score(&one_hot, 1).unwrap();
    assert!((m - c as f64).abs() < 1e-9);
    let bad = vec![vec![0.5, 0.6]];
    assert!(inception_score(&bad, 1).is_err());
}

#[test]
fn inception_matches_oracle() {
    let mut r = rng(21);
    for _ in 0..20 {
        let c = r.random_range(2..10);
        let p: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
                softmax(&raw)
            })
            .collect();
        let (m, _) = inception_score(&p, 1).unwrap();
        assert!((m - inception_oracle(&p)).abs() < 1e-10);
        let (m2, s2) = inception_score(&p, 4).unwrap();
        let chunks: Vec<f64> = p.chunks(10).map(inception_oracle).collect();
        let mean = chunks.iter().sum::<f64>() / 4.0;
        let std = (chunks.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((m2 - mean).abs() < 1e-10 && (s2 - std).abs() < 1e-10);
    }
}

#[test]
fn auc_matches_pair_counting() {
    let mut r = rng(3);
    for _ in 0..20 {
        let pos: Vec<f64> = (0..15).map(|_| (r.random_range(0..10) as f64) / 10.0).collect();
        let neg: Vec<f64> = (0..12).map(|_| (r.random_range(0..10) as f64) / 10.0).collect();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        assert_eq!(auc(&pos, &neg).unwrap(), wins / 180.0);
    }
    assert_eq!(auc(&[1.0, 2.0], &[0.0]).unwrap(), 1.0);
}

#[test]
fn band_detector_finds_synthetic_layout() {
    let spec = SyntheticSpec::new(1, 32);
    let det = BandLayoutDetector::default();
    let mut r = rng(4);
    for i in 0..20 {
        let sample = synthetic_sample(&spec, &mut r).unwrap();
        let set = detect_keypoints(&sample.image, &format!("s{i}"), &det).unwrap();
        assert_eq!(set.detected_count(), NUM_KEYPOINTS);
        let (x0, y0, x1, y1) = sample.boxes[0];
        let nose = set.parts[0].unwrap();
        assert_eq!(nose, ((x0 + x1 - 1) as f64 / 2.0, (y0 + y1 - 1) as f64 / 2.0));
    }
}

#[test]
fn blank_image_has_no_keypoints() {
    let img = image::RgbImage::from_pixel(32, 32, image::Rgb([128, 128, 128]));
    let set = BandLayoutDetector::default().detect(&img).unwrap();
    assert_eq!(set.detected_count(), 0);
    let tiny = image::RgbImage::new(2, 2);
    assert!(detect_keypoints(&tiny, "tiny", &BandLayoutDetector::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pose_metrics_permutation_invariant(seed in 0u64..10_000, n in 2usize..20) {
        let sets = fixtures(seed, n);
        let mut shuffled = sets.clone();
        shuffled.shuffle(&mut rng(seed + 1));
        prop_assert!((pose_score(&sets).unwrap() - pose_score(&shuffled).unwrap()).abs() < 1e-12);
        let a = pose_variance(&sets, DEFAULT_B_MAX).unwrap();
        let b = pose_variance(&shuffled, DEFAULT_B_MAX).unwrap();
        prop_assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn pose_metric_bounds(seed in 0u64..10_000, n in 2usize..20) {
        let sets = fixtures(seed, n);
        let ps = pose_score(&sets).unwrap();
        prop_assert!((0.0..=1.0).contains(&ps));
        prop_assert!(pose_variance(&sets, DEFAULT_B_MAX).unwrap() >= 1.0);
    }

    #[test]
    fn pose_variance_scale_invariant(seed in 0u64..10_000, n in 2usize..20, f in 0.1f64..10.0) {
        let sets = fixtures(seed, n);
        let scaled: Vec<KeypointSet> = sets.iter().map(|s| s.scaled(f)).collect();
        let a = pose_variance(&sets, DEFAULT_B_MAX).unwrap();
        let b = pose_variance(&scaled, DEFAULT_B_MAX * f).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn inception_bounded_by_classes(seed in 0u64..10_000, c in 2usize..12, n in 1usize..30) {
        let mut r = rng(seed);
        let p: Vec<Vec<f64>> = (0..n)
            .map(|_| softmax(&(0..c).map(|_| r.random_range(-5.0..5.0)).collect::<Vec<_>>()))
            .collect();
        let (m, _) = inception_score(&p, 1).unwrap();
        prop_assert!(m >= 1.0 - 1e-9 && m <= c as f64 + 1e-9);
    }
}
