use echo_core::datamodel::{MotionSeq, MotionSplit};
use echo_core::metrics::{self, frechet_distance, kmeans, oracle, KMeansConfig};
use echo_core::rng::{derive_seed, seeded};
use echo_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_seq(frames: usize, rng: &mut impl Rng) -> MotionSeq {
    MotionSeq::new(Tensor::randn(&[frames, 56], 1.0, rng)).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn metrics_match_brute_force_on_100_instances() {
    for case in 0..100u64 {
        let mut rng = seeded(derive_seed(21, case));
        let n = rng.random_range(2..5);
        let frames = rng.random_range(8..24);
        let gen: Vec<MotionSeq> = (0..n).map(|_| random_seq(frames, &mut rng)).collect();
        let gt: Vec<MotionSeq> = (0..n).map(|_| random_seq(frames, &mut rng)).collect();
        let user: Vec<MotionSeq> = (0..n).map(|_| random_seq(frames, &mut rng)).collect();
        for i in 0..n {
            let (e, p) = metrics::motion_mse(&gen[i], &gt[i]).unwrap();
            assert!(close(e, oracle::mse(&gen[i], &gt[i], 0..50), 1e-9));
            assert!(close(p, oracle::mse(&gen[i], &gt[i], 50..56), 1e-9));
            let r = metrics::rpcc(&gen[i], &gt[i], &user[i]).unwrap();
            assert!(close(r, oracle::rpcc(&gen[i], &gt[i], &user[i], 0..50).unwrap(), 1e-9), "case {case}");
            let energy: Vec<f64> = (0..frames).map(|_| rng.random::<f64>()).collect();
            let speaking: Vec<bool> = (0..frames).map(|t| t % 3 != 0).collect();
            let l = metrics::lipsync_from_motion(&gen[i], &energy, &speaking).unwrap();
            assert!(close(l, oracle::lipsync(&gen[i], &energy, &speaking).unwrap(), 1e-9));
        }
        for split in [MotionSplit::Expression, MotionSplit::Pose, MotionSplit::All] {
            let v = metrics::temporal_variance(&gen, split.range()).unwrap();
            assert!(close(v, oracle::variance(&gen, split.range()), 1e-9));
        }

        // Small-dim Frechet distance against the Denman-Beavers route.
        let dim = rng.random_range(1..6);
        let rows = rng.random_range(dim + 4..60);
        let a: Vec<f64> = (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..rows * dim).map(|_| 0.5 + 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
        let got = frechet_distance(&a, &b, dim).unwrap();
        let want = oracle::frechet(&a, &b, dim, 1e-6);
        assert!(close(got, want, 1e-6), "case {case}: {got} vs {want}");

        // Cluster entropy against a naive nearest-centroid assignment.
        let k = rng.random_range(2..6);
        let pts: Vec<f64> = (0..40 * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let model = kmeans::fit(&pts, dim, &KMeansConfig { k, restarts: 3, iterations: 50, seed: case }).unwrap();
        let h = metrics::entropy_bits(&model.histogram(&a));
        assert!(close(h, oracle::assignment_entropy(&a, &model.centroids, dim), 1e-9));
    }
}

#[test]
fn gaussian_frechet_closed_form() {
    let mut rng = seeded(31);
    let n = 100_000;
    let base: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let other: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    // Mean shift: (mu1 - mu2)^2.
    let shifted: Vec<f64> = other.iter().map(|x| x + 2.0).collect();
    let d = frechet_distance(&shifted, &base, 1).unwrap();
    assert!((d - 4.0).abs() <= 0.05 * 4.0, "{d}");
    // Scale change: (sigma1 - sigma2)^2.
    let scaled: Vec<f64> = other.iter().map(|x| 3.0 * x).collect();
    let d = frechet_distance(&scaled, &base, 1).unwrap();
    assert!((d - 4.0).abs() <= 0.05 * 4.0, "{d}");
}

#[test]
fn uniform_and_degenerate_cluster_entropy() {
    for k in [2usize, 3, 5, 8, 15] {
        let hist = vec![7; k];
        assert!((metrics::entropy_bits(&hist) - (k as f64).log2()).abs() <= 1e-9);
        let mut one = vec![0; k];
        one[k / 2] = 40;
        assert_eq!(metrics::entropy_bits(&one), 0.0);
    }
}

#[test]
fn white_noise_variance_is_one() {
    let mut rng = seeded(41);
    let set: Vec<MotionSeq> = (0..20).map(|_| random_seq(500, &mut rng)).collect();
    let v = metrics::temporal_variance(&set, MotionSplit::All.range()).unwrap();
    assert!((v - 1.0).abs() <= 0.05, "{v}");
}

#[test]
fn kmeans_is_deterministic_and_honours_k() {
    let mut rng = seeded(51);
    let pts: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut rng)).collect();
    let cfg = KMeansConfig::new(6);
    let a = kmeans::fit(&pts, 3, &cfg).unwrap();
    let b = kmeans::fit(&pts, 3, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.histogram(&pts).iter().all(|&c| c > 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rpcc_of_ground_truth_is_zero(seed in any::<u64>(), frames in 6usize..30) {
        let mut rng = seeded(seed);
        let gt = random_seq(frames, &mut rng);
        let user = random_seq(frames, &mut rng);
        prop_assert_eq!(metrics::rpcc(&gt, &gt, &user).unwrap(), 0.0);
    }

    #[test]
    fn mse_is_symmetric_and_zero_on_identity(seed in any::<u64>(), frames in 2usize..20) {
        let mut rng = seeded(seed);
        let a = random_seq(frames, &mut rng);
        let b = random_seq(frames, &mut rng);
        prop_assert_eq!(metrics::motion_mse(&a, &b).unwrap(), metrics::motion_mse(&b, &a).unwrap());
        prop_assert_eq!(metrics::motion_mse(&a, &a).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn entropy_is_bounded_by_log_k(hist in proptest::collection::vec(0usize..50, 1..20)) {
        let h = metrics::entropy_bits(&hist);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (hist.len() as f64).log2() + 1e-12);
    }

    #[test]
    fn frechet_is_nonnegative_and_vanishes_on_identity(seed in any::<u64>(), dim in 1usize..5) {
        let mut rng = seeded(seed);
        let a: Vec<f64> = (0..(dim + 10) * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..(dim + 10) * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        prop_assert!(frechet_distance(&a, &b, dim).unwrap() >= 0.0);
        prop_assert!(frechet_distance(&a, &a, dim).unwrap() <= 1e-8);
    }
}
