use hfv_core::clustering::kmeans_fit_detailed;
use hfv_core::{kmeans_assign, kmeans_fit, Codebook, DescriptorSet, KMeansOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn uniform(n: usize, d: usize, seed: u64) -> DescriptorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DescriptorSet::new((0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect(), d).unwrap()
}

fn blobs(means: &[[f64; 2]], per: usize, spread: f64, seed: u64) -> DescriptorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    for m in means {
        for _ in 0..per {
            for &mj in m {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mj + spread * z);
            }
        }
    }
    DescriptorSet::new(data, 2).unwrap()
}

/// Exhaustive nearest center, first index on ties.
fn brute_nearest(cb: &Codebook, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..cb.k1() {
        let d: f64 = cb.center(k).iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

#[test]
fn assignment_agrees_with_exhaustive_search() {
    for (n, k, d, seed) in [(10_000, 256, 8, 1), (5_000, 17, 3, 2), (2_000, 1, 5, 3)] {
        let x = uniform(n, d, seed);
        let cb = Codebook::new(uniform(k, d, seed + 100).into_vec(), d).unwrap();
        let m = kmeans_assign(&cb, &x).unwrap();
        for (i, row) in x.rows().enumerate() {
            assert_eq!(m.assignments()[i], brute_nearest(&cb, row), "point {i}");
        }
        assert_eq!(m.counts().iter().sum::<usize>(), n);
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    let cb = Codebook::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]).unwrap();
    let x = DescriptorSet::from_rows(&[[0.0, 0.0], [2.0, 0.0]], 2).unwrap();
    assert_eq!(kmeans_assign(&cb, &x).unwrap().assignments(), &[0, 0]);
}

#[test]
fn lloyd_objective_never_increases() {
    for seed in 0..5 {
        let x = uniform(3_000, 4, seed);
        let fit = kmeans_fit_detailed(&x, &KMeansOptions::new(20, seed)).unwrap();
        for w in fit.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn single_center_is_the_mean() {
    let x = uniform(500, 3, 4);
    let cb = kmeans_fit(&x, &KMeansOptions::new(1, 0)).unwrap();
    for (c, m) in cb.center(0).iter().zip(x.mean()) {
        assert!((c - m).abs() < 1e-12);
    }
}

#[test]
fn one_center_per_distinct_point() {
    let x = uniform(12, 2, 5);
    let fit = kmeans_fit_detailed(&x, &KMeansOptions::new(12, 0)).unwrap();
    assert!(*fit.objective_history.last().unwrap() < 1e-20);
}

#[test]
fn separated_blobs_are_recovered() {
    let truth = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let x = blobs(&truth, 300, 0.3, 6);
    let cb = kmeans_fit(&x, &KMeansOptions::new(3, 1)).unwrap();
    for t in truth {
        let k = cb.nearest(&t).0;
        let err = cb.center(k).iter().zip(t).map(|(c, v)| (c - v).abs()).fold(0.0, f64::max);
        assert!(err < 0.1, "{t:?} recovered at {:?}", cb.center(k));
    }
}

#[test]
fn fitting_is_deterministic_under_a_seed() {
    let x = uniform(4_000, 6, 8);
    let a = kmeans_fit(&x, &KMeansOptions::new(32, 42)).unwrap();
    let b = kmeans_fit(&x, &KMeansOptions::new(32, 42)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn degenerate_inputs() {
    let same = DescriptorSet::new(vec![1.0; 20], 2).unwrap();
    assert!(kmeans_fit(&same, &KMeansOptions::new(3, 0)).is_err());
    assert!(kmeans_fit(&uniform(3, 2, 0), &KMeansOptions::new(4, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn every_point_goes_to_a_nearest_center(n in 1usize..200, k in 1usize..20, d in 1usize..5, seed in any::<u64>()) {
        let x = uniform(n, d, seed);
        let cb = Codebook::new(uniform(k, d, seed ^ 1).into_vec(), d).unwrap();
        let m = kmeans_assign(&cb, &x).unwrap();
        for (i, row) in x.rows().enumerate() {
            prop_assert_eq!(m.assignments()[i], brute_nearest(&cb, row));
        }
    }
}
