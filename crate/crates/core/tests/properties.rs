mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsnet::autodiff::{randn, Tensor};
use rsnet::data_io::{flip_pose, read_jsonl, write_jsonl, PoseSample};
use rsnet::graph::{build_adjacency, hop_powers, normalize_adjacency, SkeletonTopology};
use rsnet::spectral::{eig_symmetric, spectral_filter, spectral_radius};
use rsnet::splitting::{solve_direct, solve_iterative, split};
use rsnet::training::{loss, lr_schedule, mpjpe, pa_mpjpe, AmsGrad, StepDecay};

use common::random_connected_graph;

fn graph_a_hat(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_connected_graph(n, 0.2, &mut rng);
    normalize_adjacency::<f64>(&build_adjacency(&g).unwrap())
        .unwrap()
        .0
}

fn pose(seed: u64, n: usize, scale: f64) -> Tensor {
    randn(n, 3, &mut ChaCha8Rng::seed_from_u64(seed)).scale(scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iterative_matches_direct(seed in any::<u64>(), n in 2usize..20, s in 0.05f64..20.0) {
        let a = graph_a_hat(seed, n);
        let sp = split(&a, s).unwrap();
        let x = randn(n, 2, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let (h, trace) = solve_iterative(&sp, &x, 1e-12, 100_000).unwrap();
        let d = solve_direct(&sp, &x).unwrap();
        prop_assert!(trace.converged);
        prop_assert!(h.relative_error(&d).unwrap() < 1e-9);
    }

    #[test]
    fn normalized_adjacency_spectrum_in_unit_interval(seed in any::<u64>(), n in 2usize..20) {
        let a = graph_a_hat(seed, n);
        prop_assert!(a.asymmetry().unwrap() == 0.0);
        let eig = eig_symmetric(&a).unwrap();
        for &l in &eig.eigenvalues {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&l));
        }
        prop_assert!((spectral_radius(&a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unit_transfer_is_identity(seed in any::<u64>(), n in 2usize..16) {
        let a = graph_a_hat(seed, n);
        let l = Tensor::identity(n).sub(&a).unwrap();
        let x = randn(n, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = spectral_filter(&l, &x, |_| 1.0).unwrap();
        prop_assert!(y.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn hop_powers_are_associative(seed in any::<u64>(), n in 2usize..16) {
        let a = graph_a_hat(seed, n);
        let p = hop_powers(&a, 3).unwrap();
        let direct = a.matmul(&p[1]).unwrap();
        prop_assert!(p[2].max_abs_diff(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn procrustes_never_worse_than_root_alignment(seed in any::<u64>(), noise in 0.0f64..3.0) {
        let truth = pose(seed, 17, 300.0);
        let pred = truth.add(&pose(seed ^ 7, 17, 300.0 * noise)).unwrap();
        let pa = pa_mpjpe(&truth, &pred).unwrap();
        prop_assert!(pa >= 0.0);
        prop_assert!(pa <= mpjpe(&truth, &pred, 0).unwrap() + 1e-9);
    }

    #[test]
    fn mpjpe_is_symmetric_and_translation_invariant(seed in any::<u64>(), dx in -1e3f64..1e3) {
        let a = pose(seed, 16, 200.0);
        let b = pose(seed ^ 3, 16, 200.0);
        let shifted = b.add(&Tensor::filled(16, 3, dx)).unwrap();
        let m = mpjpe(&a, &b, 0).unwrap();
        prop_assert!((m - mpjpe(&b, &a, 0).unwrap()).abs() < 1e-9);
        prop_assert!((m - mpjpe(&a, &shifted, 0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn loss_is_convex_combination(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let t = pose(seed, 17, 0.3);
        let p = pose(seed ^ 5, 17, 0.3);
        let mixed = loss(&t, &p, alpha).unwrap();
        let combo = (1.0 - alpha) * loss(&t, &p, 0.0).unwrap() + alpha * loss(&t, &p, 1.0).unwrap();
        prop_assert!((mixed - combo).abs() < 1e-12);
        prop_assert!(mixed >= 0.0);
        prop_assert_eq!(loss(&t, &t, alpha).unwrap(), 0.0);
    }

    #[test]
    fn flip_is_an_involution(seed in any::<u64>()) {
        let skeleton = SkeletonTopology::h36m17();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p2 = randn(17, 2, &mut rng);
        let p3 = randn(17, 3, &mut rng);
        let sample = PoseSample {
            id: "x".into(),
            pose2d: (0..17).map(|i| [p2[(i, 0)], p2[(i, 1)]]).collect(),
            pose3d: (0..17).map(|i| [p3[(i, 0)], p3[(i, 1)], p3[(i, 2)]]).collect(),
        };
        let once = flip_pose(&sample, &skeleton.flip_pairs);
        prop_assert_ne!(&once, &sample);
        prop_assert_eq!(flip_pose(&once, &skeleton.flip_pairs), sample);
    }

    #[test]
    fn jsonl_roundtrip_is_exact(values in prop::collection::vec(-1e6f64..1e6, 5 * 4)) {
        let sample = PoseSample {
            id: "roundtrip".into(),
            pose2d: values.chunks(5).map(|c| [c[0], c[1]]).collect(),
            pose3d: values.chunks(5).map(|c| [c[2], c[3], c[4]]).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, std::slice::from_ref(&sample)).unwrap();
        prop_assert_eq!(read_jsonl(&path).unwrap(), vec![sample]);
    }

    #[test]
    fn amsgrad_zero_rate_keeps_parameters(seed in any::<u64>(), steps in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![randn(3, 2, &mut rng), randn(1, 4, &mut rng)];
        let mut p = params.clone();
        let mut opt = AmsGrad::for_params(&p);
        for _ in 0..steps {
            let grads: Vec<Tensor> = p.iter().map(|t| randn(t.rows(), t.cols(), &mut rng)).collect();
            opt.update(&mut p, &grads, 0.0).unwrap();
        }
        prop_assert_eq!(p, params);
    }

    #[test]
    fn amsgrad_step_is_bounded_by_rate(seed in any::<u64>(), lr in 1e-5f64..1e-1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = vec![randn(4, 3, &mut rng)];
        let mut p = start.clone();
        let mut opt = AmsGrad::for_params(&p);
        let g = vec![randn(4, 3, &mut rng)];
        opt.update(&mut p, &g, lr).unwrap();
        // first step moves each coordinate by lr * g / (|g| + eps)
        prop_assert!(p[0].sub(&start[0]).unwrap().max_abs() <= lr * (1.0 + 1e-9));
    }

    #[test]
    fn step_decay_never_increases(lr0 in 1e-5f64..1.0, factor in 0.1f64..=1.0, every in 1usize..10) {
        let decays = [StepDecay { factor, every }];
        let mut prev = lr0;
        for epoch in 0..50 {
            let lr = lr_schedule(epoch, lr0, &decays);
            prop_assert!(lr <= prev * (1.0 + 1e-15));
            prop_assert!(lr > 0.0);
            prev = lr;
        }
    }
}
