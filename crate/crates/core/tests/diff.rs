use proptest::prelude::*;
use reprobe::diff::{finite_diff_check, CeTarget, Optimizer, OptimizerKind, ParamSet, PoolKind, RngStream, Tensor};

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn sgd_momentum_by_hand() {
    let mut ps = ParamSet::<f64>::new();
    let id = ps.insert("p", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.9)).unwrap();
    let grads = [(id, Tensor::new(vec![1], vec![2.0]).unwrap())].into_iter().collect();
    opt.step(&mut ps, &grads).unwrap();
    assert!((ps.get(id).data()[0] - 0.8).abs() < 1e-15);
    opt.step(&mut ps, &grads).unwrap();
    // buffer 0.9·2 + 2 = 3.8
    assert!((ps.get(id).data()[0] - 0.42).abs() < 1e-14);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut ps = ParamSet::<f64>::new();
    let id = ps.insert("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::adamw(0.01)).unwrap();
    let grads = [(id, Tensor::new(vec![2], vec![5.0, -0.3]).unwrap())].into_iter().collect();
    opt.step(&mut ps, &grads).unwrap();
    assert!((ps.get(id).data()[0] - 0.99).abs() < 1e-9);
    assert!((ps.get(id).data()[1] + 0.99).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mlp_gradients_match_finite_differences(seed in 0u64..10_000, n in 1usize..5, d in 1usize..5, h in 1usize..6, k in 2usize..4) {
        let mut rng = RngStream::new(seed);
        let mut ps = ParamSet::<f64>::new();
        let w1 = ps.insert("w1", random(&[d, h], &mut rng)).unwrap();
        let b1 = ps.insert("b1", random(&[h], &mut rng)).unwrap();
        let w2 = ps.insert("w2", random(&[h, k], &mut rng)).unwrap();
        let x = random(&[n, d], &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let err = finite_diff_check(
            &ps,
            |g, ps| {
                let xi = g.input(x.clone());
                let (a, b, c) = (g.param(ps, w1), g.param(ps, b1), g.param(ps, w2));
                let z = g.affine(xi, a, Some(b))?;
                let z = g.relu(z)?;
                let z = g.l2_normalize_rows(z)?;
                let z = g.affine(z, c, None)?;
                g.softmax_ce(z, CeTarget::Labels(labels.clone()))
            },
            1e-6,
            None,
            &mut rng,
        ).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_gradients_match_finite_differences(seed in 0u64..10_000, stride in 1usize..3, pad in 0usize..2, mean_pool in any::<bool>()) {
        let mut rng = RngStream::new(seed);
        let mut ps = ParamSet::<f64>::new();
        let w = ps.insert("w", random(&[2, 1, 3, 3], &mut rng)).unwrap();
        let b = ps.insert("b", random(&[2], &mut rng)).unwrap();
        let x = random(&[2, 1, 6, 6], &mut rng);
        let kind = if mean_pool { PoolKind::Mean } else { PoolKind::Max };
        let err = finite_diff_check(
            &ps,
            |g, ps| {
                let xi = g.input(x.clone());
                let (wn, bn) = (g.param(ps, w), g.param(ps, b));
                let z = g.conv2d(xi, wn, Some(bn), stride, pad)?;
                let z = g.pool2d(z, kind, 2)?;
                let z = g.global_mean_pool(z)?;
                let sq = g.mul(z, z)?;
                g.sum(sq)
            },
            1e-6,
            None,
            &mut rng,
        ).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..10_000, a in 1usize..5, b in 1usize..5, c in 1usize..5, d in 1usize..5) {
        let mut rng = RngStream::new(seed);
        let x = random(&[a, b], &mut rng);
        let y = random(&[b, c], &mut rng);
        let z = random(&[c, d], &mut rng);
        let l = x.matmul(&y).unwrap().matmul(&z).unwrap();
        let r = x.matmul(&y.matmul(&z).unwrap()).unwrap();
        for (p, q) in l.data().iter().zip(r.data()) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn forked_streams_are_reproducible(seed in any::<u64>(), label in "[a-z]{1,8}") {
        let a = RngStream::new(seed).fork(&label).next_u64();
        let b = RngStream::new(seed).fork(&label).next_u64();
        prop_assert_eq!(a, b);
        prop_assert_ne!(RngStream::new(seed).fork_idx(&label, 0).next_u64(), RngStream::new(seed).fork_idx(&label, 1).next_u64());
    }
}
