use super::gradcheck::{numeric_grad, relative_error};
use super::{Graph, Tensor, Var};
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces the op output to a scalar with fixed random weights, then checks
/// every input's analytic gradient against central differences.
fn check_op<F>(inputs: Vec<Tensor>, op: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let weighted = |g: &mut Graph, vars: &[Var]| -> Var {
        let out = op(g, vars);
        let shape = g.value(out).shape().to_vec();
        let w = g.constant(rand_tensor(&shape, 999));
        let prod = g.mul(out, w).unwrap();
        g.sum(prod)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = weighted(&mut g, &vars);
    g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(*v);
        let numeric = numeric_grad(
            |xs| {
                let mut g = Graph::new();
                let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
                let root = weighted(&mut g, &vars);
                g.value(root).item()
            },
            &inputs,
            k,
            STEP,
        );
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    worst
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn matmul_sum_grad_is_ones_times_b_transpose() {
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[4, 2], 2);
    let mut g = Graph::new();
    let va = g.param(a);
    let vb = g.constant(b.clone());
    let c = g.matmul(va, vb).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let ga = g.grad(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((ga.data()[i * 4 + k] - expected).abs() < 1e-14);
        }
    }
    assert!(g.grad(vb).is_none());
}

#[test]
fn matmul_finite_differences() {
    let err = check_op(vec![rand_tensor(&[3, 4], 3), rand_tensor(&[4, 2], 4)], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0]);
}

#[test]
fn softmax_jvp_finite_differences() {
    let err = check_op(vec![rand_tensor(&[5], 5)], |g, v| g.softmax(v[0], 0).unwrap());
    assert!(err < 1e-4, "rel err {err}");
    // non-trailing axis
    let err = check_op(vec![rand_tensor(&[3, 4, 2], 6)], |g, v| g.softmax(v[0], 1).unwrap());
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn softmax_nan_is_caught_by_graph_check() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![f64::NAN, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert!(matches!(g.check_finite(s), Err(Error::NonFinite(_))));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let mut peaked = vec![0.0; 10];
    peaked[3] = 50.0;
    let l = g.constant(Tensor::matrix(1, 10, peaked).unwrap());
    let ce = g.cross_entropy(l, &[3], &[true]).unwrap();
    assert!(g.value(ce).item() < 1e-6);

    let u = g.constant(Tensor::zeros(&[2, 10]));
    let ce = g.cross_entropy(u, &[4, 7], &[true, true]).unwrap();
    assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_errors() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        g.cross_entropy(l, &[0, 4], &[true, true]),
        Err(Error::Index { index: 4, bound: 4, .. })
    ));
    assert!(matches!(
        g.cross_entropy(l, &[0, 1], &[false, false]),
        Err(Error::EmptySupervision(_))
    ));
}

#[test]
fn cross_entropy_finite_differences() {
    let targets = [2, 6, 0, 3];
    let mask = [true, false, true, true];
    let err = check_op(vec![rand_tensor(&[4, 7], 7)], |g, v| {
        g.cross_entropy(v[0], &targets, &mask).unwrap()
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn cross_entropy_ignores_unmasked_rows() {
    let mut g = Graph::new();
    let l = g.param(rand_tensor(&[3, 5], 8));
    let ce = g.cross_entropy(l, &[1, 2, 3], &[true, false, true]).unwrap();
    g.backward(ce).unwrap();
    let grad = g.grad(l).unwrap();
    assert!(grad.row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn cosine_loss_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let l = g.cosine_loss(a, b).unwrap();
    assert!(g.value(l).item().abs() < 1e-15);

    let a = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![0.0, 3.0]).unwrap());
    let l = g.cosine_loss(a, b).unwrap();
    assert_eq!(g.value(l).item(), 1.0);

    let a = g.constant(Tensor::vector(vec![1.0, -2.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![-1.0, 2.0]).unwrap());
    let l = g.cosine_loss(a, b).unwrap();
    assert!((g.value(l).item() - 2.0).abs() < 1e-15);
}

#[test]
fn cosine_loss_rejects_zero_norm() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[3]));
    let b = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]).unwrap());
    assert!(matches!(g.cosine_loss(a, b), Err(Error::DegenerateVector(_))));
}

#[test]
fn cosine_loss_finite_differences() {
    let err = check_op(vec![rand_tensor(&[6], 9), rand_tensor(&[6], 10)], |g, v| {
        g.cosine_loss(v[0], v[1]).unwrap()
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn mean_pool_examples() {
    let mut g = Graph::new();
    let h = g.param(Tensor::matrix(3, 2, vec![1.0, 1.0, 5.0, 7.0, 3.0, 3.0]).unwrap());
    let single = g.mean_pool(h, &[false, true, false]).unwrap();
    assert_eq!(g.value(single).data(), &[5.0, 7.0]);
    let two = g.mean_pool(h, &[true, false, true]).unwrap();
    assert_eq!(g.value(two).data(), &[2.0, 2.0]);
    let s = g.sum(two);
    g.backward(s).unwrap();
    assert_eq!(g.grad(h).unwrap().data(), &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5]);
    assert!(matches!(g.mean_pool(h, &[false; 3]), Err(Error::Empty(_))));
}

#[test]
fn backward_scalar_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);

    let mut g = Graph::new();
    let y = g.param(Tensor::scalar(1.5));
    let two_y = g.add(y, y).unwrap();
    g.backward(two_y).unwrap();
    assert_eq!(g.grad(y).unwrap().item(), 2.0);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.scale(x, 3.0);
    g.backward(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
    g.zero_grad();
    assert!(g.grad(x).is_none());
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 3.0);
}

#[test]
fn constants_never_accumulate() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let x = g.param(Tensor::scalar(5.0));
    let p = g.mul(c, x).unwrap();
    g.backward(p).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().item(), 2.0);
}

#[test]
fn detach_forwards_bitwise_and_blocks_gradient() {
    let t = rand_tensor(&[4], 11);
    let mut g = Graph::new();
    let x = g.param(t.clone());
    let d = g.detach(x);
    assert_eq!(g.value(d), &t);
    let w = g.constant(rand_tensor(&[4], 12));
    let p = g.mul(d, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
}

#[test]
fn elementwise_and_structural_ops_finite_differences() {
    let a = rand_tensor(&[3, 4], 13);
    let b = rand_tensor(&[3, 4], 14);
    let bias = rand_tensor(&[4], 15);
    let cases: Vec<(&str, f64)> = vec![
        ("add", check_op(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", check_op(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", check_op(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", check_op(vec![a.clone()], |g, v| g.scale(v[0], -1.7))),
        ("add_bias", check_op(vec![a.clone(), bias.clone()], |g, v| g.add_bias(v[0], v[1]).unwrap())),
        ("silu", check_op(vec![a.clone()], |g, v| g.silu(v[0]))),
        ("transpose", check_op(vec![a.clone()], |g, v| g.transpose(v[0]).unwrap())),
        ("rms_norm", check_op(vec![a.clone(), bias.clone()], |g, v| g.rms_norm(v[0], v[1]).unwrap())),
        ("embedding", check_op(vec![a.clone()], |g, v| g.embedding(v[0], &[2, 0, 2, 1]).unwrap())),
        ("gather_rows", check_op(vec![a.clone()], |g, v| g.gather_rows(v[0], &[1, 1, 2]).unwrap())),
        ("slice_rows", check_op(vec![a.clone()], |g, v| g.slice_rows(v[0], 1, 2).unwrap())),
        ("concat_rows", check_op(vec![a.clone(), b.clone()], |g, v| g.concat_rows(&[v[1], v[0]]).unwrap())),
        ("mean_pool", check_op(vec![a.clone()], |g, v| g.mean_pool(v[0], &[true, false, true]).unwrap())),
        ("sum", check_op(vec![a.clone()], |g, v| g.sum(v[0]))),
    ];
    for (name, err) in cases {
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn causal_attention_finite_differences() {
    // two packed segments of lengths 3 and 4, d = 4, two heads
    let qkv = rand_tensor(&[7, 12], 16);
    let err = check_op(vec![qkv], |g, v| g.causal_attention(v[0], &[(0, 3), (3, 4)], 2).unwrap());
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn causal_attention_is_causal_and_segment_local() {
    let qkv = rand_tensor(&[6, 6], 17);
    let mut perturbed = qkv.clone();
    // row 4 is inside the second segment; only rows >= 4 of it may change
    for c in 0..6 {
        perturbed.data_mut()[4 * 6 + c] += 0.5;
    }
    let run = |t: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.causal_attention(x, &[(0, 2), (2, 4)], 1).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(qkv), run(perturbed));
    for r in 0..4 {
        assert_eq!(a.row(r), b.row(r), "row {r}");
    }
    assert_ne!(a.row(4), b.row(4));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.param(rand_tensor(&[5, 6], 18));
        let b = g.param(rand_tensor(&[6, 3], 19));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let ce = g.cross_entropy(s, &[0, 1, 2, 0, 1], &[true; 5]).unwrap();
        g.backward(ce).unwrap();
        (g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, spread in 0.1f64..200.0) {
        let mut t = rand_tensor(&[rows, cols], seed);
        t.data_mut().iter_mut().for_each(|v| *v *= spread);
        let mut g = Graph::new();
        let x = g.constant(t);
        let s = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_and_norm_gradients_on_random_shapes(m in 1usize..5, k in 1usize..6, n in 1usize..5, seed in 0u64..1000) {
        let a = rand_tensor(&[m, k], seed);
        let b = rand_tensor(&[k, n], seed + 1);
        let gain = rand_tensor(&[n], seed + 2);
        let err = check_op(vec![a, b, gain], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.rms_norm(c, v[2]).unwrap()
        });
        prop_assert!(err < 1e-4, "rel err {}", err);
    }
}
