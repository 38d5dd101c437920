use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{finite_difference_check, FdMetric};
use super::*;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn fd_ok(g: &mut Graph<f64>, root: NodeId, leaf: &str) -> f64 {
    let r = finite_difference_check(g, root, leaf, 1e-3, FdMetric::Relative).unwrap();
    assert!(r.checked > 0, "no elements checked");
    r.max_error
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x", &[1, 5, 4]).unwrap();
    let w = Arc::new(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv2d(x, w, None, Padding::Zero).unwrap();
    let v = rand_tensor(&[1, 5, 4], 1, -1.0, 1.0).cast::<f32>();
    let out = g.forward_eval(y, &[("x", v.clone())]).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn rectifier_zeroes_negative_input() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x", &[2, 3, 3]).unwrap();
    let y = g.relu(x).unwrap();
    let v = Tensor::full(&[2, 3, 3], -0.5f32);
    let out = g.forward_eval(y, &[("x", v)]).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn divisive_normalization_of_equal_energies() {
    let k = 5;
    let mut g = Graph::<f64>::new();
    let x = g.input("e", &[k, 2, 2]).unwrap();
    let y = g.divnorm(x, 0.0).unwrap();
    let out = g
        .forward_eval(y, &[("e", Tensor::full(&[k, 2, 2], 0.7))])
        .unwrap();
    assert!(out
        .data()
        .iter()
        .all(|&v| (v - 1.0 / k as f64).abs() < 1e-15));
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x", &[3, 4]).unwrap();
    let s = g.sum(x).unwrap();
    g.forward_eval(s, &[("x", rand_tensor(&[3, 4], 2, -1.0, 1.0).cast())])
        .unwrap();
    let grad = g.backward(s, "x").unwrap();
    assert_eq!(grad.shape(), &[3, 4]);
    assert!(grad.data().iter().all(|&v| v == 1.0));
}

#[test]
fn gradient_of_sum_of_squares_is_twice_input() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2, 3, 3]).unwrap();
    let sq = g.square(x).unwrap();
    let s = g.sum(sq).unwrap();
    let v = rand_tensor(&[2, 3, 3], 3, -1.0, 1.0);
    g.forward_eval(s, &[("x", v.clone())]).unwrap();
    let grad = g.backward(s, "x").unwrap();
    for (gv, xv) in grad.data().iter().zip(v.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x", &[2, 2]).unwrap();
    let y = g.square(x).unwrap();
    g.forward_eval(y, &[("x", Tensor::full(&[2, 2], 1.0))])
        .unwrap();
    assert!(matches!(g.backward(y, "x"), Err(Error::Graph(_))));
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::<f32>::new();
    let a = g.input("a", &[1, 2, 2]).unwrap();
    let b = g.input("b", &[1, 3, 2]).unwrap();
    match g.add(a, b) {
        Err(Error::Shape { node, .. }) => assert!(node.contains("add"), "{node}"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let err = g.set_input("a", Tensor::zeros(&[1, 2, 3])).unwrap_err();
    assert!(err.to_string().contains("#0 input"), "{err}");
}

#[test]
fn unrequested_leaves_get_no_gradient_work() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1, 2, 2]).unwrap();
    let y = g.input("y", &[1, 2, 2]).unwrap();
    let s = g.add(x, y).unwrap();
    let sq = g.square(s).unwrap();
    let root = g.sum(sq).unwrap();
    g.forward_eval(
        root,
        &[
            ("x", Tensor::full(&[1, 2, 2], 1.0)),
            ("y", Tensor::full(&[1, 2, 2], 2.0)),
        ],
    )
    .unwrap();
    let gx = g.backward(root, "x").unwrap();
    assert!(gx.data().iter().all(|&v| v == 6.0));
}

#[test]
fn fd_self_test_quadratic_in_f32() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x", &[3, 4, 4]).unwrap();
    let sq = g.square(x).unwrap();
    let root = g.sum(sq).unwrap();
    g.set_input("x", rand_tensor(&[3, 4, 4], 4, 0.1, 1.0).cast())
        .unwrap();
    let r = finite_difference_check(&mut g, root, "x", 1e-3, FdMetric::Relative).unwrap();
    assert_eq!(r.skipped, 0);
    assert!(r.max_error <= 1e-4, "{r:?}");
}

#[test]
fn fd_constant_root_has_zero_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1, 3, 3]).unwrap();
    let c = g.constant(Tensor::full(&[1, 3, 3], 2.0));
    let root = g.sum(c).unwrap();
    g.set_input("x", rand_tensor(&[1, 3, 3], 5, 0.0, 1.0))
        .unwrap();
    let r = finite_difference_check(&mut g, root, "x", 1e-3, FdMetric::Relative).unwrap();
    assert_eq!(r.max_error, 0.0);
    let _ = x;
}

#[test]
fn fd_skips_rectifier_at_kink() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1, 1, 3]).unwrap();
    let r = g.relu(x).unwrap();
    let root = g.sum(r).unwrap();
    g.set_input(
        "x",
        Tensor::new(vec![1, 1, 3], vec![0.0, 0.5, -0.5]).unwrap(),
    )
    .unwrap();
    let rep = finite_difference_check(&mut g, root, "x", 1e-3, FdMetric::Relative).unwrap();
    assert_eq!(rep.skipped, 1);
    assert_eq!(rep.checked, 2);
    assert!(rep.max_error < 1e-9);
    // subgradient at 0 is 0
    g.forward(root).unwrap();
    assert_eq!(g.backward(root, "x").unwrap().data()[0], 0.0);
}

/// Every primitive through `½·Σ(op(x) − r)²` with a random offset `r`.
fn check_primitive(shape: &[usize], build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId, seed: u64) {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", shape).unwrap();
    let y = build(&mut g, x);
    let proj = rand_tensor(g.shape(y), seed + 100, -1.5, -0.5);
    let p = g.constant(proj);
    let pd = g.sub(y, p).unwrap();
    let pd2 = g.square(pd).unwrap();
    let s = g.sum(pd2).unwrap();
    let root = g.scale(s, 0.5).unwrap();
    g.set_input("x", rand_tensor(shape, seed, -1.0, 1.0))
        .unwrap();
    let err = fd_ok(&mut g, root, "x");
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn fd_conv2d_zero_and_reflect() {
    for (i, pad) in [Padding::Zero, Padding::Reflect].into_iter().enumerate() {
        let w = Arc::new(rand_tensor(&[4, 2, 3, 3], 10 + i as u64, -1.0, 1.0));
        let b = Arc::new(rand_tensor(&[4], 20, -0.1, 0.1));
        check_primitive(
            &[2, 6, 5],
            |g, x| g.conv2d(x, w.clone(), Some(b.clone()), pad).unwrap(),
            30 + i as u64,
        );
    }
}

#[test]
fn fd_conv3d_pair() {
    let w = Arc::new(rand_tensor(&[3, 1, 2, 5, 5], 11, -1.0, 1.0));
    for pad in [Padding::Zero, Padding::Reflect] {
        check_primitive(
            &[1, 2, 7, 8],
            |g, x| g.conv3d(x, w.clone(), pad).unwrap(),
            31,
        );
    }
}

#[test]
fn fd_pooling_rectifier_square_abs() {
    check_primitive(&[2, 6, 6], |g, x| g.maxpool2(x).unwrap(), 40);
    check_primitive(&[2, 7, 5], |g, x| g.avgpool2(x).unwrap(), 41);
    check_primitive(&[2, 4, 4], |g, x| g.relu(x).unwrap(), 42);
    check_primitive(&[2, 4, 4], |g, x| g.abs(x).unwrap(), 43);
    check_primitive(&[2, 4, 4], |g, x| g.square(x).unwrap(), 44);
}

#[test]
fn fd_affine_concat_resize_gray() {
    check_primitive(
        &[3, 4, 4],
        |g, x| {
            g.channel_affine(x, &[2.0, -1.0, 0.5], &[0.1, 0.2, 0.3])
                .unwrap()
        },
        50,
    );
    check_primitive(
        &[2, 3, 3],
        |g, x| {
            let s = g.scale(x, 0.7).unwrap();
            g.concat(&[x, s]).unwrap()
        },
        51,
    );
    check_primitive(&[2, 5, 6], |g, x| g.resize(x, 8, 4).unwrap(), 52);
    check_primitive(&[2, 6, 6], |g, x| g.resize(x, 3, 4).unwrap(), 53);
    check_primitive(&[3, 4, 5], |g, x| g.grayscale(x).unwrap(), 54);
}

#[test]
fn fd_divnorm_matmul_diff() {
    check_primitive(
        &[4, 3, 3],
        |g, x| {
            let e = g.square(x).unwrap();
            g.divnorm(e, 1e-3).unwrap()
        },
        60,
    );
    check_primitive(
        &[3, 5],
        |g, x| {
            let gram = g.matmul_nt(x, x).unwrap();
            g.scale(gram, 1.0 / 15.0).unwrap()
        },
        61,
    );
    for axis in [1, 2] {
        check_primitive(&[2, 4, 5], |g, x| g.diff(x, axis).unwrap(), 62);
    }
    check_primitive(
        &[2, 3, 3],
        |g, x| {
            let r = g.reshape(x, &[2, 9]).unwrap();
            let m = g.mean(r).unwrap();
            g.scale(m, 3.0).unwrap()
        },
        63,
    );
}

#[test]
fn backward_is_linear_in_the_root() {
    let w = Arc::new(rand_tensor(&[3, 3, 3, 3], 70, -1.0, 1.0));
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[3, 6, 6]).unwrap();
    let c = g.conv2d(x, w, None, Padding::Zero).unwrap();
    let r = g.relu(c).unwrap();
    let sq = g.square(r).unwrap();
    let l1 = g.sum(sq).unwrap();
    let a = g.abs(x).unwrap();
    let l2 = g.mean(a).unwrap();
    let s1 = g.scale(l1, 0.3).unwrap();
    let s2 = g.scale(l2, -1.7).unwrap();
    let root = g.add(s1, s2).unwrap();
    g.set_input("x", rand_tensor(&[3, 6, 6], 71, -1.0, 1.0))
        .unwrap();
    g.forward(root).unwrap();
    let gc = g.backward(root, "x").unwrap();
    let g1 = g.backward(l1, "x").unwrap();
    let g2 = g.backward(l2, "x").unwrap();
    for ((c, a), b) in gc.data().iter().zip(g1.data()).zip(g2.data()) {
        assert!((c - (0.3 * a - 1.7 * b)).abs() < 1e-6);
    }
}

#[test]
fn forward_is_deterministic() {
    let w = Arc::new(rand_tensor(&[8, 3, 3, 3], 80, -1.0, 1.0).cast::<f32>());
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input("x", &[3, 9, 9]).unwrap();
        let c = g.conv2d(x, w.clone(), None, Padding::Reflect).unwrap();
        let p = g.maxpool2(c).unwrap();
        let v = rand_tensor(&[3, 9, 9], 81, 0.0, 1.0).cast();
        g.forward_eval(p, &[("x", v)]).unwrap().clone()
    };
    assert_eq!(run().data(), run().data());
}
