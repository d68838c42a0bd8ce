use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{dropout, layer_norm, linear};
use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn eval1(x: Tensor<f64>, f: impl Fn(&Graph<f64>, Var) -> Var) -> Tensor<f64> {
    let g = Graph::new();
    let v = g.constant(x);
    let out = f(&g, v);
    g.value(out)
}

#[test]
fn scalar_activations() {
    let s = eval1(Tensor::scalar(0.0), |g, v| g.sigmoid(v));
    assert_eq!(s.item(), 0.5);
    let sp = eval1(Tensor::scalar(0.0), |g, v| g.softplus(v));
    assert!((sp.item() - 2f64.ln()).abs() < 1e-12);
    let th = eval1(Tensor::scalar(0.0), |g, v| g.tanh(v));
    assert_eq!(th.item(), 0.0);
    // Large arguments stay finite.
    let big = eval1(t(&[2], &[80.0, -80.0]), |g, v| g.softplus(v));
    assert!((big.data()[0] - 80.0).abs() < 1e-9 && big.data()[1] >= 0.0);
}

#[test]
fn binary_shape_mismatch_is_contract_error() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2]));
    let b = g.constant(Tensor::zeros([3]));
    assert!(matches!(g.add(a, b), Err(Error::Contract(_))));
    assert!(matches!(g.mul(a, b), Err(Error::Contract(_))));
}

#[test]
fn matmul_examples() {
    let g = Graph::<f64>::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = g.constant(t(&[2, 1], &[5.0, -2.0]));
    assert_eq!(g.value(g.matmul(eye, x).unwrap()).data(), &[5.0, -2.0]);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let y = g.value(g.matmul(a, ones).unwrap());
    assert_eq!(y.shape(), &[2, 1]);
    assert_eq!(y.data(), &[3.0, 7.0]);

    let z = g.constant(Tensor::zeros([3, 2]));
    assert!(g.value(g.matmul(z, x).unwrap()).data().iter().all(|&v| v == 0.0));

    let bad = g.constant(Tensor::zeros([3, 1]));
    assert!(matches!(g.matmul(a, bad), Err(Error::Contract(_))));
}

#[test]
fn softmax_examples() {
    let s = eval1(t(&[3], &[0.7, 0.7, 0.7]), |g, v| g.softmax(v).unwrap());
    for &p in s.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
    let s = eval1(t(&[2], &[1.0, 0.0]), |g, v| g.softmax(v).unwrap());
    assert!((s.data()[0] - 0.731059).abs() < 1e-6);
    assert!((s.data()[1] - 0.268941).abs() < 1e-6);

    let base = eval1(t(&[3], &[0.3, -1.2, 2.0]), |g, v| g.softmax(v).unwrap());
    let shifted = eval1(t(&[3], &[1000.3, 998.8, 1002.0]), |g, v| g.softmax(v).unwrap());
    assert!(base.max_abs_diff(&shifted) < 1e-9);

    let g = Graph::<f64>::new();
    let empty = g.constant(Tensor::zeros([0]));
    assert!(matches!(g.softmax(empty), Err(Error::Contract(_))));
}

#[test]
fn softmax_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let x = Tensor::<f32>::from_fn([n], |_| rng.random_range(-50.0..50.0));
        let g = Graph::new();
        let v = g.constant(x);
        let s = g.value(g.softmax(v).unwrap());
        assert!((s.sum() - 1.0).abs() <= 1e-5);
        assert!(s.data().iter().all(|&p| p > 0.0 || n > 1));
        assert!(s.data().iter().all(|p| p.is_finite()));
    }
}

#[test]
fn avg_pool_examples() {
    let c = eval1(Tensor::full([4, 5, 2], 0.25), |g, v| g.avg_pool(v, 3, 1).unwrap());
    assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    let m = eval1(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), |g, v| g.avg_pool(v, 2, 2).unwrap());
    assert_eq!(m.data(), &[2.5]);
    let x = t(&[2, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let id = eval1(x.clone(), |g, v| g.avg_pool(v, 1, 1).unwrap());
    assert_eq!(id, x);

    let g = Graph::<f64>::new();
    let v = g.constant(Tensor::zeros([2, 2, 1]));
    assert!(matches!(g.avg_pool(v, 3, 1), Err(Error::Contract(_))));
}

#[test]
fn conv2d_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2, 1], &[1.0, -2.0, 3.0, 4.0]));
    let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    assert_eq!(g.value(g.conv2d(x, k, 1).unwrap()).data(), &[1.0, -2.0, 3.0, 4.0]);

    let ones = g.constant(Tensor::full([3, 3, 1], 1.0));
    let k2 = g.constant(Tensor::full([2, 2, 1, 1], 1.0));
    let y = g.value(g.conv2d(ones, k2, 1).unwrap());
    assert_eq!(y.shape(), &[2, 2, 1]);
    assert!(y.data().iter().all(|&v| v == 4.0));

    let x5 = g.constant(Tensor::full([5, 5, 2], 1.0));
    let k3 = g.constant(Tensor::full([3, 3, 2, 4], 1.0));
    assert_eq!(g.shape(g.conv2d(x5, k3, 2).unwrap()), vec![2, 2, 4]);

    let big = g.constant(Tensor::zeros([4, 4, 1, 1]));
    assert!(matches!(g.conv2d(ones, big, 1), Err(Error::Contract(_))));
    let wrong_ch = g.constant(Tensor::zeros([1, 1, 3, 1]));
    assert!(matches!(g.conv2d(ones, wrong_ch, 1), Err(Error::Contract(_))));
}

#[test]
fn cosine_examples() {
    let g = Graph::<f64>::new();
    let v = g.constant(t(&[3], &[0.3, -2.0, 1.0]));
    assert!((g.value(g.cosine(v, v).unwrap()).item() - 1.0).abs() < 1e-12);
    let e1 = g.constant(t(&[2], &[1.0, 0.0]));
    let e2 = g.constant(t(&[2], &[0.0, 1.0]));
    assert_eq!(g.value(g.cosine(e1, e2).unwrap()).item(), 0.0);
    let z = g.constant(Tensor::zeros([3]));
    assert_eq!(g.value(g.cosine(v, z).unwrap()).item(), 0.0);
    assert!(matches!(g.cosine(v, e1), Err(Error::Contract(_))));
}

#[test]
fn cosine_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..500 {
        let n = rng.random_range(1..10);
        let x = Tensor::<f32>::from_fn([n], |_| rng.random_range(-1e3..1e3));
        let y = if i % 10 == 0 {
            Tensor::zeros([n])
        } else {
            Tensor::<f32>::from_fn([n], |_| rng.random_range(-1e-3..1e-3))
        };
        let g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(y));
        let c = g.value(g.cosine(a, b).unwrap()).item();
        assert!((-1.0..=1.0).contains(&c), "{c}");
    }
}

#[test]
fn layer_norm_examples() {
    let g = Graph::<f64>::new();
    let gain = g.constant(Tensor::full([2], 1.0));
    let bias = g.constant(Tensor::zeros([2]));
    let x = g.constant(t(&[2], &[1.0, -1.0]));
    let y = g.value(layer_norm(&g, x, gain, bias).unwrap());
    assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);

    let c = g.constant(Tensor::full([5], 3.7));
    assert!(g.value(g.normalize(c).unwrap()).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = g.constant(Tensor::<f64>::from_fn([17], |_| rng.random_range(-5.0..5.0)));
        let n = g.value(g.normalize(x).unwrap());
        assert!((n.sum() / 17.0).abs() < 1e-6);
    }
    let one = g.constant(Tensor::zeros([1]));
    assert!(g.normalize(one).is_err());
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[1.0, -2.0, 0.5]));
    assert_eq!(dropout(&g, x, 0.8, false, &mut rng).unwrap(), x);
    assert_eq!(dropout(&g, x, 1.0, true, &mut rng).unwrap(), x);
    assert!(matches!(dropout(&g, x, 0.0, true, &mut rng), Err(Error::Contract(_))));

    // Monte-Carlo: the expected output equals the input.
    let big = g.constant(Tensor::full([100_000], 1.5));
    let y = g.value(dropout(&g, big, 0.8, true, &mut rng).unwrap());
    let mean = y.sum() / 100_000.0;
    assert!((mean - 1.5).abs() / 1.5 < 0.02, "{mean}");
    assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.875).abs() < 1e-12));
}

#[test]
fn backward_examples() {
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.param(Tensor::scalar(3.0));
    let unused = g.param(Tensor::full([4], 1.0));
    let xy = g.mul(x, y).unwrap();
    let grads = g.backward(xy).unwrap();
    assert_eq!(grads.get(x).item(), 3.0);
    assert_eq!(grads.get(y).item(), 2.0);
    assert_eq!(grads.get(unused), Tensor::zeros([4]));

    let z = g.param(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.backward(s).unwrap().get(z).item(), 0.25);

    let r = g.param(Tensor::scalar(0.0));
    let rr = g.relu(r);
    assert_eq!(g.backward(rr).unwrap().get(r).item(), 0.0);

    assert!(matches!(g.backward(unused), Err(Error::Contract(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::<f32>::new();
        let w = g.param(Tensor::from_fn([6, 5], |_| rng.random_range(-1.0..1.0)));
        let b = g.param(Tensor::from_fn([6], |_| rng.random_range(-1.0..1.0)));
        let x = g.constant(Tensor::from_fn([5], |_| rng.random_range(-1.0..1.0)));
        let h = linear(&g, w, b, x).unwrap();
        let h = g.tanh(h);
        let s = g.softmax(h).unwrap();
        let loss = g.sum(g.mul(s, h).unwrap());
        let grads = g.backward(loss).unwrap();
        (grads.get(w), grads.get(b))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn grad_check_examples() {
    let quad = grad_check(&[t(&[3], &[0.5, -1.5, 2.0])], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(g.scale(sq, 3.0)))
    })
    .unwrap();
    assert!(quad <= 1e-4, "{quad}");

    let lin = grad_check(&[t(&[4], &[0.1, 0.2, -0.3, 4.0])], |g, v| Ok(g.sum(g.scale(v[0], -2.5)))).unwrap();
    assert!(lin <= 1e-5, "{lin}");
}

#[test]
fn every_op_passes_grad_check() {
    for (name, err) in check_ops(10, 2024).unwrap() {
        assert!(err <= 1e-3, "{name}: relative error {err}");
    }
}
