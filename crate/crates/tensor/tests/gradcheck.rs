use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomshift_tensor::{grad, Conv2dConfig, Tensor};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central-difference gradient of `f` at `x`.
fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + eps;
            let up = f(&xs);
            xs[i] = orig - eps;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], rel: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs()).max(1e-3);
        assert!(
            (a - n).abs() / scale < rel,
            "component {i}: analytic {a} vs numeric {n}"
        );
    }
}

fn check_unary(shape: &[usize], op: impl Fn(&Tensor<f64>) -> Tensor<f64>, positive: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n: usize = shape.iter().product();
    let mut x = randn(&mut rng, n);
    if positive {
        x.iter_mut().for_each(|v| *v = v.abs() + 0.2);
    }
    let weights = Tensor::new(randn(&mut rng, n), shape);
    let loss = |xs: &[f64]| op(&Tensor::new(xs.to_vec(), shape)).mul(&weights).sum().item();
    let leaf = Tensor::leaf(x.clone(), shape);
    let out = op(&leaf).mul(&weights).sum();
    let g = grad(&out, &[&leaf], false).remove(0);
    assert_close(&g.to_f64(), &numeric_grad(&loss, &x, 1e-6), 1e-6);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let s = [2, 3, 4];
    check_unary(&s, |x| x.tanh(), false);
    check_unary(&s, |x| x.exp(), false);
    check_unary(&s, |x| x.ln(), true);
    check_unary(&s, |x| x.sqrt(), true);
    check_unary(&s, |x| x.square().scale(0.3).offset(2.0), false);
    check_unary(&s, |x| x.leaky_relu(0.2), false);
    check_unary(&s, |x| x.div(&x.square().offset(1.0)), false);
    check_unary(&s, |x| x.sum_to(&[1, 3, 1]).broadcast_to(&[2, 3, 4]).mul(x), false);
    check_unary(&s, |x| x.reshape(&[6, 4]).sum_per_sample().exp().reshape(&[6, 1]).broadcast_to(&[6, 4]).reshape(&[2, 3, 4]).mul(x), false);
    check_unary(&s, |x| x.mean_per_sample().reshape(&[2, 1, 1]).sub(x).square(), false);
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cfg in [
        Conv2dConfig::same(3),
        Conv2dConfig { stride: 2, padding: 1 },
        Conv2dConfig { stride: 1, padding: 0 },
    ] {
        let xs = [2, 3, 7, 6];
        let ws = [4, 3, 3, 3];
        let x = randn(&mut rng, xs.iter().product());
        let w = randn(&mut rng, ws.iter().product());
        let probe_shape = Tensor::<f64>::zeros(&xs)
            .conv2d(&Tensor::zeros(&ws), cfg)
            .shape()
            .to_vec();
        let probe = Tensor::new(randn(&mut rng, probe_shape.iter().product()), &probe_shape);

        let xl = Tensor::leaf(x.clone(), &xs);
        let wl = Tensor::leaf(w.clone(), &ws);
        let out = xl.conv2d(&wl, cfg).tanh().mul(&probe).sum();
        let g = grad(&out, &[&xl, &wl], false);

        let wc = Tensor::new(w.clone(), &ws);
        let fx = |v: &[f64]| {
            Tensor::new(v.to_vec(), &xs).conv2d(&wc, cfg).tanh().mul(&probe).sum().item()
        };
        assert_close(&g[0].to_f64(), &numeric_grad(&fx, &x, 1e-6), 1e-6);
        let xc = Tensor::new(x.clone(), &xs);
        let fw = |v: &[f64]| {
            xc.conv2d(&Tensor::new(v.to_vec(), &ws), cfg).tanh().mul(&probe).sum().item()
        };
        assert_close(&g[1].to_f64(), &numeric_grad(&fw, &w, 1e-6), 1e-6);
    }
}

/// Penalty `(||d f / d x|| - 1)^2` of a small conv critic, as a function of its weights.
fn penalty(x: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>, create_graph: bool) -> Tensor<f64> {
    let xl = Tensor::leaf(x.data().to_vec(), x.shape());
    let h = xl.conv2d(w1, Conv2dConfig::same(3));
    let mu = h.sum_to(&[1, 4, 1, 1]).scale(1.0 / 25.0);
    let centered = h.sub(&mu);
    let var = centered.square().sum_to(&[1, 4, 1, 1]).scale(1.0 / 25.0);
    let normed = centered.div(&var.offset(1e-5).sqrt());
    let f = normed.leaky_relu(0.2).conv2d(w2, Conv2dConfig::same(3)).tanh().mean();
    let gx = grad(&f, &[&xl], true).remove(0);
    let norm = gx.square().sum().offset(1e-12).sqrt();
    let p = norm.offset(-1.0).square();
    if create_graph {
        p
    } else {
        p.detach()
    }
}

#[test]
fn second_order_gradient_through_gradient_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::new(randn(&mut rng, 25), &[1, 1, 5, 5]);
    let w1v = randn(&mut rng, 36);
    let w2v = randn(&mut rng, 36);
    let w1 = Tensor::leaf(w1v.clone(), &[4, 1, 3, 3]);
    let w2 = Tensor::leaf(w2v.clone(), &[1, 4, 3, 3]);
    let p = penalty(&x, &w1, &w2, true);
    let g = grad(&p, &[&w1, &w2], false);

    let w2c = Tensor::new(w2v.clone(), &[1, 4, 3, 3]);
    let f1 = |v: &[f64]| penalty(&x, &Tensor::leaf(v.to_vec(), &[4, 1, 3, 3]), &w2c, false).item();
    assert_close(&g[0].to_f64(), &numeric_grad(&f1, &w1v, 1e-5), 1e-5);
    let w1c = Tensor::new(w1v.clone(), &[4, 1, 3, 3]);
    let f2 = |v: &[f64]| penalty(&x, &w1c, &Tensor::leaf(v.to_vec(), &[1, 4, 3, 3]), false).item();
    assert_close(&g[1].to_f64(), &numeric_grad(&f2, &w2v, 1e-5), 1e-5);
}

#[test]
fn unreachable_inputs_get_zero_gradient() {
    let a = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2]);
    let b = Tensor::<f64>::leaf(vec![3.0], &[1]);
    let g = grad(&a.square().sum(), &[&a, &b], false);
    assert_eq!(g[0].to_f64(), vec![2.0, 4.0]);
    assert_eq!(g[1].to_f64(), vec![0.0]);
    assert!(!g[0].requires_grad());
}

#[test]
fn no_grad_blocks_recording() {
    let a = Tensor::<f32>::leaf(vec![1.0, 2.0], &[2]);
    let b = zoomshift_tensor::no_grad(|| a.square());
    assert!(!b.requires_grad());
    assert!(a.square().requires_grad());
}
