#![allow(dead_code)]

use advl::network::LayerSpec;
use advl::tensor::{conv2d_backward, conv2d_forward, maxpool2x2, maxpool2x2_backward};
use advl::train::{cross_entropy, cross_entropy_grad};
use advl::{Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-8)`
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(1e-8f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b).unwrap() / scale
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &Tensor, f: impl FnMut(&Tensor) -> f64) -> Tensor {
    numeric_grad_step(x, FD_STEP, f)
}

pub fn numeric_grad_step(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + h;
        let up = f(&probe);
        probe.data_mut()[i] = v - h;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Central differences at `FD_STEP`, or `None` when they disagree with a
/// ten times finer stencil: a ReLU or pooling kink lies within the step.
fn smooth_numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Option<Tensor> {
    let coarse = numeric_grad(x, &mut f);
    let fine = numeric_grad_step(x, FD_STEP / 10.0, &mut f);
    (rel_error(&coarse, &fine) <= KINK_TOL).then_some(coarse)
}

const KINK_TOL: f64 = 1e-6;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error over the input, kernel and bias gradients of `⟨r, conv(x)⟩`.
pub fn conv_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..4);
    let f = rng.random_range(1..4);
    let k = rng.random_range(1..4);
    let h = rng.random_range(k..k + 4);
    let w = rng.random_range(k..k + 4);
    let x = random_tensor(&mut rng, &[c, h, w], -1.0, 1.0);
    let kern = random_tensor(&mut rng, &[f, c, k, k], -1.0, 1.0);
    let bias = random_tensor(&mut rng, &[f], -1.0, 1.0);
    let r = random_tensor(&mut rng, &[f, h - k + 1, w - k + 1], -1.0, 1.0);
    let (gi, gk, gb) = conv2d_backward(&x, &kern, &r).unwrap();
    let ni = numeric_grad(&x, |x| dot(&r, &conv2d_forward(x, &kern, &bias).unwrap()));
    let nk = numeric_grad(&kern, |kk| dot(&r, &conv2d_forward(&x, kk, &bias).unwrap()));
    let nb = numeric_grad(&bias, |b| dot(&r, &conv2d_forward(&x, &kern, b).unwrap()));
    rel_error(&gi, &ni).max(rel_error(&gk, &nk)).max(rel_error(&gb, &nb))
}

pub fn pool_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..4), 2 * rng.random_range(1..4), 2 * rng.random_range(1..4)];
    let x = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let (out, idx) = maxpool2x2(&x).unwrap();
    let r = random_tensor(&mut rng, out.shape(), -1.0, 1.0);
    let g = maxpool2x2_backward(x.shape(), &idx, &r).unwrap();
    let n = numeric_grad(&x, |x| dot(&r, &maxpool2x2(x).unwrap().0));
    rel_error(&g, &n)
}

fn with_param(net: &Network, p: usize, value: &Tensor) -> Network {
    let mut n = net.clone();
    n.params_mut()[p].data_mut().copy_from_slice(value.data());
    n
}

fn temperature_loss(net: &Network, x: &Tensor, y: &Tensor) -> f64 {
    cross_entropy(&net.logits(x).unwrap(), y, net.temperature()).unwrap()
}

/// Worst relative error of the input and every parameter gradient of a
/// temperature cross-entropy on `net` at `x`; `None` if a kink is in reach.
pub fn network_case(net: &Network, x: &Tensor, y: &Tensor) -> Option<f64> {
    let (_, gi) = net
        .input_gradient(x, |tr| {
            (0.0, cross_entropy_grad(&tr.probs, y, tr.temperature()).unwrap())
        })
        .unwrap();
    let mut worst = rel_error(&gi, &smooth_numeric_grad(x, |x| temperature_loss(net, x, y))?);
    let (_, grads) = net
        .param_gradients(&[x], |_, tr| {
            (0.0, cross_entropy_grad(&tr.probs, y, tr.temperature()).unwrap())
        })
        .unwrap();
    for (p, g) in grads.iter().enumerate() {
        let current = net.params()[p].clone();
        let n = smooth_numeric_grad(&current, |v| temperature_loss(&with_param(net, p, v), x, y))?;
        worst = worst.max(rel_error(g, &n));
    }
    Some(worst)
}

/// Zero-initialized biases put dead units exactly on the ReLU kink, where
/// central differences and the analytic subgradient legitimately disagree.
fn jittered(mut net: Network, rng: &mut ChaCha8Rng) -> Network {
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    net
}

pub fn soft_target(rng: &mut ChaCha8Rng, m: usize) -> Tensor {
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Tensor::from_vec(raw.into_iter().map(|v| v / s).collect())
}

pub fn dense_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(e) = dense_draw(seed, &mut rng) {
            return e;
        }
    }
}

fn dense_draw(seed: u64, rng: &mut ChaCha8Rng) -> Option<f64> {
    let specs = [
        LayerSpec::Flatten,
        LayerSpec::DenseRelu { units: rng.random_range(2..7) },
        LayerSpec::DenseLinear { units: 3 },
    ];
    let t = [1.0, 5.0, 20.0][rng.random_range(0..3)];
    let net = jittered(Network::init(&[1, 2, 3], &specs, t, seed).unwrap(), rng);
    let x = random_tensor(rng, &[1, 2, 3], 0.0, 1.0);
    let y = soft_target(rng, 3);
    network_case(&net, &x, &y)
}

/// Conv, pool and dense layers together, at a random temperature.
pub fn full_network_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(e) = full_network_draw(seed, &mut rng) {
            return e;
        }
    }
}

fn full_network_draw(seed: u64, rng: &mut ChaCha8Rng) -> Option<f64> {
    let specs = [
        LayerSpec::ConvRelu { filters: 3, kernel: 3 },
        LayerSpec::ConvRelu { filters: 2, kernel: 2 },
        LayerSpec::Maxpool,
        LayerSpec::Flatten,
        LayerSpec::DenseRelu { units: 5 },
        LayerSpec::DenseLinear { units: 4 },
    ];
    let t = [1.0, 5.0, 100.0][rng.random_range(0..3)];
    let net = jittered(Network::init(&[2, 7, 7], &specs, t, seed).unwrap(), rng);
    let x = random_tensor(rng, &[2, 7, 7], 0.0, 1.0);
    let y = soft_target(rng, 4);
    network_case(&net, &x, &y)
}
