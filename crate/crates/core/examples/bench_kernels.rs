use std::time::Instant;

use advl::{Network, Profile, Tensor};

fn main() {
    let net = Network::from_profile(Profile::Mnist, &[1, 28, 28], 10, 1.0, 1).unwrap();
    let x = Tensor::full(&[1, 28, 28], 0.3);
    let n = 200;
    let start = Instant::now();
    for _ in 0..n {
        let tr = net.forward(&x).unwrap();
        net.backward(&tr, &tr.probs, None, true).unwrap();
    }
    println!("forward+input grad: {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / n as f64);
    let mut grads = net.zero_grads();
    let start = Instant::now();
    for _ in 0..n {
        let tr = net.forward(&x).unwrap();
        net.backward(&tr, &tr.probs, Some(&mut grads), false).unwrap();
    }
    println!("forward+param grad: {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / n as f64);
    let start = Instant::now();
    for _ in 0..n {
        net.forward(&x).unwrap();
    }
    println!("forward: {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / n as f64);
}
