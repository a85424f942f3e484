//! Layer-stacked image classifier with a temperature softmax head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, conv_backward_from_cols, conv_from_cols, gemm, im2col, maxpool2x2, ConvGeometry,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    ConvRelu { filters: usize, kernel: usize },
    Maxpool,
    Flatten,
    DenseRelu { units: usize },
    DenseLinear { units: usize },
}

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Four 3×3 conv layers (32, 32, 64, 64) with two pools, then dense 200, 200.
    Mnist,
    /// Same as `Mnist` with 64/128 filters and 256-unit dense layers, 3×32×32 input.
    Cifar,
    /// One 3×3×8 conv, a pool, dense 32. For fast checks.
    Tiny,
}

impl Profile {
    pub fn layers(self, classes: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        match self {
            Profile::Mnist | Profile::Cifar => {
                let (narrow, wide, dense) = if self == Profile::Mnist {
                    (32, 64, 200)
                } else {
                    (64, 128, 256)
                };
                vec![
                    ConvRelu { filters: narrow, kernel: 3 },
                    ConvRelu { filters: narrow, kernel: 3 },
                    Maxpool,
                    ConvRelu { filters: wide, kernel: 3 },
                    ConvRelu { filters: wide, kernel: 3 },
                    Maxpool,
                    Flatten,
                    DenseRelu { units: dense },
                    DenseRelu { units: dense },
                    DenseLinear { units: classes },
                ]
            }
            Profile::Tiny => vec![
                ConvRelu { filters: 8, kernel: 3 },
                Maxpool,
                Flatten,
                DenseRelu { units: 32 },
                DenseLinear { units: classes },
            ],
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Profile::Mnist),
            "cifar" => Ok(Profile::Cifar),
            "tiny" => Ok(Profile::Tiny),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

/// One layer with its parameters (`None` for pooling and flatten).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl Layer {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn conv_geometry(&self) -> ConvGeometry {
        ConvGeometry::new(&self.input_shape, self.weights.as_ref().unwrap().shape())
            .expect("validated at construction")
    }
}

/// Shapes of every parameter tensor implied by an architecture, in layer order
/// (weights before bias).
pub fn param_shapes(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::new();
    let mut cur = input_shape.to_vec();
    for spec in specs {
        let (params, out) = layer_shapes(spec, &cur)?;
        shapes.extend(params);
        cur = out;
    }
    Ok(shapes)
}

fn layer_shapes(spec: &LayerSpec, input: &[usize]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    match *spec {
        LayerSpec::ConvRelu { filters, kernel } => {
            let &[c, h, w] = input else {
                return Err(Error::Shape(format!("conv layer needs C×H×W input, got {input:?}")));
            };
            if kernel == 0 || filters == 0 || kernel > h || kernel > w {
                return Err(Error::Shape(format!(
                    "conv {filters}×{kernel}×{kernel} does not fit input {input:?}"
                )));
            }
            Ok((
                vec![vec![filters, c, kernel, kernel], vec![filters]],
                vec![filters, h - kernel + 1, w - kernel + 1],
            ))
        }
        LayerSpec::Maxpool => {
            let &[c, h, w] = input else {
                return Err(Error::Shape(format!("maxpool needs C×H×W input, got {input:?}")));
            };
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Shape(format!("maxpool needs even spatial dims, got {h}×{w}")));
            }
            Ok((vec![], vec![c, h / 2, w / 2]))
        }
        LayerSpec::Flatten => Ok((vec![], vec![input.iter().product()])),
        LayerSpec::DenseRelu { units } | LayerSpec::DenseLinear { units } => {
            let &[n] = input else {
                return Err(Error::Shape(format!("dense layer needs a flat input, got {input:?}")));
            };
            if units == 0 {
                return Err(Error::Shape("dense layer with zero units".into()));
            }
            Ok((vec![vec![units, n], vec![units]], vec![units]))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    temperature: f64,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[i]` is the input of layer `i`; the last entry is the logits.
    activations: Vec<Tensor>,
    /// Unfolded conv inputs, or pooling argmax indices, per layer.
    scratch: Vec<Scratch>,
    pub probs: Tensor,
    temperature: f64,
}

#[derive(Debug, Clone)]
enum Scratch {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<usize>),
}

impl ForwardTrace {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn logits(&self) -> &Tensor {
        self.activations.last().unwrap()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn predicted(&self) -> usize {
        self.logits().argmax()
    }
}

impl Network {
    /// Builds a network with all parameters zero.
    pub fn zeros(input_shape: &[usize], specs: &[LayerSpec], temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        match specs.last() {
            Some(LayerSpec::DenseLinear { .. }) => {}
            _ => {
                return Err(Error::Shape(
                    "the final layer must be dense_linear (the logits layer)".into(),
                ))
            }
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut cur = input_shape.to_vec();
        for spec in specs {
            let (params, out) = layer_shapes(spec, &cur)?;
            let mut params = params.into_iter().map(|s| Tensor::zeros(&s));
            layers.push(Layer {
                spec: *spec,
                weights: params.next(),
                bias: params.next(),
                input_shape: cur,
                output_shape: out.clone(),
            });
            cur = out;
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            temperature,
        })
    }

    /// He-normal weights, zero biases.
    pub fn init(input_shape: &[usize], specs: &[LayerSpec], temperature: f64, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(input_shape, specs, temperature)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            if let Some(w) = layer.weights.as_mut() {
                let fan_in: usize = w.shape()[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                for v in w.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        Ok(net)
    }

    pub fn from_profile(profile: Profile, input_shape: &[usize], classes: usize, temperature: f64, seed: u64) -> Result<Self> {
        Self::init(input_shape, &profile.layers(classes), temperature, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().unwrap().output_shape[0]
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(())
    }

    /// Parameter tensors in layer order, weights before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }

    /// Zero-filled buffers shaped like [`Network::params`].
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape(format!(
                "input shape {:?}, network expects {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut scratch = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in &self.layers {
            let input = activations.last().unwrap();
            let (out, s) = match layer.spec {
                LayerSpec::ConvRelu { .. } => {
                    let g = layer.conv_geometry();
                    let cols = im2col(&g, input.data());
                    let mut out = conv_from_cols(
                        &g,
                        &cols,
                        layer.weights.as_ref().unwrap().data(),
                        layer.bias.as_ref().unwrap().data(),
                    );
                    relu_in_place(&mut out);
                    (Tensor::new(g.output_shape(), out)?, Scratch::Cols(cols))
                }
                LayerSpec::Maxpool => {
                    let (out, idx) = maxpool2x2(input)?;
                    (out, Scratch::Argmax(idx))
                }
                LayerSpec::Flatten => (
                    input.clone().reshape(layer.output_shape.clone())?,
                    Scratch::None,
                ),
                LayerSpec::DenseRelu { .. } | LayerSpec::DenseLinear { .. } => {
                    let w = layer.weights.as_ref().unwrap();
                    let (units, n) = (w.shape()[0], w.shape()[1]);
                    let mut out = layer.bias.as_ref().unwrap().data().to_vec();
                    gemm(units, n, 1, w.data(), (n as isize, 1), input.data(), (1, 1), &mut out, true);
                    if matches!(layer.spec, LayerSpec::DenseRelu { .. }) {
                        relu_in_place(&mut out);
                    }
                    (Tensor::new(vec![units], out)?, Scratch::None)
                }
            };
            activations.push(out);
            scratch.push(s);
        }
        let probs = softmax_t(activations.last().unwrap(), self.temperature)?;
        Ok(ForwardTrace {
            activations,
            scratch,
            probs,
            temperature: self.temperature,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits().clone())
    }

    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.probs)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.forward(x)?.predicted())
    }

    /// Backpropagates `dlogits` (the gradient of a scalar with respect to the logits).
    ///
    /// Parameter gradients are added into `grads` when given; the input gradient
    /// is returned when `want_input` is set.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        dlogits: &Tensor,
        mut grads: Option<&mut [Tensor]>,
        want_input: bool,
    ) -> Result<Option<Tensor>> {
        if dlogits.shape() != trace.logits().shape() {
            return Err(Error::Shape(format!(
                "logit gradient shape {:?}, logits are {:?}",
                dlogits.shape(),
                trace.logits().shape()
            )));
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params().len() {
                return Err(Error::Shape("gradient buffer count mismatch".into()));
            }
        }
        let mut param_idx = self.params().len();
        let mut grad = dlogits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            let output = &trace.activations[i + 1];
            let need_input = want_input || i > 0;
            let has_params = layer.weights.is_some();
            if has_params {
                param_idx -= 2;
            }
            grad = match (&layer.spec, &trace.scratch[i]) {
                (LayerSpec::ConvRelu { .. }, Scratch::Cols(cols)) => {
                    let g = layer.conv_geometry();
                    let mut gout = grad.into_data();
                    mask_relu(&mut gout, output.data());
                    let params = grads.as_deref_mut().map(|bufs| {
                        let (w, b) = bufs[param_idx..param_idx + 2].split_at_mut(1);
                        (w[0].data_mut(), b[0].data_mut())
                    });
                    match conv_backward_from_cols(
                        &g,
                        cols,
                        layer.weights.as_ref().unwrap().data(),
                        &gout,
                        params,
                        need_input,
                    ) {
                        Some(gi) => Tensor::new(layer.input_shape.clone(), gi)?,
                        None => return Ok(None),
                    }
                }
                (LayerSpec::Maxpool, Scratch::Argmax(idx)) => {
                    tensor::maxpool2x2_backward(&layer.input_shape, idx, &grad)?
                }
                (LayerSpec::Flatten, _) => grad.reshape(layer.input_shape.clone())?,
                (LayerSpec::DenseRelu { .. } | LayerSpec::DenseLinear { .. }, _) => {
                    let w = layer.weights.as_ref().unwrap();
                    let (units, n) = (w.shape()[0], w.shape()[1]);
                    let mut gout = grad.into_data();
                    if matches!(layer.spec, LayerSpec::DenseRelu { .. }) {
                        mask_relu(&mut gout, output.data());
                    }
                    if let Some(bufs) = grads.as_deref_mut() {
                        // dW[units×n] += g[units×1] · xᵀ[1×n]
                        gemm(
                            units,
                            1,
                            n,
                            &gout,
                            (1, 1),
                            input.data(),
                            (n as isize, 1),
                            bufs[param_idx].data_mut(),
                            true,
                        );
                        for (b, g) in bufs[param_idx + 1].data_mut().iter_mut().zip(&gout) {
                            *b += g;
                        }
                    }
                    if !need_input {
                        return Ok(None);
                    }
                    let mut gi = vec![0.0; n];
                    gemm(n, units, 1, w.data(), (1, n as isize), &gout, (1, 1), &mut gi, false);
                    Tensor::new(vec![n], gi)?
                }
                _ => unreachable!("scratch recorded for every layer kind"),
            };
        }
        Ok(want_input.then_some(grad))
    }

    /// Value and exact input gradient of a scalar loss defined on the forward trace.
    ///
    /// `loss` returns the loss and its gradient with respect to the logits.
    pub fn input_gradient<F>(&self, x: &Tensor, loss: F) -> Result<(f64, Tensor)>
    where
        F: FnOnce(&ForwardTrace) -> (f64, Tensor),
    {
        let trace = self.forward(x)?;
        let (value, dlogits) = loss(&trace);
        let grad = self.backward(&trace, &dlogits, None, true)?.unwrap();
        Ok((value, grad))
    }

    /// Batch-averaged parameter gradients of a per-sample loss.
    pub fn param_gradients<F>(&self, batch: &[&Tensor], mut loss: F) -> Result<(f64, Vec<Tensor>)>
    where
        F: FnMut(usize, &ForwardTrace) -> (f64, Tensor),
    {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for (i, x) in batch.iter().enumerate() {
            let trace = self.forward(x)?;
            let (value, dlogits) = loss(i, &trace);
            total += value;
            self.backward(&trace, &dlogits, Some(&mut grads), false)?;
        }
        let scale = 1.0 / batch.len() as f64;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        Ok((total * scale, grads))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries whose ReLU output was not positive.
fn mask_relu(grad: &mut [f64], output: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `exp(z_i / T) / Σ_j exp(z_j / T)`, shifted by `max z` before exponentiating.
pub fn softmax_t(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let z = logits.data();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.into_iter().map(|e| e / sum).collect())
}

/// `log softmax_T(z)` via log-sum-exp.
pub fn log_softmax_t(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let z = logits.data();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    Ok(logits.map(|v| (v - max) / temperature - lse))
}

/// Pulls a gradient on softmax probabilities back to the logits:
/// `dz_j = p_j (g_j − Σ_i g_i p_i) / T`.
pub fn softmax_vjp(probs: &Tensor, dprobs: &Tensor, temperature: f64) -> Result<Tensor> {
    probs.expect_same_shape(dprobs)?;
    let dot: f64 = probs.data().iter().zip(dprobs.data()).map(|(p, g)| p * g).sum();
    probs.zip_map(dprobs, |p, g| p * (g - dot) / temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_t(&Tensor::from_vec(vec![0.0, 0.0]), 7.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let z = Tensor::from_vec(vec![1.0, 2.0]);
        let p = softmax_t(&z, 1.0).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert!((p.data()[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((p.data()[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((p.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);

        let p = softmax_t(&z, 100.0).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.5).abs() < 0.0025));

        assert!(matches!(softmax_t(&z, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut net = Network::init(&[1, 8, 8], &Profile::Tiny.layers(10), 1.0, 3).unwrap();
        let last = net.params_mut().len();
        for (i, p) in net.params_mut().into_iter().enumerate() {
            if i >= last - 2 {
                p.data_mut().fill(0.0);
            }
        }
        let p = net.probs(&random_input(&[1, 8, 8], 1)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let net = Network::init(&[1, 8, 8], &Profile::Tiny.layers(3), 1.0, 3).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 6, 6])), Err(Error::Shape(_))));
    }

    #[test]
    fn architecture_must_end_in_logits() {
        let specs = [LayerSpec::Flatten, LayerSpec::DenseRelu { units: 3 }];
        assert!(Network::zeros(&[4], &specs, 1.0).is_err());
    }

    #[test]
    fn mnist_profile_shapes() {
        let net = Network::from_profile(Profile::Mnist, &[1, 28, 28], 10, 1.0, 0).unwrap();
        let shapes: Vec<_> = net.layers().iter().map(|l| l.output_shape().to_vec()).collect();
        assert_eq!(shapes[3], vec![64, 10, 10]);
        assert_eq!(shapes[5], vec![64, 4, 4]);
        assert_eq!(shapes[6], vec![1024]);
        assert_eq!(net.class_count(), 10);
    }

    #[test]
    fn linear_net_input_gradient_is_weight_row() {
        let specs = [LayerSpec::Flatten, LayerSpec::DenseLinear { units: 3 }];
        let net = Network::init(&[1, 2, 2], &specs, 1.0, 9).unwrap();
        let x = random_input(&[1, 2, 2], 2);
        let t = 1;
        let (_, g) = net
            .input_gradient(&x, |tr| {
                let mut d = Tensor::zeros(&[3]);
                d.data_mut()[t] = 1.0;
                (tr.logits().data()[t], d)
            })
            .unwrap();
        let w = net.layers()[1].weights.as_ref().unwrap();
        assert_eq!(g.data(), &w.data()[4..8]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = Network::init(&[1, 8, 8], &Profile::Tiny.layers(4), 1.0, 5).unwrap();
        let (_, g) = net
            .input_gradient(&random_input(&[1, 8, 8], 4), |_| (3.0, Tensor::zeros(&[4])))
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_batch_matches_single_sample() {
        let net = Network::init(&[1, 8, 8], &Profile::Tiny.layers(4), 1.0, 5).unwrap();
        let x = random_input(&[1, 8, 8], 6);
        let loss = |_: usize, tr: &ForwardTrace| {
            let d = tr.probs.clone();
            (tr.logits().data()[0], d)
        };
        let (_, one) = net.param_gradients(&[&x], loss).unwrap();
        let (_, two) = net.param_gradients(&[&x, &x], loss).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!(a.max_abs_diff(b).unwrap() <= 1e-15);
        }
    }

    #[test]
    fn prediction_is_temperature_invariant() {
        let mut net = Network::init(&[1, 8, 8], &Profile::Tiny.layers(5), 1.0, 8).unwrap();
        let x = random_input(&[1, 8, 8], 9);
        let base = net.predict(&x).unwrap();
        for t in [0.5, 5.0, 100.0] {
            net.set_temperature(t).unwrap();
            assert_eq!(net.predict(&x).unwrap(), base);
        }
    }
}
