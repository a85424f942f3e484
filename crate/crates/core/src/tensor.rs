//! Dense row-major `f64` tensors and the kernels the classifier is built from.
//!
//! Every kernel with a backward pass returns the exact gradient of the scalar
//! `<grad_out, forward(..)>`. Convolution is valid (no padding) with stride 1;
//! max pooling uses disjoint 2x2 windows with ties going to the first
//! row-major position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Routes `grad` through a ReLU whose input was `self`. The derivative at 0 is 0.
    pub fn relu_grad(&self, grad: &Tensor) -> Result<Tensor> {
        self.zip_map(grad, |x, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn arctanh(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|v| !(v.abs() < 1.0)) {
            return Err(Error::Domain(format!("arctanh argument {v} outside (-1, 1)")));
        }
        Ok(self.map(f64::atanh))
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "operand shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `c = a * b` for row-major slices, with `c` of shape `m x n` (overwritten when
/// `accumulate` is false). Strides allow either operand to be read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the index ranges implied by the dimensions and
    // strides, which callers derive from validated tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::Shape(format!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dimensions {k} and {k2} differ")));
    }
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        &mut c,
        false,
    );
    Tensor::new(vec![m, n], c)
}

/// Geometry of a valid, stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize]) -> Result<Self> {
        let (&[c, h, w], &[f, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::Shape(format!(
                "conv2d needs C×H×W input and F×C×kh×kw kernels, got {input:?} and {kernels:?}"
            )));
        };
        if kc != c {
            return Err(Error::Shape(format!(
                "kernel channels {kc} do not match input channels {c}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::Shape(format!(
                "kernel {kh}×{kw} larger than input {h}×{w}"
            )));
        }
        Ok(ConvGeometry {
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
        })
    }

    pub fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }

    /// Rows of the unfolded input (one per kernel tap).
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.filters, self.out_h(), self.out_w()]
    }
}

/// Unfolds `input` into a `patch_len × positions` matrix.
pub(crate) fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![0.0; g.patch_len() * oh * ow];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let src = &plane[(i + u) * g.width + v..(i + u) * g.width + v + ow];
                    dst[i * ow..(i + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto an input-shaped buffer.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.channels * g.height * g.width];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for i in 0..oh {
                    let dst = &mut plane[(i + u) * g.width + v..(i + u) * g.width + v + ow];
                    for (d, s) in dst.iter_mut().zip(&src[i * ow..(i + 1) * ow]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Convolution from an already unfolded input.
pub(crate) fn conv_from_cols(g: &ConvGeometry, cols: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let mut out = vec![0.0; g.filters * p];
    for (f, plane) in out.chunks_mut(p).enumerate() {
        plane.fill(bias[f]);
    }
    let k = g.patch_len();
    gemm(
        g.filters,
        k,
        p,
        kernels,
        (k as isize, 1),
        cols,
        (p as isize, 1),
        &mut out,
        true,
    );
    out
}

/// Kernel and bias gradients accumulated into `grad_kernels`/`grad_bias`; returns
/// the input gradient when `want_input` is set.
pub(crate) fn conv_backward_from_cols(
    g: &ConvGeometry,
    cols: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    grad_params: Option<(&mut [f64], &mut [f64])>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let p = g.positions();
    let k = g.patch_len();
    if let Some((grad_kernels, grad_bias)) = grad_params {
        // dK[F×k] += G[F×p] · colsᵀ[p×k]
        gemm(
            g.filters,
            p,
            k,
            grad_out,
            (p as isize, 1),
            cols,
            (1, p as isize),
            grad_kernels,
            true,
        );
        for (gb, plane) in grad_bias.iter_mut().zip(grad_out.chunks(p)) {
            *gb += plane.iter().sum::<f64>();
        }
    }
    if !want_input {
        return None;
    }
    // dcols[k×p] = Kᵀ[k×F] · G[F×p]
    let mut grad_cols = vec![0.0; k * p];
    gemm(
        k,
        g.filters,
        p,
        kernels,
        (1, k as isize),
        grad_out,
        (p as isize, 1),
        &mut grad_cols,
        false,
    );
    Some(col2im(g, &grad_cols))
}

pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernels.shape())?;
    if bias.len() != g.filters {
        return Err(Error::Shape(format!(
            "bias has {} entries for {} filters",
            bias.len(),
            g.filters
        )));
    }
    let cols = im2col(&g, input.data());
    let out = conv_from_cols(&g, &cols, kernels.data(), bias.data());
    Tensor::new(g.output_shape(), out)
}

/// Returns `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), kernels.shape())?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(Error::Shape(format!(
            "grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            g.output_shape()
        )));
    }
    let cols = im2col(&g, input.data());
    let mut grad_kernels = vec![0.0; kernels.len()];
    let mut grad_bias = vec![0.0; g.filters];
    let grad_input = conv_backward_from_cols(
        &g,
        &cols,
        kernels.data(),
        grad_out.data(),
        Some((&mut grad_kernels, &mut grad_bias)),
        true,
    )
    .expect("input gradient requested");
    Ok((
        Tensor::new(input.shape().to_vec(), grad_input)?,
        Tensor::new(kernels.shape().to_vec(), grad_kernels)?,
        Tensor::new(vec![g.filters], grad_bias)?,
    ))
}

/// Disjoint 2×2 max pooling. `argmax[o]` is the flat input index that won output cell `o`.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::Shape(format!(
            "maxpool needs C×H×W input, got {:?}",
            input.shape()
        )));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool needs even spatial dims, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, idx))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "{} pooling indices for {} output gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let buf = grad.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        *buf.get_mut(i)
            .ok_or_else(|| Error::Shape(format!("pool index {i} out of range")))? += g;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        c
    }

    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; f * oh * ow];
        for fi in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b.data()[fi];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                s += x.data()[(ci * h + i + u) * w + j + v]
                                    * k.data()[((fi * c + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[(fi * oh + i) * ow + j] = s;
                }
            }
        }
        out
    }

    #[test]
    fn tensor_rejects_inconsistent_length() {
        assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&id, &m).unwrap(), m);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = matmul(&Tensor::zeros(&[2, 3]), &random(&[3, 4], &mut rng)).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(matmul_oracle(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 4, 5], &mut rng);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_gives_bias_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 5], &mut rng);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let y = conv2d_forward(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        for (f, plane) in y.data().chunks(9).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[f]));
        }
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 5, 5], &mut rng);
        let k = random(&[2, 1, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let y = conv2d_forward(&x, &k, &b).unwrap();
        for (a, o) in y.data().iter().zip(conv_oracle(&x, &k, &b)) {
            assert!((a - o).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &k, &Tensor::zeros(&[1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_backward_zero_cotangent_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 4, 4], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let (gi, gk, gb) = conv2d_backward(&x, &k, &Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(gi.data().iter().chain(gk.data()).chain(gb.data()).all(|&v| v == 0.0));

        let x = random(&[1, 3, 3], &mut rng);
        let id = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let g = random(&[1, 3, 3], &mut rng);
        let (gi, _, _) = conv2d_backward(&x, &id, &g).unwrap();
        assert_eq!(gi.data(), g.data());
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let c = Tensor::full(&[2, 4, 4], 0.25);
        let (y, idx) = maxpool2x2(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
        assert_eq!(&idx[..4], &[0, 2, 8, 10]);

        assert!(matches!(maxpool2x2(&Tensor::zeros(&[1, 3, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[1, 6, 6], &mut rng);
        let (y, _) = maxpool2x2(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for u in 0..2 {
                    for v in 0..2 {
                        m = m.max(x.data()[(2 * i + u) * 6 + 2 * j + v]);
                    }
                }
                assert_eq!(y.data()[i * 3 + j], m);
            }
        }
    }

    #[test]
    fn elementwise_basics() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let g = x.relu_grad(&Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let z = Tensor::from_vec(vec![0.0]);
        assert_eq!(z.tanh().data(), &[0.0]);
        assert_eq!(z.arctanh().unwrap().data(), &[0.0]);
        assert!(matches!(
            Tensor::from_vec(vec![1.0]).arctanh(),
            Err(Error::Domain(_))
        ));
        assert!(x.add(&Tensor::zeros(&[2])).is_err());
        assert_eq!(x.clamp(-0.5, 1.0).data(), &[-0.5, 0.0, 1.0]);
    }

    #[test]
    fn arctanh_inverts_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_vec((0..1000).map(|_| rng.random_range(-4.0..4.0)).collect());
        let back = x.tanh().arctanh().unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-9);
    }
}
