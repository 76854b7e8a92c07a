//! Differentiable operations and their backward rules.

use std::collections::BTreeSet;
use std::rc::Rc;

use super::kernels::{self, Window};
use super::{broadcast_offsets, broadcast_shape, Tensor};
use crate::error::{Error, Result};

pub(super) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar,
    MulScalar(f64),
    Sqrt,
    LeakyRelu(f64),
    Tanh,
    Matmul,
    Conv2d { stride: usize, padding: usize },
    ConvTranspose2d { stride: usize, padding: usize },
    Sum { kept: Vec<usize> },
    Mean { kept: Vec<usize>, count: usize },
    MaskedMean { mask: Rc<Vec<f64>>, count: usize },
    Reshape,
    Transpose,
}

/// Materializes `src` (of shape `from`) broadcast to shape `to`.
fn expand(src: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return src.to_vec();
    }
    broadcast_offsets(from, to).into_iter().map(|o| src[o]).collect()
}

/// Sums a gradient of shape `big` down to `small` (the inverse of [`expand`]).
fn reduce_to(grad: Vec<f64>, big: &[usize], small: &[usize]) -> Vec<f64> {
    if big == small {
        return grad;
    }
    let mut out = vec![0.0; small.iter().product()];
    for (g, o) in grad.iter().zip(broadcast_offsets(small, big)) {
        out[o] += g;
    }
    out
}

fn transpose_buf(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

fn conv_window(
    op: &'static str,
    input: &[usize],
    kernel_hw: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Window> {
    let (c, h, w) = (input[1], input[2], input[3]);
    let (kh, kw) = kernel_hw;
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(
            op,
            format!("kernel {kh}×{kw} larger than padded input {h}×{w} (padding {padding})"),
        ));
    }
    Ok(Window {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

/// Window of the conv2d that a transposed convolution is the adjoint of:
/// the "image" is the transposed conv's output, the "grid" its input.
fn transpose_window(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Window> {
    const OP: &str = "conv_transpose2d";
    let (h, w) = (input[2], input[3]);
    let (f, kh, kw) = (kernel[1], kernel[2], kernel[3]);
    if stride == 0 {
        return Err(Error::invalid(OP, "stride must be at least 1"));
    }
    let out_h = ((h - 1) * stride + kh) as isize - 2 * padding as isize;
    let out_w = ((w - 1) * stride + kw) as isize - 2 * padding as isize;
    if out_h < 1 || out_w < 1 {
        return Err(Error::invalid(
            OP,
            format!("computed output size {out_h}×{out_w} is not positive"),
        ));
    }
    Ok(Window {
        channels: f,
        height: out_h as usize,
        width: out_w as usize,
        kh,
        kw,
        stride,
        padding,
        out_h: h,
        out_w: w,
    })
}

impl Tensor {
    fn binary(&self, other: &Tensor, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(name, self.shape(), other.shape()))?;
        let a = self.data();
        let b = other.data();
        let data: Vec<f64> = if self.shape() == other.shape() {
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ea = expand(&a, self.shape(), &shape);
            let eb = expand(&b, other.shape(), &shape);
            ea.into_iter().zip(eb).map(|(x, y)| f(x, y)).collect()
        };
        drop((a, b));
        Ok(Tensor::from_op(data, shape, op, vec![self.clone(), other.clone()]))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone()])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", Op::Div, |x, y| x / y)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::MulScalar(c), |x| x * c)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::LeakyRelu(0.0), |x| if x <= 0.0 { 0.0 } else { x })
    }

    /// `x` for `x > 0`, `slope·x` otherwise; the derivative at exactly zero is
    /// `slope`.
    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Contract(format!(
                "leaky_relu slope must lie in [0, 1), got {slope}"
            )));
        }
        Ok(self.unary(Op::LeakyRelu(slope), |x| if x > 0.0 { x } else { slope * x }))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected a matrix, got shape {s:?}")));
        }
        let data = transpose_buf(&self.data(), s[0], s[1]);
        Ok(Tensor::from_op(data, vec![s[1], s[0]], Op::Transpose, vec![self.clone()]))
    }

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, &self.data(), &other.data(), &mut out);
        Ok(Tensor::from_op(out, vec![m, n], Op::Matmul, vec![self.clone(), other.clone()]))
    }

    /// Cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (si, sk) = (self.shape(), kernel.shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::shape("conv2d", si, sk));
        }
        let w = conv_window("conv2d", si, (sk[2], sk[3]), stride, padding)?;
        let (n, f) = (si[0], sk[0]);
        let (rows, cols) = (w.col_rows(), w.col_cols());
        let x = self.data();
        let k = kernel.data();
        let img = w.channels * w.height * w.width;
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; n * f * cols];
        for b in 0..n {
            kernels::im2col(&w, &x[b * img..(b + 1) * img], &mut col);
            kernels::gemm_nn(f, rows, cols, &k, &col, &mut out[b * f * cols..(b + 1) * f * cols]);
        }
        drop((x, k));
        Ok(Tensor::from_op(
            out,
            vec![n, f, w.out_h, w.out_w],
            Op::Conv2d { stride, padding },
            vec![self.clone(), kernel.clone()],
        ))
    }

    /// Transposed convolution of `[N,C,H,W]` with `[C,F,kh,kw]`; the adjoint
    /// of [`Tensor::conv2d`] with the same kernel, stride and padding.
    pub fn conv_transpose2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (si, sk) = (self.shape(), kernel.shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[0] {
            return Err(Error::shape("conv_transpose2d", si, sk));
        }
        let w = transpose_window(si, sk, stride, padding)?;
        let (n, c) = (si[0], si[1]);
        let (rows, cols) = (w.col_rows(), w.col_cols());
        let out_img = w.channels * w.height * w.width;
        let x = self.data();
        let k = kernel.data();
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; n * out_img];
        for b in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            kernels::gemm_tn(rows, c, cols, &k, &x[b * c * cols..(b + 1) * c * cols], &mut col);
            kernels::col2im(&w, &col, &mut out[b * out_img..(b + 1) * out_img]);
        }
        drop((x, k));
        Ok(Tensor::from_op(
            out,
            vec![n, w.channels, w.height, w.width],
            Op::ConvTranspose2d { stride, padding },
            vec![self.clone(), kernel.clone()],
        ))
    }

    fn reduce_axes(&self, axes: &[usize], keepdim: bool, mean: bool) -> Result<Tensor> {
        let name = if mean { "mean" } else { "sum" };
        let axes: BTreeSet<usize> = axes.iter().copied().collect();
        if let Some(&bad) = axes.iter().find(|&&a| a >= self.ndim()) {
            return Err(Error::invalid(name, format!("axis {bad} out of range for shape {:?}", self.shape())));
        }
        let kept: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .map(|(d, &s)| if axes.contains(&d) { 1 } else { s })
            .collect();
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        let mut out = vec![0.0; kept.iter().product()];
        for (v, o) in self.data().iter().zip(broadcast_offsets(&kept, self.shape())) {
            out[o] += v;
        }
        if mean {
            let inv = 1.0 / count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = if keepdim {
            kept.clone()
        } else {
            self.shape()
                .iter()
                .enumerate()
                .filter(|(d, _)| !axes.contains(d))
                .map(|(_, &s)| s)
                .collect()
        };
        let op = if mean { Op::Mean { kept, count } } else { Op::Sum { kept } };
        Ok(Tensor::from_op(out, shape, op, vec![self.clone()]))
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.reduce_axes(axes, keepdim, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        self.reduce_axes(axes, keepdim, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.reduce_axes(&axes, false, false).expect("all axes valid")
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.reduce_axes(&axes, false, true).expect("all axes valid")
    }

    /// `Σ x⊙mask / max(1, #ones)`. The mask is a constant: no gradient flows
    /// into it, and entries where it is zero receive exactly zero gradient.
    pub fn masked_mean(&self, mask: &Tensor) -> Result<Tensor> {
        if mask.shape() != self.shape() {
            return Err(Error::shape("masked_mean", self.shape(), mask.shape()));
        }
        let m = mask.to_vec();
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("masked_mean mask must be binary".into()));
        }
        let count = m.iter().filter(|&&v| v == 1.0).count();
        let total: f64 = self
            .data()
            .iter()
            .zip(&m)
            .filter(|(_, &k)| k == 1.0)
            .map(|(&v, _)| v)
            .sum();
        let value = total / count.max(1) as f64;
        Ok(Tensor::from_op(
            vec![value],
            Vec::new(),
            Op::MaskedMean { mask: Rc::new(m), count },
            vec![self.clone()],
        ))
    }
}

impl Op {
    /// Gradients for each input given the upstream gradient `g` of `out`.
    /// Inputs that do not track gradients get `None`.
    pub(super) fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let want = |i: usize| inputs[i].requires_grad();
        let out_shape = out.shape();
        let grads = match self {
            Op::Add | Op::Sub => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = want(0).then(|| reduce_to(g.to_vec(), out_shape, a.shape()));
                let gb = want(1).then(|| {
                    let neg = matches!(self, Op::Sub);
                    let gg = g.iter().map(|&v| if neg { -v } else { v }).collect();
                    reduce_to(gg, out_shape, b.shape())
                });
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = want(0).then(|| {
                    let eb = expand(&b.data(), b.shape(), out_shape);
                    reduce_to(g.iter().zip(eb).map(|(g, y)| g * y).collect(), out_shape, a.shape())
                });
                let gb = want(1).then(|| {
                    let ea = expand(&a.data(), a.shape(), out_shape);
                    reduce_to(g.iter().zip(ea).map(|(g, x)| g * x).collect(), out_shape, b.shape())
                });
                vec![ga, gb]
            }
            Op::Div => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let eb = expand(&b.data(), b.shape(), out_shape);
                let ga = want(0).then(|| {
                    reduce_to(g.iter().zip(&eb).map(|(g, y)| g / y).collect(), out_shape, a.shape())
                });
                let gb = want(1).then(|| {
                    let ea = expand(&a.data(), a.shape(), out_shape);
                    let gg = g
                        .iter()
                        .zip(ea.iter().zip(&eb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    reduce_to(gg, out_shape, b.shape())
                });
                vec![ga, gb]
            }
            Op::Neg => vec![Some(g.iter().map(|v| -v).collect())],
            Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
            Op::Transpose => {
                let s = out_shape;
                vec![Some(transpose_buf(g, s[0], s[1]))]
            }
            Op::MulScalar(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::Sqrt => {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(g, y)| g * 0.5 / y).collect())]
            }
            Op::LeakyRelu(slope) => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > 0.0 { g } else { g * slope })
                        .collect(),
                )]
            }
            Op::Tanh => {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect())]
            }
            Op::Matmul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = want(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, g, &b.data(), &mut ga);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, &a.data(), g, &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::Conv2d { stride, padding } => {
                let (x, k) = (&inputs[0], &inputs[1]);
                let sk = k.shape();
                let w = conv_window("conv2d", x.shape(), (sk[2], sk[3]), *stride, *padding)?;
                let (n, f) = (x.shape()[0], sk[0]);
                let (rows, cols) = (w.col_rows(), w.col_cols());
                let img = w.channels * w.height * w.width;
                let xd = x.data();
                let kd = k.data();
                let mut gx = want(0).then(|| vec![0.0; xd.len()]);
                let mut gk = want(1).then(|| vec![0.0; kd.len()]);
                let mut col = vec![0.0; rows * cols];
                for b in 0..n {
                    let gb = &g[b * f * cols..(b + 1) * f * cols];
                    if let Some(gk) = gk.as_mut() {
                        kernels::im2col(&w, &xd[b * img..(b + 1) * img], &mut col);
                        kernels::gemm_nt(f, cols, rows, gb, &col, gk);
                    }
                    if let Some(gx) = gx.as_mut() {
                        col.iter_mut().for_each(|v| *v = 0.0);
                        kernels::gemm_tn(rows, f, cols, &kd, gb, &mut col);
                        kernels::col2im(&w, &col, &mut gx[b * img..(b + 1) * img]);
                    }
                }
                vec![gx, gk]
            }
            Op::ConvTranspose2d { stride, padding } => {
                let (x, k) = (&inputs[0], &inputs[1]);
                let w = transpose_window(x.shape(), k.shape(), *stride, *padding)?;
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let (rows, cols) = (w.col_rows(), w.col_cols());
                let out_img = w.channels * w.height * w.width;
                let xd = x.data();
                let kd = k.data();
                let mut gx = want(0).then(|| vec![0.0; xd.len()]);
                let mut gk = want(1).then(|| vec![0.0; kd.len()]);
                let mut col = vec![0.0; rows * cols];
                for b in 0..n {
                    kernels::im2col(&w, &g[b * out_img..(b + 1) * out_img], &mut col);
                    let xb = &xd[b * c * cols..(b + 1) * c * cols];
                    if let Some(gk) = gk.as_mut() {
                        kernels::gemm_nt(c, cols, rows, xb, &col, gk);
                    }
                    if let Some(gx) = gx.as_mut() {
                        kernels::gemm_nn(c, rows, cols, &kd, &col, &mut gx[b * c * cols..(b + 1) * c * cols]);
                    }
                }
                vec![gx, gk]
            }
            Op::Sum { kept } => {
                let x = &inputs[0];
                vec![Some(broadcast_offsets(kept, x.shape()).into_iter().map(|o| g[o]).collect())]
            }
            Op::Mean { kept, count } => {
                let x = &inputs[0];
                let inv = 1.0 / *count as f64;
                vec![Some(
                    broadcast_offsets(kept, x.shape())
                        .into_iter()
                        .map(|o| g[o] * inv)
                        .collect(),
                )]
            }
            Op::MaskedMean { mask, count } => {
                let scale = g[0] / (*count).max(1) as f64;
                vec![Some(mask.iter().map(|&m| if m == 1.0 { scale } else { 0.0 }).collect())]
            }
        };
        Ok(grads)
    }
}
