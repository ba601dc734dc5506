//! Forward and backward kernels.
//!
//! Backward kernels take the per-sample loss gradient `∂ℓ_b/∂output_b` and
//! return per-sample input gradients; parameter gradients are averaged over
//! the batch. Chained together this yields the gradient of the batch-mean loss.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Shape(format!("invalid conv spec {self:?}")));
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
        let &[n, c, h, w] = shape else {
            return Err(Error::Shape(format!(
                "conv input must be NCHW, got {shape:?}"
            )));
        };
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((n, h, w, oh, ow))
    }

    /// Input coordinate read by output position `o` at kernel offset `k`, if
    /// it falls inside the (unpadded) input.
    #[inline]
    pub fn input_coord(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }
}

fn check_weights<T: Scalar>(spec: &ConvSpec, weights: &Tensor<T>) -> Result<()> {
    if weights.shape() != spec.weight_shape().as_slice() {
        return Err(Error::Shape(format!(
            "conv weights {:?} do not match spec {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    Ok(())
}

/// Cross-correlation of `input [N,C,H,W]` with `weights [K,C,kh,kw]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, h, w, oh, ow) = spec.check_input(input.shape())?;
    check_weights(spec, weights)?;
    let (c_in, k_out, kh, kw) = (
        spec.in_channels,
        spec.out_channels,
        spec.kernel_h,
        spec.kernel_w,
    );
    let x = input.data();
    let wt = weights.data();
    let per_sample = par::map_range(n, |b| {
        let xs = &x[b * c_in * h * w..(b + 1) * c_in * h * w];
        let mut out = vec![T::zero(); k_out * oh * ow];
        for k in 0..k_out {
            let o = &mut out[k * oh * ow..(k + 1) * oh * ow];
            for c in 0..c_in {
                let plane = &xs[c * h * w..(c + 1) * h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = wt[((k * c_in + c) * kh + i) * kw + j];
                        for y in 0..oh {
                            let Some(ih) = spec.input_coord(y, i, h) else {
                                continue;
                            };
                            let row = &plane[ih * w..(ih + 1) * w];
                            let orow = &mut o[y * ow..(y + 1) * ow];
                            for (xo, ov) in orow.iter_mut().enumerate() {
                                if let Some(iw) = spec.input_coord(xo, j, w) {
                                    *ov = *ov + wv * row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    });
    Tensor::new(vec![n, k_out, oh, ow], per_sample.concat())
}

fn check_loss<T: Scalar>(
    spec: &ConvSpec,
    input_shape: &[usize],
    loss: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let dims = spec.check_input(input_shape)?;
    let (n, _, _, oh, ow) = dims;
    if loss.shape() != [n, spec.out_channels, oh, ow] {
        return Err(Error::Shape(format!(
            "conv loss {:?} does not match output [{n}, {}, {oh}, {ow}]",
            loss.shape(),
            spec.out_channels
        )));
    }
    Ok(dims)
}

/// `grad[k,c,i,j] = (1/N) Σ_b Σ_(y,x) A[b,c,y*s+i-p,x*s+j-p] · L[b,k,y,x]`.
pub fn conv2d_backward_weights<T: Scalar>(
    input: &Tensor<T>,
    loss: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, h, w, oh, ow) = check_loss(spec, input.shape(), loss)?;
    let (c_in, k_out, kh, kw) = (
        spec.in_channels,
        spec.out_channels,
        spec.kernel_h,
        spec.kernel_w,
    );
    let x = input.data();
    let l = loss.data();
    let per_sample = par::map_range(n, |b| {
        let xs = &x[b * c_in * h * w..(b + 1) * c_in * h * w];
        let ls = &l[b * k_out * oh * ow..(b + 1) * k_out * oh * ow];
        let mut g = vec![T::zero(); k_out * c_in * kh * kw];
        for k in 0..k_out {
            let lk = &ls[k * oh * ow..(k + 1) * oh * ow];
            for c in 0..c_in {
                let plane = &xs[c * h * w..(c + 1) * h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let mut acc = T::zero();
                        for y in 0..oh {
                            let Some(ih) = spec.input_coord(y, i, h) else {
                                continue;
                            };
                            let row = &plane[ih * w..(ih + 1) * w];
                            let lrow = &lk[y * ow..(y + 1) * ow];
                            for (xo, &lv) in lrow.iter().enumerate() {
                                if let Some(iw) = spec.input_coord(xo, j, w) {
                                    acc = acc + row[iw] * lv;
                                }
                            }
                        }
                        g[((k * c_in + c) * kh + i) * kw + j] = acc;
                    }
                }
            }
        }
        g
    });
    Tensor::new(spec.weight_shape(), mean_over_batch(per_sample, n))
}

/// Gradient with respect to the input. Depends only on the weights and the loss.
pub fn conv2d_backward_input<T: Scalar>(
    weights: &Tensor<T>,
    loss: &Tensor<T>,
    spec: &ConvSpec,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (n, h, w, oh, ow) = check_loss(spec, input_shape, loss)?;
    check_weights(spec, weights)?;
    let (c_in, k_out, kh, kw) = (
        spec.in_channels,
        spec.out_channels,
        spec.kernel_h,
        spec.kernel_w,
    );
    let wt = weights.data();
    let l = loss.data();
    let per_sample = par::map_range(n, |b| {
        let ls = &l[b * k_out * oh * ow..(b + 1) * k_out * oh * ow];
        let mut gx = vec![T::zero(); c_in * h * w];
        for k in 0..k_out {
            let lk = &ls[k * oh * ow..(k + 1) * oh * ow];
            for c in 0..c_in {
                let plane = &mut gx[c * h * w..(c + 1) * h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let wv = wt[((k * c_in + c) * kh + i) * kw + j];
                        for y in 0..oh {
                            let Some(ih) = spec.input_coord(y, i, h) else {
                                continue;
                            };
                            let lrow = &lk[y * ow..(y + 1) * ow];
                            for (xo, &lv) in lrow.iter().enumerate() {
                                if let Some(iw) = spec.input_coord(xo, j, w) {
                                    plane[ih * w + iw] = plane[ih * w + iw] + wv * lv;
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    });
    Tensor::new(input_shape.to_vec(), per_sample.concat())
}

pub struct ConvGrads<T: Scalar> {
    pub weights: Tensor<T>,
    pub input: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    loss: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    Ok(ConvGrads {
        weights: conv2d_backward_weights(input, loss, spec)?,
        input: conv2d_backward_input(weights, loss, spec, input.shape())?,
    })
}

/// Sums per-sample buffers in batch order, then divides by `n`.
fn mean_over_batch<T: Scalar>(per_sample: Vec<Vec<T>>, n: usize) -> Vec<T> {
    let mut iter = per_sample.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for g in iter {
        for (a, v) in acc.iter_mut().zip(g) {
            *a = *a + v;
        }
    }
    let inv = T::cast_from(1.0 / n as f64);
    acc.iter_mut().for_each(|a| *a = *a * inv);
    acc
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gates `grad` by `input > 0`. The ReLU output works equally well as `input`.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Re-applies `max(0, ·)` to a stored post-ReLU activation, restoring exact
/// zeros that decompression may have perturbed.
pub fn recompute_relu<T: Scalar>(activation: &Tensor<T>) -> Result<Tensor<T>> {
    relu_forward(activation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 || h < self.window || w < self.window {
            return Err(Error::Shape(format!("pool {self:?} does not fit {h}x{w}")));
        }
        Ok((
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ))
    }
}

/// Max pooling. Returns the output and, per output element, the flat input
/// index of the first maximum in scan order.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    spec: &PoolSpec,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!(
            "pool input must be NCHW, got {:?}",
            x.shape()
        )));
    };
    let (oh, ow) = spec.output_hw(h, w)?;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + y * spec.stride * w + xo * spec.stride;
                for i in 0..spec.window {
                    for j in 0..spec.window {
                        let idx = base + (y * spec.stride + i) * w + xo * spec.stride + j;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool_backward<T: Scalar>(
    grad: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad.len() != argmax.len() {
        return Err(Error::Shape("pool gradient does not match argmax".into()));
    }
    let mut gx = Tensor::zeros(input_shape.to_vec())?.into_data();
    for (&g, &i) in grad.data().iter().zip(argmax) {
        let slot = gx
            .get_mut(i)
            .ok_or_else(|| Error::Shape(format!("argmax {i} outside input")))?;
        *slot = *slot + g;
    }
    Tensor::new(input_shape.to_vec(), gx)
}

fn flat_dims<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    let n = x.shape()[0];
    (n, x.len() / n)
}

/// `y = x Wᵀ + b` with `x` flattened to `[N, D]`, `W [O, D]`, `b [O]`.
pub fn fc_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d) = flat_dims(x);
    let &[o, wd] = weights.shape() else {
        return Err(Error::Shape(format!(
            "fc weights must be [O, D], got {:?}",
            weights.shape()
        )));
    };
    if wd != d || bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "fc expects input dim {wd} and bias [{o}], got dim {d} and bias {:?}",
            bias.shape()
        )));
    }
    let (xd, wdata, bdata) = (x.data(), weights.data(), bias.data());
    let mut out = Vec::with_capacity(n * o);
    for b in 0..n {
        let row = &xd[b * d..(b + 1) * d];
        for k in 0..o {
            let wr = &wdata[k * d..(k + 1) * d];
            let dot = row
                .iter()
                .zip(wr)
                .fold(bdata[k], |acc, (&a, &wv)| acc + a * wv);
            out.push(dot);
        }
    }
    Tensor::new(vec![n, o], out)
}

pub struct FcGrads<T: Scalar> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Tensor<T>,
}

pub fn fc_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let (n, d) = flat_dims(x);
    let o = weights.shape()[0];
    if grad.shape() != [n, o] || weights.shape() != [o, d] {
        return Err(Error::Shape(format!(
            "fc backward: input {:?}, weights {:?}, grad {:?}",
            x.shape(),
            weights.shape(),
            grad.shape()
        )));
    }
    let (xd, wd, gd) = (x.data(), weights.data(), grad.data());
    let mut gw = vec![T::zero(); o * d];
    let mut gb = vec![T::zero(); o];
    let mut gx = vec![T::zero(); n * d];
    for b in 0..n {
        let row = &xd[b * d..(b + 1) * d];
        let gxr = &mut gx[b * d..(b + 1) * d];
        for k in 0..o {
            let g = gd[b * o + k];
            gb[k] = gb[k] + g;
            let gwr = &mut gw[k * d..(k + 1) * d];
            let wr = &wd[k * d..(k + 1) * d];
            for i in 0..d {
                gwr[i] = gwr[i] + g * row[i];
                gxr[i] = gxr[i] + g * wr[i];
            }
        }
    }
    let inv = T::cast_from(1.0 / n as f64);
    gw.iter_mut().for_each(|v| *v = *v * inv);
    gb.iter_mut().for_each(|v| *v = *v * inv);
    Ok(FcGrads {
        weights: Tensor::new(vec![o, d], gw)?,
        bias: Tensor::new(vec![o], gb)?,
        input: Tensor::new(x.shape().to_vec(), gx)?,
    })
}

/// Mean softmax cross-entropy over the batch and the per-sample gradient
/// `softmax(z_b) - onehot(y_b)`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let &[n, k] = logits.shape() else {
        return Err(Error::Shape(format!(
            "logits must be [N, K], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    let z = logits.data();
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(n * k);
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Domain(format!("label {y} outside {k} classes")));
        }
        let row = &z[b * k..(b + 1) * k];
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - row[y].as_f64();
        for (i, v) in row.iter().enumerate() {
            let p = (v.as_f64() - log_sum).exp();
            grad.push(T::cast_from(if i == y { p - 1.0 } else { p }));
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok((loss, Tensor::new(vec![n, k], grad)?))
}
