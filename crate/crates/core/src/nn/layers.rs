//! Forward and backward kernels for the supported layer kinds.
//!
//! Conventions: activations are `[N, C, H, W]` (or `[N, F]` for
//! fully-connected layers). Loss gradients handed to a backward kernel are
//! gradients of the batch-mean loss, so parameter gradients are plain sums
//! over the batch. All loops run in a fixed order, so results are
//! bit-reproducible.

use crate::error::{dim, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn resolve(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weights.len() != 4 {
            return Err(dim(format!(
                "conv expects rank-4 input and weights, got {input:?} and {weights:?}"
            )));
        }
        if input[1] != weights[1] {
            return Err(dim(format!(
                "input has {} channels, weights expect {}",
                input[1], weights[1]
            )));
        }
        if stride == 0 {
            return Err(dim("stride must be at least 1"));
        }
        if input[2] + 2 * pad < weights[2] || input[3] + 2 * pad < weights[3] {
            return Err(dim("kernel larger than padded input"));
        }
        Ok(ConvShape {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weights[0],
            kernel_h: weights[2],
            kernel_w: weights[3],
            stride,
            pad,
        })
    }

    fn output_dims(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h(), self.out_w()]
    }
}

/// Maps an output position and kernel offset to the input coordinate, or
/// `None` inside the zero padding.
#[inline]
fn input_coord(out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (out * stride + k).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

/// Cross-correlation. Loop nest: batch, out-channel, output row, output
/// column, in-channel, kernel row, kernel column; bias added last.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let s = ConvShape::resolve(input.dims(), weights.dims(), stride, pad)?;
    if bias.len() != s.out_channels {
        return Err(dim(format!("bias has {} entries for {} channels", bias.len(), s.out_channels)));
    }
    let (oh, ow) = (s.out_h(), s.out_w());
    let x = input.data();
    let w = weights.data();
    let b = bias.data();
    let mut out = vec![0.0; s.batch * s.out_channels * oh * ow];
    let mut idx = 0;
    for n in 0..s.batch {
        for o in 0..s.out_channels {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..s.in_channels {
                        let xbase = (n * s.in_channels + c) * s.height;
                        let wbase = (o * s.in_channels + c) * s.kernel_h;
                        for kh in 0..s.kernel_h {
                            let Some(ih) = input_coord(r, kh, stride, pad, s.height) else { continue };
                            let xrow = (xbase + ih) * s.width;
                            let wrow = (wbase + kh) * s.kernel_w;
                            for kw in 0..s.kernel_w {
                                if let Some(iw) = input_coord(q, kw, stride, pad, s.width) {
                                    acc += x[xrow + iw] * w[wrow + kw];
                                }
                            }
                        }
                    }
                    out[idx] = acc + b[o];
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(s.output_dims(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

fn check_grad_dims(s: &ConvShape, loss_grad: &Tensor) -> Result<()> {
    if loss_grad.dims() != s.output_dims().as_slice() {
        return Err(dim(format!(
            "loss gradient dims {:?} do not match conv output {:?}",
            loss_grad.dims(),
            s.output_dims()
        )));
    }
    Ok(())
}

/// Weight gradient `G[o,c,kh,kw] = sum_n sum_pos A[n,c,pos'] * L[n,o,pos]`.
/// Same loop nest as the forward pass.
pub fn conv2d_weight_grad(stored: &Tensor, loss_grad: &Tensor, weight_dims: &[usize], stride: usize, pad: usize) -> Result<Tensor> {
    let s = ConvShape::resolve(stored.dims(), weight_dims, stride, pad)?;
    check_grad_dims(&s, loss_grad)?;
    let (oh, ow) = (s.out_h(), s.out_w());
    let x = stored.data();
    let l = loss_grad.data();
    let mut gw = vec![0.0; weight_dims.iter().product()];
    let mut idx = 0;
    for n in 0..s.batch {
        for o in 0..s.out_channels {
            for r in 0..oh {
                for q in 0..ow {
                    let g = l[idx];
                    idx += 1;
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..s.in_channels {
                        let xbase = (n * s.in_channels + c) * s.height;
                        let wbase = (o * s.in_channels + c) * s.kernel_h;
                        for kh in 0..s.kernel_h {
                            let Some(ih) = input_coord(r, kh, stride, pad, s.height) else { continue };
                            let xrow = (xbase + ih) * s.width;
                            let wrow = (wbase + kh) * s.kernel_w;
                            for kw in 0..s.kernel_w {
                                if let Some(iw) = input_coord(q, kw, stride, pad, s.width) {
                                    gw[wrow + kw] += x[xrow + iw] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(weight_dims.to_vec(), gw)
}

/// Input gradient; reads only the loss gradient and the weights.
pub fn conv2d_input_grad(input_dims: &[usize], loss_grad: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let s = ConvShape::resolve(input_dims, weights.dims(), stride, pad)?;
    check_grad_dims(&s, loss_grad)?;
    let (oh, ow) = (s.out_h(), s.out_w());
    let w = weights.data();
    let l = loss_grad.data();
    let mut gx = vec![0.0; input_dims.iter().product()];
    let mut idx = 0;
    for n in 0..s.batch {
        for o in 0..s.out_channels {
            for r in 0..oh {
                for q in 0..ow {
                    let g = l[idx];
                    idx += 1;
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..s.in_channels {
                        let xbase = (n * s.in_channels + c) * s.height;
                        let wbase = (o * s.in_channels + c) * s.kernel_h;
                        for kh in 0..s.kernel_h {
                            let Some(ih) = input_coord(r, kh, stride, pad, s.height) else { continue };
                            let xrow = (xbase + ih) * s.width;
                            let wrow = (wbase + kh) * s.kernel_w;
                            for kw in 0..s.kernel_w {
                                if let Some(iw) = input_coord(q, kw, stride, pad, s.width) {
                                    gx[xrow + iw] += w[wrow + kw] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_dims.to_vec(), gx)
}

pub fn conv2d_backward(stored: &Tensor, loss_grad: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Result<ConvGrads> {
    let weight = conv2d_weight_grad(stored, loss_grad, weights.dims(), stride, pad)?;
    let input = conv2d_input_grad(stored.dims(), loss_grad, weights, stride, pad)?;
    let oc = weights.dims()[0];
    let per = loss_grad.len() / (loss_grad.dims()[0] * oc);
    let mut bias = vec![0.0; oc];
    for (i, chunk) in loss_grad.data().chunks(per).enumerate() {
        bias[i % oc] += chunk.iter().sum::<f64>();
    }
    Ok(ConvGrads {
        weight,
        bias: Tensor::new(vec![oc], bias)?,
        input,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Masks `grad` by the sign of the layer input (or, equivalently, output).
pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if input.dims() != grad.dims() {
        return Err(dim("relu gradient shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad.dims().to_vec(), data)
}

pub fn pool_output_extent(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 || window > extent {
        return Err(dim(format!(
            "pool window {window} stride {stride} invalid for extent {extent}"
        )));
    }
    Ok((extent - window) / stride + 1)
}

/// Max pooling without padding. `argmax[j]` is the flat input index chosen
/// for output `j`; ties keep the first position in row-major order.
pub fn maxpool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let d = x.dims();
    if d.len() != 4 {
        return Err(dim("maxpool expects [N, C, H, W]"));
    }
    let (h, w) = (d[2], d[3]);
    let oh = pool_output_extent(h, window, stride)?;
    let ow = pool_output_extent(w, window, stride)?;
    let planes = d[0] * d[1];
    let data = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for r in 0..oh {
            for q in 0..ow {
                let mut best = base + r * stride * w + q * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (r * stride + i) * w + q * stride + j;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![d[0], d[1], oh, ow], out)?, argmax))
}

pub fn maxpool_backward(grad: &Tensor, argmax: &[usize], input_dims: &[usize]) -> Result<Tensor> {
    if grad.len() != argmax.len() {
        return Err(dim("maxpool gradient does not match argmax indices"));
    }
    let mut gx = Tensor::zeros(input_dims.to_vec())?;
    let out = gx.data_mut();
    for (&g, &i) in grad.data().iter().zip(argmax) {
        *out.get_mut(i).ok_or_else(|| dim("argmax index out of range"))? += g;
    }
    Ok(gx)
}

fn fc_dims(x: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize)> {
    if weights.rank() != 2 {
        return Err(dim("fc weights must be [out, in]"));
    }
    let (out, inp) = (weights.dims()[0], weights.dims()[1]);
    let n = x.dims()[0];
    if x.sample_len() != inp {
        return Err(dim(format!(
            "fc expects {inp} features per sample, got {}",
            x.sample_len()
        )));
    }
    Ok((n, inp, out))
}

/// `y = x W^T + b`; the input is flattened per sample.
pub fn fc_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, inp, out) = fc_dims(x, weights)?;
    if bias.len() != out {
        return Err(dim("fc bias length mismatch"));
    }
    let (xd, wd, bd) = (x.data(), weights.data(), bias.data());
    let mut y = Vec::with_capacity(n * out);
    for s in 0..n {
        let row = &xd[s * inp..(s + 1) * inp];
        for o in 0..out {
            let wrow = &wd[o * inp..(o + 1) * inp];
            let acc: f64 = row.iter().zip(wrow).fold(0.0, |a, (x, w)| a + x * w);
            y.push(acc + bd[o]);
        }
    }
    Tensor::new(vec![n, out], y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

pub fn fc_backward(x: &Tensor, grad: &Tensor, weights: &Tensor) -> Result<FcGrads> {
    let (n, inp, out) = fc_dims(x, weights)?;
    if grad.dims() != [n, out] {
        return Err(dim("fc gradient shape mismatch"));
    }
    let (xd, wd, gd) = (x.data(), weights.data(), grad.data());
    let mut gw = vec![0.0; out * inp];
    let mut gb = vec![0.0; out];
    let mut gx = vec![0.0; n * inp];
    for s in 0..n {
        let row = &xd[s * inp..(s + 1) * inp];
        for o in 0..out {
            let g = gd[s * out + o];
            gb[o] += g;
            if g == 0.0 {
                continue;
            }
            for i in 0..inp {
                gw[o * inp + i] += g * row[i];
                gx[s * inp + i] += g * wd[o * inp + i];
            }
        }
    }
    Ok(FcGrads {
        weight: Tensor::new(vec![out, inp], gw)?,
        bias: Tensor::new(vec![out], gb)?,
        input: Tensor::new(x.dims().to_vec(), gx)?,
    })
}

/// Mean cross-entropy over the batch and its gradient
/// `(softmax(logits) - onehot(labels)) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(dim("logits must be [N, K]"));
    }
    let (n, k) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != n {
        return Err(dim(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for s in 0..n {
        let row = &logits.data()[s * k..(s + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        loss += log_z - row[labels[s]];
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            let y = if c == labels[s] { 1.0 } else { 0.0 };
            grad[s * k + c] = (p - y) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{make_tensor, FillSpec};

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn rand(dims: &[usize], seed: u64) -> Tensor {
        make_tensor(dims, FillSpec::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn scalar_conv() {
        let y = conv2d_forward(&t(&[1, 1, 1, 1], &[3.0]), &t(&[1, 1, 1, 1], &[2.0]), &t(&[1], &[0.5]), 1, 0).unwrap();
        assert_eq!(y.data(), &[6.5]);
    }

    #[test]
    fn identity_kernel() {
        let x = rand(&[2, 1, 4, 5], 3);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d_forward(&x, &t(&[1, 1, 3, 3], &k), &t(&[1], &[0.0]), 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let r = conv2d_forward(&rand(&[1, 2, 4, 4], 1), &rand(&[1, 3, 2, 2], 2), &t(&[1], &[0.0]), 1, 0);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_loss_grad_gives_zero_grads() {
        let x = rand(&[2, 3, 5, 5], 4);
        let w = rand(&[2, 3, 3, 3], 5);
        let g = Tensor::zeros(vec![2, 2, 3, 3]).unwrap();
        let grads = conv2d_backward(&x, &g, &w, 1, 0).unwrap();
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_conv_weight_grad() {
        // weight_grad[o, c] = sum over batch and pixels of x[n,c] * l[n,o].
        let x = rand(&[3, 2, 2, 2], 6);
        let l = rand(&[3, 2, 2, 2], 7);
        let w = rand(&[2, 2, 1, 1], 8);
        let grads = conv2d_backward(&x, &l, &w, 1, 0).unwrap();
        for o in 0..2 {
            for c in 0..2 {
                let mut expect = 0.0;
                for n in 0..3 {
                    for p in 0..4 {
                        expect += x.data()[(n * 2 + c) * 4 + p] * l.data()[(n * 2 + o) * 4 + p];
                    }
                }
                assert!((grads.weight.data()[o * 2 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_padded_shapes() {
        let x = rand(&[1, 1, 7, 6], 9);
        let w = rand(&[1, 1, 3, 2], 10);
        let y = conv2d_forward(&x, &w, &t(&[1], &[0.0]), 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
    }

    #[test]
    fn relu_and_pool_definitions() {
        assert_eq!(relu_forward(&t(&[2], &[-1.0, 2.0])).data(), &[0.0, 2.0]);
        let (y, arg) = maxpool_forward(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let g = maxpool_backward(&t(&[1, 1, 1, 1], &[1.5]), &arg, &[1, 1, 2, 2]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = Tensor::zeros(vec![3, 10]).unwrap();
        let (loss, grad) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        for row in grad.data().chunks(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(vec![1, 3]).unwrap();
        assert!(matches!(softmax_xent(&logits, &[3]), Err(Error::Data(_))));
    }
}
