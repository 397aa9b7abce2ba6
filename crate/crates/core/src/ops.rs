//! Tensor operations: forward evaluation and shape rules.
//!
//! Every op is pure (inputs are never mutated) and errors out instead of
//! producing non-finite values, which keeps the tensor finiteness
//! invariant checkable at one place.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Operation kind plus its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Graph leaf; never evaluated.
    Input,
    Add,
    Sub,
    Mul,
    /// x[B,m] * w[m,n] -> [B,n]
    Matmul,
    /// inputs: x[B,C,H,W], kernel[O,C,k,k], optional bias[O]
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// inputs: x[B,C,H,W], kernel[C,O,k,k], optional bias[O]
    ConvTranspose2d {
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Relu,
    LeakyRelu {
        alpha: f64,
    },
    Tanh,
    Sigmoid,
    Concat {
        axis: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Mean over all elements -> scalar.
    ReduceMean,
    /// Sum over all elements -> scalar.
    ReduceSum,
    /// inputs: x, gamma[F], beta[F] (train) plus running mean[F], var[F] (eval).
    /// Features are columns of rank-2 input or channels of rank-4 input.
    BatchNorm {
        eps: f64,
        train: bool,
    },
    /// Softmax over the last axis.
    Softmax,
    Log,
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Multiply by a compile-time constant (loss weights, 1/batch, negation).
    Scale {
        c: f64,
    },
    /// Mean softmax cross-entropy of logits[B,K] against class indices.
    CrossEntropyMean {
        targets: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Matmul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::ReduceMean => "reduce_mean",
            Op::ReduceSum => "reduce_sum",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Softmax => "softmax",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::Scale { .. } => "scale",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
        }
    }
}

/// Per-feature batch statistics kept by a train-mode batchnorm node; the
/// backward pass and the running-average update both read them.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) struct EvalOut<S: Scalar> {
    pub value: Tensor<S>,
    pub bn_stats: Option<BnStats>,
}

/// Right-hand sides of elementwise ops may match exactly, be a suffix of the
/// left shape (leading-dimension broadcast), or be a single element.
fn bcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    if lhs == rhs {
        return true;
    }
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return true;
    }
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn elementwise<S: Scalar>(
    op: &Op,
    lhs: &Tensor<S>,
    rhs: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if !bcast_ok(lhs.shape(), rhs.shape()) {
        return Err(Error::shape(
            op.name(),
            format!("{:?} vs {:?}", lhs.shape(), rhs.shape()),
        ));
    }
    let rn = rhs.numel();
    let rd = rhs.data();
    let data = lhs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| f(a, rd[i % rn]))
        .collect();
    Tensor::new(lhs.shape().to_vec(), data)
}

pub(crate) fn conv_geom_for<S: Scalar>(
    op: &Op,
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, usize)> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 4 || ks.len() != 4 || ks[2] != ks[3] {
        return Err(Error::shape(
            op.name(),
            format!("want x[B,C,H,W], kernel[·,·,k,k]; got {:?}, {:?}", xs, ks),
        ));
    }
    match op {
        Op::Conv2d { .. } => {
            if ks[1] != xs[1] {
                return Err(Error::shape(
                    op.name(),
                    format!("kernel in-channels {} vs input channels {}", ks[1], xs[1]),
                ));
            }
            let g = ConvGeom {
                channels: xs[1],
                height: xs[2],
                width: xs[3],
                kernel: ks[2],
                stride,
                pad,
            };
            if !g.fits() {
                return Err(Error::shape(
                    op.name(),
                    format!(
                        "kernel {} exceeds padded input {}x{}",
                        ks[2],
                        xs[2] + 2 * pad,
                        xs[3] + 2 * pad
                    ),
                ));
            }
            Ok((g, ks[0]))
        }
        Op::ConvTranspose2d { .. } => {
            if ks[0] != xs[1] {
                return Err(Error::shape(
                    op.name(),
                    format!("kernel in-channels {} vs input channels {}", ks[0], xs[1]),
                ));
            }
            let k = ks[2];
            let out_h = (xs[2] - 1) * stride + k;
            let out_w = (xs[3] - 1) * stride + k;
            if out_h < 2 * pad + 1 || out_w < 2 * pad + 1 {
                return Err(Error::shape(
                    op.name(),
                    format!("padding {} too large", pad),
                ));
            }
            // Geometry of the adjoint convolution over the *output* plane.
            let g = ConvGeom {
                channels: ks[1],
                height: out_h - 2 * pad,
                width: out_w - 2 * pad,
                kernel: k,
                stride,
                pad,
            };
            Ok((g, ks[1]))
        }
        _ => unreachable!(),
    }
}

/// Forward-evaluate `op` on `inputs` without recording anything.
pub fn eval_op<S: Scalar>(op: &Op, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    eval_op_full(op, inputs).map(|o| o.value)
}

fn want_inputs(op: &Op, got: usize, want: &[usize]) -> Result<()> {
    if want.contains(&got) {
        Ok(())
    } else {
        Err(Error::shape(
            op.name(),
            format!("expects {:?} inputs, got {}", want, got),
        ))
    }
}

pub(crate) fn eval_op_full<S: Scalar>(op: &Op, inputs: &[&Tensor<S>]) -> Result<EvalOut<S>> {
    let mut bn_stats = None;
    let value = match op {
        Op::Input => {
            return Err(Error::Domain {
                op: "input",
                detail: "leaf nodes are not evaluated".into(),
            })
        }
        Op::Add => {
            want_inputs(op, inputs.len(), &[2])?;
            elementwise(op, inputs[0], inputs[1], |a, b| a + b)?
        }
        Op::Sub => {
            want_inputs(op, inputs.len(), &[2])?;
            elementwise(op, inputs[0], inputs[1], |a, b| a - b)?
        }
        Op::Mul => {
            want_inputs(op, inputs.len(), &[2])?;
            elementwise(op, inputs[0], inputs[1], |a, b| a * b)?
        }
        Op::Matmul => {
            want_inputs(op, inputs.len(), &[2])?;
            let (x, w) = (inputs[0], inputs[1]);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", xs, ws)));
            }
            let (m, k, n) = (xs[0], xs[1], ws[1]);
            let mut out = Tensor::zeros(&[m, n]);
            kernels::gemm_nn(m, k, n, x.data(), w.data(), out.data_mut());
            out
        }
        Op::Conv2d { stride, pad } => {
            want_inputs(op, inputs.len(), &[2, 3])?;
            let (x, kernel) = (inputs[0], inputs[1]);
            let (g, out_ch) = conv_geom_for(op, x, kernel, *stride, *pad)?;
            let bias = match inputs.get(2) {
                Some(b) => {
                    if b.shape() != [out_ch] {
                        return Err(Error::shape(
                            "conv2d",
                            format!("bias {:?} vs out channels {}", b.shape(), out_ch),
                        ));
                    }
                    Some(b.data())
                }
                None => None,
            };
            let batch = x.shape()[0];
            let mut out = Tensor::zeros(&[batch, out_ch, g.out_h(), g.out_w()]);
            kernels::conv2d_fwd(
                batch,
                x.data(),
                kernel.data(),
                bias,
                out_ch,
                &g,
                out.data_mut(),
            );
            out
        }
        Op::ConvTranspose2d { stride, pad } => {
            want_inputs(op, inputs.len(), &[2, 3])?;
            let (x, kernel) = (inputs[0], inputs[1]);
            let (g, out_ch) = conv_geom_for(op, x, kernel, *stride, *pad)?;
            let batch = x.shape()[0];
            let in_ch = x.shape()[1];
            let mut out = Tensor::zeros(&[batch, out_ch, g.height, g.width]);
            // Transposed conv is the adjoint of the conv with geometry `g`.
            kernels::conv2d_bwd_input(batch, x.data(), kernel.data(), in_ch, &g, out.data_mut());
            if let Some(b) = inputs.get(2) {
                if b.shape() != [out_ch] {
                    return Err(Error::shape(
                        "conv2d_transpose",
                        format!("bias {:?} vs out channels {}", b.shape(), out_ch),
                    ));
                }
                let plane = g.height * g.width;
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v += b.data()[(i / plane) % out_ch];
                }
            }
            out
        }
        Op::MaxPool2d { window, stride } => {
            want_inputs(op, inputs.len(), &[1])?;
            let x = inputs[0];
            let s = x.shape();
            if s.len() != 4 || s[2] < *window || s[3] < *window {
                return Err(Error::shape(
                    "maxpool2d",
                    format!("window {} on {:?}", window, s),
                ));
            }
            let oh = (s[2] - window) / stride + 1;
            let ow = (s[3] - window) / stride + 1;
            let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
            kernels::maxpool2d_fwd(
                s[0],
                x.data(),
                s[1],
                s[2],
                s[3],
                *window,
                *stride,
                out.data_mut(),
            );
            out
        }
        Op::Relu => {
            want_inputs(op, inputs.len(), &[1])?;
            inputs[0].map(|v| if v > S::zero() { v } else { S::zero() })
        }
        Op::LeakyRelu { alpha } => {
            want_inputs(op, inputs.len(), &[1])?;
            let a = S::of_f64(*alpha);
            inputs[0].map(|v| if v > S::zero() { v } else { a * v })
        }
        Op::Tanh => {
            want_inputs(op, inputs.len(), &[1])?;
            inputs[0].map(|v| S::of_f64(v.as_f64().tanh()))
        }
        Op::Sigmoid => {
            want_inputs(op, inputs.len(), &[1])?;
            inputs[0].map(|v| S::of_f64(1.0 / (1.0 + (-v.as_f64()).exp())))
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::shape("concat", "no inputs".to_string()));
            }
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(Error::shape(
                    "concat",
                    format!("axis {} on {:?}", axis, first),
                ));
            }
            let mut cat_dim = 0;
            for t in inputs {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} vs {:?} along axis {}", s, first, axis),
                    ));
                }
                cat_dim += s[*axis];
            }
            let mut shape = first.to_vec();
            shape[*axis] = cat_dim;
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * cat_dim * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        }
        Op::Reshape { shape } => {
            want_inputs(op, inputs.len(), &[1])?;
            inputs[0].reshaped(shape)?
        }
        Op::ReduceMean | Op::ReduceSum => {
            want_inputs(op, inputs.len(), &[1])?;
            let x = inputs[0];
            let mut acc = 0.0f64;
            for &v in x.data() {
                acc += v.as_f64();
            }
            if matches!(op, Op::ReduceMean) {
                acc /= x.numel() as f64;
            }
            Tensor::scalar(S::of_f64(acc))
        }
        Op::BatchNorm { eps, train } => {
            let x = inputs[0];
            let (group, features, inner) = bn_layout(x)?;
            if *train {
                want_inputs(op, inputs.len(), &[3])?;
            } else {
                want_inputs(op, inputs.len(), &[5])?;
            }
            let (gamma, beta) = (inputs[1], inputs[2]);
            if gamma.shape() != [features] || beta.shape() != [features] {
                return Err(Error::shape(
                    "batchnorm",
                    format!(
                        "gamma {:?} beta {:?} vs {} features",
                        gamma.shape(),
                        beta.shape(),
                        features
                    ),
                ));
            }
            let (mean, var) = if *train {
                let (m, v) = kernels::bn_stats(x.data(), features, group, inner);
                bn_stats = Some(BnStats {
                    mean: m.clone(),
                    var: v.clone(),
                });
                (m, v)
            } else {
                let rm = inputs[3];
                let rv = inputs[4];
                if rm.shape() != [features] || rv.shape() != [features] {
                    return Err(Error::shape(
                        "batchnorm",
                        format!(
                            "running stats {:?}/{:?} vs {} features",
                            rm.shape(),
                            rv.shape(),
                            features
                        ),
                    ));
                }
                (
                    rm.data().iter().map(|v| v.as_f64()).collect(),
                    rv.data().iter().map(|v| v.as_f64()).collect(),
                )
            };
            let mut out = Tensor::zeros(x.shape());
            kernels::bn_apply(
                x.data(),
                features,
                group,
                inner,
                &mean,
                &var,
                gamma.data(),
                beta.data(),
                *eps,
                out.data_mut(),
            );
            out
        }
        Op::Softmax => {
            want_inputs(op, inputs.len(), &[1])?;
            let x = inputs[0];
            let cols = *x.shape().last().unwrap();
            let mut out = Tensor::zeros(x.shape());
            for (row, orow) in x.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let mut z = 0.0f64;
                let exps: Vec<f64> = row
                    .iter()
                    .map(|v| {
                        let e = (v.as_f64() - max).exp();
                        z += e;
                        e
                    })
                    .collect();
                for (o, e) in orow.iter_mut().zip(exps) {
                    *o = S::of_f64(e / z);
                }
            }
            out
        }
        Op::Log => {
            want_inputs(op, inputs.len(), &[1])?;
            let x = inputs[0];
            if x.data().iter().any(|v| *v <= S::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: "input must be strictly positive".into(),
                });
            }
            x.map(|v| v.ln())
        }
        Op::Clamp { lo, hi } => {
            want_inputs(op, inputs.len(), &[1])?;
            let (lo, hi) = (S::of_f64(*lo), S::of_f64(*hi));
            inputs[0].map(|v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            })
        }
        Op::Scale { c } => {
            want_inputs(op, inputs.len(), &[1])?;
            let c = S::of_f64(*c);
            inputs[0].map(|v| v * c)
        }
        Op::CrossEntropyMean { targets } => {
            want_inputs(op, inputs.len(), &[1])?;
            let logits = inputs[0];
            let s = logits.shape();
            if s.len() != 2 || s[0] != targets.len() {
                return Err(Error::shape(
                    "cross_entropy_mean",
                    format!("logits {:?} vs {} targets", s, targets.len()),
                ));
            }
            let k = s[1];
            if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
                return Err(Error::Domain {
                    op: "cross_entropy_mean",
                    detail: format!("target {} out of range for {} classes", bad, k),
                });
            }
            let mut acc = 0.0f64;
            for (row, &t) in logits.data().chunks(k).zip(targets) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let lse: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                acc += max + lse.ln() - row[t].as_f64();
            }
            Tensor::scalar(S::of_f64(acc / targets.len() as f64))
        }
    };
    if !value.is_finite() {
        return Err(Error::Domain {
            op: op.name(),
            detail: "non-finite output".into(),
        });
    }
    Ok(EvalOut { value, bn_stats })
}

/// (group, features, inner) view of a batchnorm input: rank-2 tensors
/// normalize per column, rank-4 per channel.
pub(crate) fn bn_layout<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [b, f] => Ok((*b, *f, 1)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        s => Err(Error::shape(
            "batchnorm",
            format!("rank {} input {:?}", s.len(), s),
        )),
    }
}

pub(crate) fn bcast_reduce_grad<S: Scalar>(grad: &Tensor<S>, rhs_shape: &[usize]) -> Tensor<S> {
    if grad.shape() == rhs_shape {
        return grad.clone();
    }
    let rn: usize = rhs_shape.iter().product();
    let mut acc = vec![0.0f64; rn];
    for (i, &g) in grad.data().iter().enumerate() {
        acc[i % rn] += g.as_f64();
    }
    Tensor::new(rhs_shape.to_vec(), acc.into_iter().map(S::of_f64).collect()).unwrap()
}
