//! Reverse-mode automatic differentiation over a linear op tape.
//!
//! Forward calls append nodes in topological order; `backward` walks the
//! tape in reverse, pushing vector-Jacobian products to the inputs of
//! every node a gradient reached. Nodes whose ancestors contain no
//! differentiable leaf are skipped entirely, so e.g. a frozen encoder
//! never pays for weight gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::ops::{bcast_reduce_grad, bn_layout, conv_geom_for, eval_op_full, BnStats, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<S: Scalar> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
    needs_grad: bool,
    bn_stats: Option<BnStats>,
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<S>) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that gradients are computed for (parameters, probed inputs).
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Node {
            op: Op::Input,
            inputs: vec![],
            value,
            needs_grad: true,
            bn_stats: None,
        })
    }

    /// Leaf treated as a constant; no gradient flows to it and subgraphs
    /// that depend only on constants are skipped in backward.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Node {
            op: Op::Input,
            inputs: vec![],
            value,
            needs_grad: false,
            bn_stats: None,
        })
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Batch statistics recorded by a train-mode batchnorm node.
    pub fn bn_stats(&self, id: NodeId) -> Option<&BnStats> {
        self.nodes[id.0].bn_stats.as_ref()
    }

    fn check_ids(&self, inputs: &[NodeId]) -> Result<()> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::DanglingNode {
                    id: id.0,
                    len: self.nodes.len(),
                });
            }
        }
        Ok(())
    }

    /// Evaluate `op` on existing nodes and record the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_ids(inputs)?;
        let tensors: Vec<&Tensor<S>> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let out = eval_op_full(&op, &tensors)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        Ok(self.push(Node {
            op,
            inputs: inputs.to_vec(),
            value: out.value,
            needs_grad,
            bn_stats: out.bn_stats,
        }))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per reached
    /// differentiable node, each shaped like the node's value.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::DanglingNode {
                id: loss.0,
                len: self.nodes.len(),
            });
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
        let add_to = |k: usize, contrib: Tensor<S>, grads: &mut [Option<Tensor<S>>]| {
            let slot = &mut grads[node.inputs[k].0];
            match slot {
                Some(existing) => {
                    for (e, &c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Input => {}
            Op::Add => {
                if wants(0) {
                    add_to(0, g.clone(), grads);
                }
                if wants(1) {
                    add_to(1, bcast_reduce_grad(g, input(1).shape()), grads);
                }
            }
            Op::Sub => {
                if wants(0) {
                    add_to(0, g.clone(), grads);
                }
                if wants(1) {
                    add_to(1, bcast_reduce_grad(g, input(1).shape()).map(|v| -v), grads);
                }
            }
            Op::Mul => {
                let (l, r) = (input(0), input(1));
                if wants(0) {
                    let rn = r.numel();
                    let rd = r.data();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * rd[j % rn])
                        .collect();
                    add_to(0, Tensor::new(l.shape().to_vec(), data)?, grads);
                }
                if wants(1) {
                    let ld = l.data();
                    let prod: Vec<S> = g.data().iter().zip(ld).map(|(&gv, &lv)| gv * lv).collect();
                    let prod = Tensor::new(l.shape().to_vec(), prod)?;
                    add_to(1, bcast_reduce_grad(&prod, r.shape()), grads);
                }
            }
            Op::Matmul => {
                let (x, w) = (input(0), input(1));
                let (b, m, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if wants(0) {
                    let mut dx = Tensor::zeros(x.shape());
                    kernels::gemm_nt(b, n, m, g.data(), w.data(), dx.data_mut());
                    add_to(0, dx, grads);
                }
                if wants(1) {
                    let mut dw = Tensor::zeros(w.shape());
                    kernels::gemm_tn(b, m, n, x.data(), g.data(), dw.data_mut());
                    add_to(1, dw, grads);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (x, kernel) = (input(0), input(1));
                let (geom, out_ch) = conv_geom_for(&node.op, x, kernel, *stride, *pad)?;
                let batch = x.shape()[0];
                if wants(0) {
                    let mut dx = Tensor::zeros(x.shape());
                    kernels::conv2d_bwd_input(
                        batch,
                        g.data(),
                        kernel.data(),
                        out_ch,
                        &geom,
                        dx.data_mut(),
                    );
                    add_to(0, dx, grads);
                }
                if wants(1) {
                    let mut dk = Tensor::zeros(kernel.shape());
                    kernels::conv2d_bwd_kernel(
                        batch,
                        g.data(),
                        x.data(),
                        out_ch,
                        &geom,
                        dk.data_mut(),
                    );
                    add_to(1, dk, grads);
                }
                if node.inputs.len() > 2 && wants(2) {
                    let mut db = Tensor::zeros(&[out_ch]);
                    kernels::conv2d_bwd_bias(
                        batch,
                        g.data(),
                        out_ch,
                        geom.positions(),
                        db.data_mut(),
                    );
                    add_to(2, db, grads);
                }
            }
            Op::ConvTranspose2d { stride, pad } => {
                let (x, kernel) = (input(0), input(1));
                let (geom, out_ch) = conv_geom_for(&node.op, x, kernel, *stride, *pad)?;
                let batch = x.shape()[0];
                let in_ch = x.shape()[1];
                if wants(0) {
                    // Adjoint of the adjoint: a plain convolution of g.
                    let mut dx = Tensor::zeros(x.shape());
                    kernels::conv2d_fwd(
                        batch,
                        g.data(),
                        kernel.data(),
                        None,
                        in_ch,
                        &geom,
                        dx.data_mut(),
                    );
                    add_to(0, dx, grads);
                }
                if wants(1) {
                    let mut dk = Tensor::zeros(kernel.shape());
                    kernels::conv2d_bwd_kernel(
                        batch,
                        x.data(),
                        g.data(),
                        in_ch,
                        &geom,
                        dk.data_mut(),
                    );
                    add_to(1, dk, grads);
                }
                if node.inputs.len() > 2 && wants(2) {
                    let mut db = Tensor::zeros(&[out_ch]);
                    kernels::conv2d_bwd_bias(
                        batch,
                        g.data(),
                        out_ch,
                        geom.height * geom.width,
                        db.data_mut(),
                    );
                    add_to(2, db, grads);
                }
            }
            Op::MaxPool2d { window, stride } => {
                if wants(0) {
                    let x = input(0);
                    let s = x.shape();
                    let mut dx = Tensor::zeros(s);
                    kernels::maxpool2d_bwd(
                        s[0],
                        x.data(),
                        g.data(),
                        s[1],
                        s[2],
                        s[3],
                        *window,
                        *stride,
                        dx.data_mut(),
                    );
                    add_to(0, dx, grads);
                }
            }
            Op::Relu => {
                if wants(0) {
                    let x = input(0);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect();
                    add_to(0, Tensor::new(x.shape().to_vec(), data)?, grads);
                }
            }
            Op::LeakyRelu { alpha } => {
                if wants(0) {
                    let x = input(0);
                    let a = S::of_f64(*alpha);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { a * gv })
                        .collect();
                    add_to(0, Tensor::new(x.shape().to_vec(), data)?, grads);
                }
            }
            Op::Tanh => {
                if wants(0) {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                        .collect();
                    add_to(0, Tensor::new(y.shape().to_vec(), data)?, grads);
                }
            }
            Op::Sigmoid => {
                if wants(0) {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                        .collect();
                    add_to(0, Tensor::new(y.shape().to_vec(), data)?, grads);
                }
            }
            Op::Concat { axis } => {
                let first = input(0).shape().to_vec();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let total_chunk: usize = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let shape = input(k).shape().to_vec();
                    let chunk = shape[*axis] * inner;
                    if wants(k) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total_chunk + offset;
                            data.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        add_to(k, Tensor::new(shape, data)?, grads);
                    }
                    offset += chunk;
                }
            }
            Op::Reshape { .. } => {
                if wants(0) {
                    add_to(0, g.reshaped(input(0).shape())?, grads);
                }
            }
            Op::ReduceMean => {
                if wants(0) {
                    let x = input(0);
                    let v = g.item() / S::of_f64(x.numel() as f64);
                    add_to(0, Tensor::full(x.shape(), v), grads);
                }
            }
            Op::ReduceSum => {
                if wants(0) {
                    add_to(0, Tensor::full(input(0).shape(), g.item()), grads);
                }
            }
            Op::BatchNorm { eps, train } => {
                let x = input(0);
                let gamma = input(1);
                let (group, features, inner) = bn_layout(x)?;
                let (mean, var): (Vec<f64>, Vec<f64>) = if *train {
                    let st = node.bn_stats.as_ref().expect("train bn keeps stats");
                    (st.mean.clone(), st.var.clone())
                } else {
                    (
                        input(3).data().iter().map(|v| v.as_f64()).collect(),
                        input(4).data().iter().map(|v| v.as_f64()).collect(),
                    )
                };
                let n = (group * inner) as f64;
                let at = |gx: usize, f: usize| (gx * features + f) * inner;

                // Per-feature reductions: sum g, sum g*xhat.
                let mut sum_g = vec![0.0f64; features];
                let mut sum_gx = vec![0.0f64; features];
                sum_g
                    .par_iter_mut()
                    .zip(sum_gx.par_iter_mut())
                    .enumerate()
                    .for_each(|(f, (sg, sgx))| {
                        let inv = 1.0 / (var[f] + eps).sqrt();
                        for gx in 0..group {
                            let xs = &x.data()[at(gx, f)..at(gx, f) + inner];
                            let gs = &g.data()[at(gx, f)..at(gx, f) + inner];
                            for (xv, gv) in xs.iter().zip(gs) {
                                let xh = (xv.as_f64() - mean[f]) * inv;
                                *sg += gv.as_f64();
                                *sgx += gv.as_f64() * xh;
                            }
                        }
                    });
                if wants(1) {
                    let dgamma: Vec<S> = sum_gx.iter().map(|&v| S::of_f64(v)).collect();
                    add_to(1, Tensor::new(vec![features], dgamma)?, grads);
                }
                if node.inputs.len() > 2 && wants(2) {
                    let dbeta: Vec<S> = sum_g.iter().map(|&v| S::of_f64(v)).collect();
                    add_to(2, Tensor::new(vec![features], dbeta)?, grads);
                }
                if wants(0) {
                    let mut dx = Tensor::zeros(x.shape());
                    dx.data_mut()
                        .par_chunks_mut(features * inner)
                        .enumerate()
                        .for_each(|(gx, chunk)| {
                            for f in 0..features {
                                let inv = 1.0 / (var[f] + eps).sqrt();
                                let ga = gamma.data()[f].as_f64();
                                let xs = &x.data()[at(gx, f)..at(gx, f) + inner];
                                let gs = &g.data()[at(gx, f)..at(gx, f) + inner];
                                let dst = &mut chunk[f * inner..(f + 1) * inner];
                                for ((d, xv), gv) in dst.iter_mut().zip(xs).zip(gs) {
                                    let xh = (xv.as_f64() - mean[f]) * inv;
                                    let v = if *train {
                                        ga * inv * (gv.as_f64() - sum_g[f] / n - xh * sum_gx[f] / n)
                                    } else {
                                        ga * inv * gv.as_f64()
                                    };
                                    *d = S::of_f64(v);
                                }
                            }
                        });
                    add_to(0, dx, grads);
                }
            }
            Op::Softmax => {
                if wants(0) {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap();
                    let mut dx = Tensor::zeros(y.shape());
                    for ((yrow, grow), drow) in y
                        .data()
                        .chunks(cols)
                        .zip(g.data().chunks(cols))
                        .zip(dx.data_mut().chunks_mut(cols))
                    {
                        let dot: f64 = yrow
                            .iter()
                            .zip(grow)
                            .map(|(&yv, &gv)| yv.as_f64() * gv.as_f64())
                            .sum();
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d = S::of_f64(yv.as_f64() * (gv.as_f64() - dot));
                        }
                    }
                    add_to(0, dx, grads);
                }
            }
            Op::Log => {
                if wants(0) {
                    let x = input(0);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| gv / xv)
                        .collect();
                    add_to(0, Tensor::new(x.shape().to_vec(), data)?, grads);
                }
            }
            Op::Clamp { lo, hi } => {
                if wants(0) {
                    let x = input(0);
                    let (lo, hi) = (S::of_f64(*lo), S::of_f64(*hi));
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { S::zero() })
                        .collect();
                    add_to(0, Tensor::new(x.shape().to_vec(), data)?, grads);
                }
            }
            Op::Scale { c } => {
                if wants(0) {
                    let c = S::of_f64(*c);
                    add_to(0, g.map(|v| v * c), grads);
                }
            }
            Op::CrossEntropyMean { targets } => {
                if wants(0) {
                    let logits = input(0);
                    let k = logits.shape()[1];
                    let b = targets.len() as f64;
                    let gv = g.item().as_f64();
                    let mut dx = Tensor::zeros(logits.shape());
                    for ((row, drow), &t) in logits
                        .data()
                        .chunks(k)
                        .zip(dx.data_mut().chunks_mut(k))
                        .zip(targets)
                    {
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
                        for (j, (d, e)) in drow.iter_mut().zip(exps).enumerate() {
                            let p = e / z;
                            let ind = if j == t { 1.0 } else { 0.0 };
                            *d = S::of_f64(gv * (p - ind) / b);
                        }
                    }
                    add_to(0, dx, grads);
                }
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.index()).and_then(|g| g.take())
    }
}

/// Central-difference gradient estimate of a scalar function, the oracle
/// the analytic backward pass is checked against.
pub fn finite_diff_grad<S, F>(mut f: F, x: &Tensor<S>, eps: f64) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    debug_assert!(eps > 0.0);
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let base = x.data()[i];
        let mut xp = x.clone();
        xp.data_mut()[i] = S::of_f64(base.as_f64() + eps);
        let fp = f(&xp)?.as_f64();
        let mut xm = x.clone();
        xm.data_mut()[i] = S::of_f64(base.as_f64() - eps);
        let fm = f(&xm)?.as_f64();
        out.data_mut()[i] = S::of_f64((fp - fm) / (2.0 * eps));
    }
    Ok(out)
}

/// Central difference at a single coordinate; lets tests probe big tensors
/// without paying for every coordinate.
pub fn finite_diff_at<S, F>(mut f: F, x: &Tensor<S>, coord: usize, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    let base = x.data()[coord];
    let mut xp = x.clone();
    xp.data_mut()[coord] = S::of_f64(base.as_f64() + eps);
    let fp = f(&xp)?.as_f64();
    let mut xm = x.clone();
    xm.data_mut()[coord] = S::of_f64(base.as_f64() - eps);
    let fm = f(&xm)?.as_f64();
    Ok((fp - fm) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn reduce_sum_grad_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let loss = tape.apply(Op::ReduceSum, &[x]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_grad_is_two_x() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let sq = tape.apply(Op::Mul, &[x, x]).unwrap();
        let loss = tape.apply(Op::ReduceSum, &[sq]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::<f32>::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn dangling_node_rejected() {
        let tape = Tape::<f32>::new();
        assert!(matches!(
            tape.backward(NodeId(3)),
            Err(Error::DanglingNode { .. })
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::<f32>::ones(&[3]));
        let c = tape.constant(Tensor::<f32>::full(&[3], 2.0));
        let y = tape.apply(Op::Mul, &[x, c]).unwrap();
        let loss = tape.apply(Op::ReduceSum, &[y]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 3]);
    }

    /// Analytic f32 gradient vs central differences taken through the
    /// same graph instantiated at f64, so the oracle is free of f32
    /// roundoff. eps = 1e-3, rel err < 1e-2 at up to 20 random coords.
    fn run_grad_check(
        name: &str,
        inputs: &[Tensor<f32>],
        seed: u64,
        build32: impl Fn(&mut Tape<f32>, &[NodeId]) -> NodeId,
        build64: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build32(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.to_f64()).collect();
        let mut rng = RngStream::new(seed, 99);
        for (k, x) in wide.iter().enumerate() {
            let analytic = grads
                .get(ids[k])
                .unwrap_or_else(|| panic!("{name}: no grad for input {k}"));
            for _ in 0..20usize.min(x.numel()) {
                let coord = rng.next_below(x.numel() as u64) as usize;
                let fd = finite_diff_at(
                    |probe: &Tensor<f64>| {
                        let mut t2 = Tape::<f64>::new();
                        let ids2: Vec<NodeId> = wide
                            .iter()
                            .enumerate()
                            .map(|(j, t)| t2.leaf(if j == k { probe.clone() } else { t.clone() }))
                            .collect();
                        let l2 = build64(&mut t2, &ids2);
                        Ok(t2.value(l2).item())
                    },
                    x,
                    coord,
                    1e-3,
                )
                .unwrap();
                let an = analytic.data()[coord] as f64;
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
                assert!(
                    rel < 1e-2,
                    "{name} input {k} coord {coord}: analytic {an} vs fd {fd} (rel {rel:.2e})"
                );
            }
        }
    }

    macro_rules! grad_check {
        ($name:expr, $inputs:expr, $seed:expr, |$t:ident, $ids:ident| $body:expr) => {{
            fn build<S: crate::scalar::Scalar>($t: &mut Tape<S>, $ids: &[NodeId]) -> NodeId {
                $body
            }
            run_grad_check($name, $inputs, $seed, build::<f32>, build::<f64>);
        }};
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
        RngStream::new(seed, 7).normal_tensor(shape)
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        let x = randn(&[4, 3], 1);
        let b = randn(&[3], 2);
        grad_check!("add-bcast", &[x.clone(), b.clone()], 11, |t, ids| {
            let s = t.apply(Op::Add, &[ids[0], ids[1]]).unwrap();
            let sq = t.apply(Op::Mul, &[s, s]).unwrap();
            t.apply(Op::ReduceSum, &[sq]).unwrap()
        });
        grad_check!("sub-scalar", &[x.clone(), randn(&[1], 3)], 12, |t, ids| {
            let s = t.apply(Op::Sub, &[ids[0], ids[1]]).unwrap();
            let sq = t.apply(Op::Mul, &[s, s]).unwrap();
            t.apply(Op::ReduceMean, &[sq]).unwrap()
        });
        grad_check!("mul", &[x, b], 13, |t, ids| {
            let s = t.apply(Op::Mul, &[ids[0], ids[1]]).unwrap();
            t.apply(Op::ReduceSum, &[s]).unwrap()
        });
    }

    #[test]
    fn grad_matmul() {
        let x = randn(&[5, 4], 4);
        let w = randn(&[4, 3], 5);
        grad_check!("matmul", &[x, w], 14, |t, ids| {
            let y = t.apply(Op::Matmul, &[ids[0], ids[1]]).unwrap();
            let sq = t.apply(Op::Mul, &[y, y]).unwrap();
            t.apply(Op::ReduceMean, &[sq]).unwrap()
        });
    }

    #[test]
    fn grad_conv2d_with_bias() {
        let x = randn(&[2, 3, 6, 5], 6);
        let k = randn(&[4, 3, 3, 3], 7).map(|v| v * 0.4);
        let b = randn(&[4], 8);
        grad_check!("conv2d", &[x, k, b], 15, |t, ids| {
            let y = t
                .apply(Op::Conv2d { stride: 2, pad: 1 }, &[ids[0], ids[1], ids[2]])
                .unwrap();
            let sq = t.apply(Op::Mul, &[y, y]).unwrap();
            t.apply(Op::ReduceMean, &[sq]).unwrap()
        });
    }

    #[test]
    fn grad_conv2d_transpose_with_bias() {
        let x = randn(&[2, 4, 3, 3], 9);
        let k = randn(&[4, 2, 4, 4], 10).map(|v| v * 0.4);
        let b = randn(&[2], 11);
        grad_check!("conv2d_transpose", &[x, k, b], 16, |t, ids| {
            let y = t
                .apply(
                    Op::ConvTranspose2d { stride: 2, pad: 1 },
                    &[ids[0], ids[1], ids[2]],
                )
                .unwrap();
            let sq = t.apply(Op::Mul, &[y, y]).unwrap();
            t.apply(Op::ReduceMean, &[sq]).unwrap()
        });
    }

    #[test]
    fn grad_activations() {
        macro_rules! act_case {
            ($name:expr, $op:expr) => {
                grad_check!($name, &[randn(&[3, 7], 20)], 21, |t, ids| {
                    let y = t.apply($op, &[ids[0]]).unwrap();
                    let sq = t.apply(Op::Mul, &[y, y]).unwrap();
                    t.apply(Op::ReduceSum, &[sq]).unwrap()
                });
            };
        }
        act_case!("relu", Op::Relu);
        act_case!("leaky_relu", Op::LeakyRelu { alpha: 0.2 });
        act_case!("tanh", Op::Tanh);
        act_case!("sigmoid", Op::Sigmoid);
    }

    #[test]
    fn grad_maxpool_softmax_log_clamp_scale() {
        let x = randn(&[2, 2, 4, 4], 22);
        grad_check!("maxpool2d", &[x], 23, |t, ids| {
            let y = t
                .apply(
                    Op::MaxPool2d {
                        window: 2,
                        stride: 2,
                    },
                    &[ids[0]],
                )
                .unwrap();
            let sq = t.apply(Op::Mul, &[y, y]).unwrap();
            t.apply(Op::ReduceSum, &[sq]).unwrap()
        });

        let z = randn(&[4, 5], 24);
        grad_check!("softmax", std::slice::from_ref(&z), 25, |t, ids| {
            let y = t.apply(Op::Softmax, &[ids[0]]).unwrap();
            let sq = t.apply(Op::Mul, &[y, y]).unwrap();
            t.apply(Op::ReduceSum, &[sq]).unwrap()
        });

        let pos = z.map(|v| v.abs() + 0.5);
        grad_check!("log", &[pos], 26, |t, ids| {
            let y = t.apply(Op::Log, &[ids[0]]).unwrap();
            t.apply(Op::ReduceMean, &[y]).unwrap()
        });

        grad_check!("clamp+scale", &[z], 27, |t, ids| {
            let y = t.apply(Op::Clamp { lo: -0.5, hi: 0.5 }, &[ids[0]]).unwrap();
            let y = t.apply(Op::Scale { c: 2.5 }, &[y]).unwrap();
            let sq = t.apply(Op::Mul, &[y, y]).unwrap();
            t.apply(Op::ReduceSum, &[sq]).unwrap()
        });
    }

    #[test]
    fn grad_concat_reshape() {
        let a = randn(&[3, 2], 30);
        let b = randn(&[3, 4], 31);
        grad_check!("concat", &[a, b], 32, |t, ids| {
            let y = t.apply(Op::Concat { axis: 1 }, &[ids[0], ids[1]]).unwrap();
            let y = t.apply(Op::Reshape { shape: vec![2, 9] }, &[y]).unwrap();
            let sq = t.apply(Op::Mul, &[y, y]).unwrap();
            t.apply(Op::ReduceSum, &[sq]).unwrap()
        });
    }

    #[test]
    fn grad_batchnorm_train_and_eval() {
        let x = randn(&[6, 3, 2, 2], 33);
        let gamma = randn(&[3], 34).map(|v| v * 0.2 + 1.0);
        let beta = randn(&[3], 35);
        grad_check!(
            "batchnorm-train",
            &[x.clone(), gamma.clone(), beta.clone()],
            36,
            |t, ids| {
                let y = t
                    .apply(
                        Op::BatchNorm {
                            eps: 1e-5,
                            train: true,
                        },
                        &[ids[0], ids[1], ids[2]],
                    )
                    .unwrap();
                let sq = t.apply(Op::Mul, &[y, y]).unwrap();
                t.apply(Op::ReduceMean, &[sq]).unwrap()
            }
        );

        grad_check!("batchnorm-eval", &[x, gamma, beta], 39, |t, ids| {
            let m = t.constant(
                Tensor::from_vec(&[3], vec![S::of_f64(0.3), S::of_f64(-0.1), S::of_f64(0.7)])
                    .unwrap(),
            );
            let v = t.constant(
                Tensor::from_vec(&[3], vec![S::of_f64(0.9), S::of_f64(1.4), S::of_f64(0.6)])
                    .unwrap(),
            );
            let y = t
                .apply(
                    Op::BatchNorm {
                        eps: 1e-5,
                        train: false,
                    },
                    &[ids[0], ids[1], ids[2], m, v],
                )
                .unwrap();
            let sq = t.apply(Op::Mul, &[y, y]).unwrap();
            t.apply(Op::ReduceMean, &[sq]).unwrap()
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let logits = randn(&[6, 4], 40);
        grad_check!("cross_entropy_mean", &[logits], 41, |t, ids| {
            t.apply(
                Op::CrossEntropyMean {
                    targets: vec![0, 3, 1, 2, 2, 0],
                },
                &[ids[0]],
            )
            .unwrap()
        });
    }

    #[test]
    fn grad_sigmoid_bce_pipeline_matches_finite_diff() {
        // mean(-log(sigmoid(x))) on random input.
        let x = randn(&[8], 42);
        grad_check!("sigmoid-bce", &[x], 43, |t, ids| {
            let p = t.apply(Op::Sigmoid, &[ids[0]]).unwrap();
            let p = t
                .apply(
                    Op::Clamp {
                        lo: 1e-7,
                        hi: 1.0 - 1e-7,
                    },
                    &[p],
                )
                .unwrap();
            let lg = t.apply(Op::Log, &[p]).unwrap();
            let neg = t.apply(Op::Scale { c: -1.0 }, &[lg]).unwrap();
            t.apply(Op::ReduceMean, &[neg]).unwrap()
        });
    }

    #[test]
    fn finite_diff_basics() {
        // f = sum -> gradient of ones.
        let x = randn(&[5], 50);
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum::<f32>()), &x, 1e-3).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
        // f(x) = x^2 at x = 2 -> 4.
        let x2 = Tensor::from_vec(&[1], vec![2.0f32]).unwrap();
        let g2 = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x2, 1e-3).unwrap();
        assert!((g2.data()[0] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn conv_transpose_is_conv_input_gradient() {
        // convT forward on g equals d/d_input of conv with the same kernel.
        let mut rng = RngStream::new(77, 1);
        let x: Tensor<f32> = rng.normal_tensor(&[2, 3, 6, 6]);
        let kern: Tensor<f32> = rng.normal_tensor(&[4, 3, 4, 4]);
        let g: Tensor<f32> = rng.normal_tensor(&[2, 4, 3, 3]);

        // Route 1: conv forward, backward to input with upstream grad g.
        let mut tape = Tape::<f32>::new();
        let xid = tape.leaf(x.clone());
        let kid = tape.constant(kern.clone());
        let y = tape
            .apply(Op::Conv2d { stride: 2, pad: 1 }, &[xid, kid])
            .unwrap();
        let gid = tape.constant(g.clone());
        let prod = tape.apply(Op::Mul, &[y, gid]).unwrap();
        let loss = tape.apply(Op::ReduceSum, &[prod]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let route1 = grads.get(xid).unwrap();

        // Route 2: conv2d_transpose forward on g with the same kernel.
        let mut tape2 = Tape::<f32>::new();
        let gid2 = tape2.constant(g);
        let kid2 = tape2.constant(kern);
        let out = tape2
            .apply(Op::ConvTranspose2d { stride: 2, pad: 1 }, &[gid2, kid2])
            .unwrap();
        let route2 = tape2.value(out);
        assert_eq!(route1.shape(), route2.shape());
        for (a, b) in route1.data().iter().zip(route2.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let x = randn(&[3, 3], 60);
        let before = x.clone();
        let mut tape = Tape::<f32>::new();
        let id = tape.leaf(x.clone());
        let _ = tape.apply(Op::Relu, &[id]).unwrap();
        let _ = tape.apply(Op::Tanh, &[id]).unwrap();
        assert_eq!(tape.value(id), &before);
        assert_eq!(x, before);
    }
}
