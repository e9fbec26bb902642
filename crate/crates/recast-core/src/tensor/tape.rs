//! Reverse-mode autodiff tape.
//!
//! A `Tape` records one forward pass as an append-only list of nodes; node
//! inputs always point at earlier nodes, so the reverse sweep is a single
//! walk from the loss back to the leaves. The tape is discarded after
//! `backward`. Instance-local mutable state: one tape per network pass,
//! never shared across threads.

use rayon::prelude::*;

use super::optim::{ParamId, ParamSet};
use super::scalar::{matmul_at, matmul_bt, Scalar};
use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValRef(usize);

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: ValRef,
        w: ValRef,
        bias: Option<ValRef>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: ValRef,
        gamma: ValRef,
        beta: ValRef,
        // Saved statistics actually used for normalization (batch stats in
        // train mode, running stats in eval mode).
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: ValRef,
    },
    Add {
        a: ValRef,
        b: ValRef,
    },
    ConcatChannels {
        xs: Vec<ValRef>,
    },
    AvgPool {
        x: ValRef,
        k: usize,
        stride: usize,
    },
    MaxPool {
        x: ValRef,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: ValRef,
    },
    Linear {
        x: ValRef,
        w: ValRef,
        bias: Option<ValRef>,
    },
    Sum {
        x: ValRef,
    },
    MseLoss {
        a: ValRef,
        b: ValRef,
    },
    SoftmaxCrossEntropy {
        logits: ValRef,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    watches: Vec<(ParamId, ValRef)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            watches: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> ValRef {
        debug_assert!(value.all_finite(), "non-finite values produced by forward op");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        ValRef(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient flows into it).
    pub fn leaf(&mut self, value: Tensor<T>) -> ValRef {
        self.push(value, false, Op::Leaf)
    }

    /// Record a differentiable leaf.
    pub fn var(&mut self, value: Tensor<T>) -> ValRef {
        self.push(value, true, Op::Leaf)
    }

    /// Record a batch of differentiable leaves.
    pub fn nodes_from(&mut self, tensors: &[Tensor<T>]) -> Vec<ValRef> {
        tensors.iter().map(|t| self.var(t.clone())).collect()
    }

    /// Remember that `v` mirrors parameter `id`, so its gradient can be
    /// exported after backward.
    pub fn watch(&mut self, id: ParamId, v: ValRef) {
        self.watches.push((id, v));
    }

    pub fn value(&self, v: ValRef) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: ValRef) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn requires(&self, v: ValRef) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- forward ops --------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: ValRef,
        w: ValRef,
        bias: Option<ValRef>,
        stride: usize,
        padding: usize,
    ) -> Result<ValRef, TensorError> {
        assert!(stride >= 1, "conv2d stride must be positive");
        let (b, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if cin != wcin {
            return Err(TensorError::ChannelMismatch {
                input_channels: cin,
                weight_channels: wcin,
            });
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(TensorError::KernelTooLarge {
                k: kh,
                h,
                w: wd,
                padding,
            });
        }
        if let Some(bv) = bias {
            let bs = self.value(bv).shape();
            if bs != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: bs.to_vec(),
                });
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let bias_data = bias.map(|bv| self.value(bv).data().to_vec());
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            bias_data.as_deref(),
            stride,
            padding,
            (b, cin, h, wd),
            (cout, kh, kw, oh, ow),
        );
        let rg = self.requires(x) || self.requires(w) || bias.map_or(false, |bv| self.requires(bv));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Batch normalization over the channel axis of a `[B,C,H,W]` tensor.
    ///
    /// In train mode the running statistics are updated in place with an
    /// exponential moving average (unbiased variance, PyTorch convention).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: ValRef,
        gamma: ValRef,
        beta: ValRef,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<ValRef, TensorError> {
        let (b, c, h, w) = self.value(x).dims4()?;
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(t).shape();
            if s != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" {
                        "batchnorm gamma"
                    } else {
                        "batchnorm beta"
                    },
                    lhs: vec![c],
                    rhs: s.to_vec(),
                });
            }
        }
        let per_channel = b * h * w;
        let train = mode == Mode::Train;
        if train && per_channel < 2 {
            return Err(TensorError::DegenerateVariance { per_channel });
        }

        let xs = self.value(x).data();
        let hw = h * w;
        let (mean, inv_std): (Vec<T>, Vec<T>) = if train {
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![T::ZERO; c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for v in &xs[base..base + hw] {
                        acc += v.to_f64();
                    }
                }
                let m = acc / per_channel as f64;
                let mut vacc = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for v in &xs[base..base + hw] {
                        let d = v.to_f64() - m;
                        vacc += d * d;
                    }
                }
                let biased = vacc / per_channel as f64;
                let unbiased = vacc / (per_channel as f64 - 1.0);
                mean[ch] = T::from_f64(m);
                var[ch] = T::from_f64(biased);
                let rm = running_mean.data_mut();
                rm[ch] = T::from_f64((1.0 - momentum) * rm[ch].to_f64() + momentum * m);
                let rv = running_var.data_mut();
                rv[ch] = T::from_f64((1.0 - momentum) * rv[ch].to_f64() + momentum * unbiased);
            }
            let inv_std = var
                .iter()
                .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
                .collect();
            (mean, inv_std)
        } else {
            let mean = running_mean.data().to_vec();
            let inv_std = running_var
                .data()
                .iter()
                .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
                .collect();
            (mean, inv_std)
        };

        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![T::ZERO; xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                let (m, is, g, be) = (mean[ch], inv_std[ch], gs[ch], bs[ch]);
                for i in base..base + hw {
                    out[i] = (xs[i] - m) * is * g + be;
                }
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, x: ValRef) -> ValRef {
        let out = self.value(x).map(|v| v.maximum(T::ZERO));
        let rg = self.requires(x);
        self.push(out, rg, Op::Relu { x })
    }

    pub fn add(&mut self, a: ValRef, b: ValRef) -> Result<ValRef, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn concat_channels(&mut self, xs: &[ValRef]) -> Result<ValRef, TensorError> {
        assert!(!xs.is_empty(), "concat_channels needs at least one input");
        let (b0, _, h0, w0) = self.value(xs[0]).dims4()?;
        let mut c_total = 0;
        for &v in xs {
            let (b, c, h, w) = self.value(v).dims4()?;
            if (b, h, w) != (b0, h0, w0) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            c_total += c;
        }
        let hw = h0 * w0;
        let mut out = vec![T::ZERO; b0 * c_total * hw];
        for bi in 0..b0 {
            let mut c_off = 0;
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                let src = &t.data()[bi * c * hw..(bi + 1) * c * hw];
                out[(bi * c_total + c_off) * hw..(bi * c_total + c_off + c) * hw]
                    .copy_from_slice(src);
                c_off += c;
            }
        }
        let out = Tensor::new(vec![b0, c_total, h0, w0], out)?;
        let rg = xs.iter().any(|&v| self.requires(v));
        Ok(self.push(out, rg, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    pub fn avgpool(&mut self, x: ValRef, k: usize, stride: usize) -> Result<ValRef, TensorError> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h < k || w < k {
            return Err(TensorError::KernelTooLarge {
                k,
                h,
                w,
                padding: 0,
            });
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xs = self.value(x).data();
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xs[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::ZERO;
                    for di in 0..k {
                        let row = (i * stride + di) * w + j * stride;
                        for dj in 0..k {
                            acc += src[row + dj];
                        }
                    }
                    dst[i * ow + j] = acc * inv;
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::AvgPool { x, k, stride }))
    }

    pub fn maxpool(&mut self, x: ValRef, k: usize, stride: usize) -> Result<ValRef, TensorError> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h < k || w < k {
            return Err(TensorError::KernelTooLarge {
                k,
                h,
                w,
                padding: 0,
            });
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xs = self.value(x).data();
        let mut out = vec![T::ZERO; b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        for bc in 0..b * c {
            let src_base = bc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = None;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = src_base + (i * stride + di) * w + (j * stride + dj);
                            let v = xs[idx];
                            if best.map_or(true, |(bv, _)| v > bv) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (bv, bidx) = best.unwrap();
                    let o = bc * oh * ow + i * ow + j;
                    out[o] = bv;
                    argmax[o] = bidx as u32;
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::MaxPool { x, argmax }))
    }

    pub fn global_avgpool(&mut self, x: ValRef) -> Result<ValRef, TensorError> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xs = self.value(x).data();
        let mut out = vec![T::ZERO; b * c];
        for bc in 0..b * c {
            let mut acc = 0.0f64;
            for v in &xs[bc * hw..(bc + 1) * hw] {
                acc += v.to_f64();
            }
            out[bc] = T::from_f64(acc / hw as f64);
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::GlobalAvgPool { x }))
    }

    /// `x [B,D] · wᵀ [D,K] + bias [K]`, weight stored `[K,D]`.
    pub fn linear(
        &mut self,
        x: ValRef,
        w: ValRef,
        bias: Option<ValRef>,
    ) -> Result<ValRef, TensorError> {
        let xs = self.value(x).shape();
        if xs.len() != 2 {
            return Err(TensorError::BadRank {
                op: "linear",
                expected: "input of rank 2 [B,D]",
                actual: xs.to_vec(),
            });
        }
        let (b, d) = (xs[0], xs[1]);
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "linear weight",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let k = ws[0];
        if let Some(bv) = bias {
            if self.value(bv).shape() != [k] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![k],
                    rhs: self.value(bv).shape().to_vec(),
                });
            }
        }
        let mut out = vec![T::ZERO; b * k];
        matmul_bt(b, d, k, self.value(x).data(), self.value(w).data(), T::ZERO, &mut out);
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for bi in 0..b {
                for ki in 0..k {
                    out[bi * k + ki] += bd[ki];
                }
            }
        }
        let out = Tensor::new(vec![b, k], out)?;
        let rg = self.requires(x) || self.requires(w) || bias.map_or(false, |bv| self.requires(bv));
        Ok(self.push(out, rg, Op::Linear { x, w, bias }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: ValRef) -> ValRef {
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.to_f64();
        }
        let rg = self.requires(x);
        self.push(Tensor::scalar(T::from_f64(acc)), rg, Op::Sum { x })
    }

    /// Mean squared difference over all elements (per-sample activation
    /// size times batch), as a `[1]` tensor.
    pub fn mse_loss(&mut self, a: ValRef, b: ValRef) -> Result<ValRef, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut acc = 0.0f64;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x.to_f64() - y.to_f64();
            acc += d * d;
        }
        let loss = T::from_f64(acc / ta.numel() as f64);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::scalar(loss), rg, Op::MseLoss { a, b }))
    }

    /// Softmax cross-entropy against integer labels, mean over the batch.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValRef,
        labels: &[usize],
    ) -> Result<ValRef, TensorError> {
        let ls = self.value(logits).shape();
        if ls.len() != 2 {
            return Err(TensorError::BadRank {
                op: "softmax_cross_entropy",
                expected: "logits of rank 2 [B,K]",
                actual: ls.to_vec(),
            });
        }
        let (b, k) = (ls[0], ls[1]);
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy labels",
                lhs: vec![b],
                rhs: vec![labels.len()],
            });
        }
        for &y in labels {
            if y >= k {
                return Err(TensorError::LabelOutOfRange { label: y, classes: k });
            }
        }
        let zs = self.value(logits).data();
        let mut probs = vec![T::ZERO; b * k];
        let mut loss = 0.0f64;
        for bi in 0..b {
            let row = &zs[bi * k..(bi + 1) * k];
            let m = row
                .iter()
                .fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
            let mut denom = 0.0f64;
            for v in row {
                denom += (v.to_f64() - m).exp();
            }
            let lse = m + denom.ln();
            for (j, v) in row.iter().enumerate() {
                probs[bi * k + j] = T::from_f64((v.to_f64() - lse).exp());
            }
            loss -= zs[bi * k + labels[bi]].to_f64() - lse;
        }
        let loss = T::from_f64(loss / b as f64);
        let probs = Tensor::new(vec![b, k], probs)?;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss; gradients land on every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: ValRef) -> Result<(), TensorError> {
        let lt = &self.nodes[loss.0];
        if lt.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.value.shape().to_vec(),
            });
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                } => {
                    conv2d_backward(head, g, *x, *w, *bias, *stride, *padding);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train,
                } => {
                    batchnorm_backward(head, g, *x, *gamma, *beta, mean, inv_std, *train);
                }
                Op::Relu { x } => {
                    let xn = &head[x.0];
                    if xn.requires_grad {
                        let mask: Vec<T> = xn
                            .value
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &gv)| if v > T::ZERO { gv } else { T::ZERO })
                            .collect();
                        add_grad(head, *x, &mask);
                    }
                }
                Op::Add { a, b } => {
                    let gd = g.data().to_vec();
                    for &side in &[*a, *b] {
                        if head[side.0].requires_grad {
                            add_grad(head, side, &gd);
                        }
                    }
                }
                Op::ConcatChannels { xs } => {
                    let (b0, c_total, h, w) = node.value.dims4().unwrap();
                    let hw = h * w;
                    let mut c_off = 0;
                    let xs = xs.clone();
                    for v in xs {
                        let c = head[v.0].value.shape()[1];
                        if head[v.0].requires_grad {
                            let mut part = vec![T::ZERO; b0 * c * hw];
                            for bi in 0..b0 {
                                let src = &g.data()
                                    [(bi * c_total + c_off) * hw..(bi * c_total + c_off + c) * hw];
                                part[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(src);
                            }
                            add_grad(head, v, &part);
                        }
                        c_off += c;
                    }
                }
                Op::AvgPool { x, k, stride } => {
                    let xn = &head[x.0];
                    if xn.requires_grad {
                        let (b, c, h, w) = xn.value.dims4().unwrap();
                        let (_, _, oh, ow) = node.value.dims4().unwrap();
                        let inv = T::from_f64(1.0 / (*k * *k) as f64);
                        let mut dx = vec![T::ZERO; b * c * h * w];
                        for bc in 0..b * c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gv = g.data()[bc * oh * ow + i * ow + j] * inv;
                                    for di in 0..*k {
                                        let row = bc * h * w + (i * stride + di) * w + j * stride;
                                        for dj in 0..*k {
                                            dx[row + dj] += gv;
                                        }
                                    }
                                }
                            }
                        }
                        add_grad(head, *x, &dx);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let xn = &head[x.0];
                    if xn.requires_grad {
                        let mut dx = vec![T::ZERO; xn.value.numel()];
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src as usize] += g.data()[o];
                        }
                        add_grad(head, *x, &dx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let xn = &head[x.0];
                    if xn.requires_grad {
                        let (b, c, h, w) = xn.value.dims4().unwrap();
                        let hw = h * w;
                        let inv = T::from_f64(1.0 / hw as f64);
                        let mut dx = vec![T::ZERO; b * c * hw];
                        for bc in 0..b * c {
                            let gv = g.data()[bc] * inv;
                            for v in &mut dx[bc * hw..(bc + 1) * hw] {
                                *v = gv;
                            }
                        }
                        add_grad(head, *x, &dx);
                    }
                }
                Op::Linear { x, w, bias } => {
                    let (b, k) = {
                        let s = node.value.shape();
                        (s[0], s[1])
                    };
                    let d = head[x.0].value.shape()[1];
                    let gd = g.data();
                    if head[x.0].requires_grad {
                        // dX [B,D] = dOut [B,K] · W [K,D]
                        let mut dx = vec![T::ZERO; b * d];
                        super::scalar::matmul(b, k, d, gd, head[w.0].value.data(), T::ZERO, &mut dx);
                        add_grad(head, *x, &dx);
                    }
                    if head[w.0].requires_grad {
                        // dW [K,D] = dOutᵀ [K,B] · X [B,D]
                        let mut dw = vec![T::ZERO; k * d];
                        matmul_at(k, b, d, gd, head[x.0].value.data(), T::ZERO, &mut dw);
                        add_grad(head, *w, &dw);
                    }
                    if let Some(bv) = bias {
                        if head[bv.0].requires_grad {
                            let mut db = vec![T::ZERO; k];
                            for bi in 0..b {
                                for ki in 0..k {
                                    db[ki] += gd[bi * k + ki];
                                }
                            }
                            add_grad(head, *bv, &db);
                        }
                    }
                }
                Op::Sum { x } => {
                    let xn = &head[x.0];
                    if xn.requires_grad {
                        let gv = g.item();
                        let dx = vec![gv; xn.value.numel()];
                        add_grad(head, *x, &dx);
                    }
                }
                Op::MseLoss { a, b } => {
                    let gv = g.item();
                    let n = head[a.0].value.numel();
                    let scale = T::from_f64(2.0 / n as f64) * gv;
                    let (av, bv): (Vec<T>, Vec<T>) = {
                        let ad = head[a.0].value.data();
                        let bd = head[b.0].value.data();
                        ad.iter()
                            .zip(bd)
                            .map(|(&x, &y)| {
                                let d = (x - y) * scale;
                                (d, -d)
                            })
                            .unzip()
                    };
                    if head[a.0].requires_grad {
                        add_grad(head, *a, &av);
                    }
                    if head[b.0].requires_grad {
                        add_grad(head, *b, &bv);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    if head[logits.0].requires_grad {
                        let gv = g.item();
                        let (b, k) = (probs.shape()[0], probs.shape()[1]);
                        let inv_b = T::from_f64(1.0 / b as f64);
                        let mut dz = probs.data().to_vec();
                        for (bi, &y) in labels.iter().enumerate() {
                            dz[bi * k + y] -= T::ONE;
                        }
                        for v in &mut dz {
                            *v *= gv * inv_b;
                        }
                        add_grad(head, *logits, &dz);
                    }
                }
            }
            // Free intermediate gradients as we pass them (leaves keep theirs).
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = None;
                // keep the loss gradient for inspection
                if i == loss.0 {
                    self.nodes[i].grad = Some(Tensor::full(&[1], T::ONE));
                }
            }
        }
        debug_assert!(self
            .nodes
            .iter()
            .all(|n| n.grad.as_ref().map_or(true, |g| g.all_finite())));
        Ok(())
    }
}

impl Tape<f32> {
    /// Record a parameter leaf and watch it for gradient export.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> ValRef {
        let v = self.var(set.value(id).clone());
        self.watch(id, v);
        v
    }

    /// Accumulate watched gradients into the parameter set.
    pub fn export_grads(&mut self, set: &mut ParamSet) {
        for (id, v) in std::mem::take(&mut self.watches) {
            if let Some(g) = self.nodes[v.0].grad.take() {
                set.accumulate_grad(id, &g);
            }
        }
    }
}

fn add_grad<T: Scalar>(head: &mut [Node<T>], v: ValRef, add: &[T]) {
    let node = &mut head[v.0];
    match &mut node.grad {
        Some(t) => {
            for (dst, &src) in t.data_mut().iter_mut().zip(add) {
                *dst += src;
            }
        }
        None => {
            let shape = node.value.shape().to_vec();
            node.grad = Some(Tensor::new(shape, add.to_vec()).expect("gradient shape"));
        }
    }
}

// Number of parallel slices conv work is split into. Fixed so that the
// results do not depend on the thread count (each slice is sequential and
// the slices write disjoint ranges).
const CONV_CHUNKS: usize = 8;

/// Scatter one image's patches into its column range of the batched
/// column matrix `col` with row stride `ldc` (the total column count).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    col: &mut [T],
    col_offset: usize,
    ldc: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
) {
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (c * kh + ki) * kw + kj;
                // valid output-column range for this kernel column
                let ow_lo = padding.saturating_sub(kj).div_ceil(stride).min(ow);
                let ow_hi = if w + padding > kj {
                    (((w - 1 + padding - kj) / stride) + 1).min(ow)
                } else {
                    0
                };
                for i in 0..oh {
                    let dst_base = r * ldc + col_offset + i * ow;
                    let ih = (i * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        col[dst_base..dst_base + ow].fill(T::ZERO);
                        continue;
                    }
                    let src_row = &x[(c * h + ih as usize) * w..(c * h + ih as usize + 1) * w];
                    col[dst_base..dst_base + ow_lo].fill(T::ZERO);
                    col[dst_base + ow_hi.max(ow_lo)..dst_base + ow].fill(T::ZERO);
                    if ow_hi > ow_lo {
                        let iw0 = ow_lo * stride + kj - padding;
                        if stride == 1 {
                            col[dst_base + ow_lo..dst_base + ow_hi]
                                .copy_from_slice(&src_row[iw0..iw0 + (ow_hi - ow_lo)]);
                        } else {
                            for (j, slot) in col[dst_base + ow_lo..dst_base + ow_hi]
                                .iter_mut()
                                .enumerate()
                            {
                                *slot = src_row[iw0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of `im2col`: accumulate one image's column range back into its
/// gradient image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    col: &[T],
    col_offset: usize,
    ldc: usize,
    x: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
) {
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (c * kh + ki) * kw + kj;
                let ow_lo = padding.saturating_sub(kj).div_ceil(stride).min(ow);
                let ow_hi = if w + padding > kj {
                    (((w - 1 + padding - kj) / stride) + 1).min(ow)
                } else {
                    0
                };
                if ow_hi <= ow_lo {
                    continue;
                }
                for i in 0..oh {
                    let ih = (i * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &col[r * ldc + col_offset + i * ow..][ow_lo..ow_hi];
                    let dst_row =
                        &mut x[(c * h + ih as usize) * w..(c * h + ih as usize + 1) * w];
                    let iw0 = ow_lo * stride + kj - padding;
                    if stride == 1 {
                        for (j, &v) in src.iter().enumerate() {
                            dst_row[iw0 + j] += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dst_row[iw0 + j * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn fixed_chunks(b: usize) -> usize {
    CONV_CHUNKS.min(b.max(1))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
    (b, cin, h, wd): (usize, usize, usize, usize),
    (cout, kh, kw, oh, ow): (usize, usize, usize, usize, usize),
) -> Tensor<T> {
    let ohw = oh * ow;
    if b == 0 {
        return Tensor::new(vec![b, cout, oh, ow], Vec::new()).expect("conv output shape");
    }
    let ckk = cin * kh * kw;
    let chw = cin * h * wd;
    let xin = x.data();
    let wmat = w.data();
    let mut out = vec![T::ZERO; b * cout * ohw];
    let chunk = b.div_ceil(fixed_chunks(b));
    // Each task packs its own image range into a column matrix and runs
    // one GEMM; every column only ever accumulates along k inside the
    // GEMM, so values do not depend on the chunking or thread order.
    out.par_chunks_mut(chunk * cout * ohw)
        .enumerate()
        .for_each(|(ci, out_chunk)| {
            let b_lo = ci * chunk;
            let bs = ((b_lo + chunk).min(b)) - b_lo;
            let ldc = bs * ohw;
            let mut col = vec![T::ZERO; ckk * ldc];
            for local in 0..bs {
                im2col(
                    &xin[(b_lo + local) * chw..(b_lo + local + 1) * chw],
                    &mut col,
                    local * ohw,
                    ldc,
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    oh,
                    ow,
                    stride,
                    padding,
                );
            }
            // flat [Cout, bs*OHW] = W [Cout, CKK] x col
            let mut flat = vec![T::ZERO; cout * ldc];
            super::scalar::matmul(cout, ckk, ldc, wmat, &col, T::ZERO, &mut flat);
            drop(col);
            for local in 0..bs {
                for co in 0..cout {
                    let src = &flat[co * ldc + local * ohw..co * ldc + (local + 1) * ohw];
                    let dst =
                        &mut out_chunk[(local * cout + co) * ohw..(local * cout + co + 1) * ohw];
                    match bias {
                        Some(bd) => {
                            let add = bd[co];
                            for (d, &sv) in dst.iter_mut().zip(src) {
                                *d = sv + add;
                            }
                        }
                        None => dst.copy_from_slice(src),
                    }
                }
            }
        });
    Tensor::new(vec![b, cout, oh, ow], out).expect("conv output shape")
}

fn conv2d_backward<T: Scalar>(
    head: &mut [Node<T>],
    g: &Tensor<T>,
    x: ValRef,
    w: ValRef,
    bias: Option<ValRef>,
    stride: usize,
    padding: usize,
) {
    let (b, cin, h, wd) = head[x.0].value.dims4().unwrap();
    let (cout, _, kh, kw) = head[w.0].value.dims4().unwrap();
    let (_, _, oh, ow) = g.dims4().unwrap();
    let ckk = cin * kh * kw;
    let ohw = oh * ow;
    let chw = cin * h * wd;
    let gd = g.data();
    let need_dx = head[x.0].requires_grad;
    let need_dw = head[w.0].requires_grad;
    let chunk = b.div_ceil(fixed_chunks(b));

    // dOut rearranged per chunk to [Cout, bs*OHW]
    let transpose_chunk = |b_lo: usize, bs: usize| -> Vec<T> {
        let ldc = bs * ohw;
        let mut gt = vec![T::ZERO; cout * ldc];
        for local in 0..bs {
            for co in 0..cout {
                let src = &gd[((b_lo + local) * cout + co) * ohw..][..ohw];
                gt[co * ldc + local * ohw..co * ldc + (local + 1) * ohw].copy_from_slice(src);
            }
        }
        gt
    };

    if need_dw {
        let xin = head[x.0].value.data();
        // per-chunk partial dW summed in fixed chunk order afterwards
        let partials: Vec<Vec<T>> = (0..b.div_ceil(chunk))
            .into_par_iter()
            .map(|ci| {
                let b_lo = ci * chunk;
                let bs = ((b_lo + chunk).min(b)) - b_lo;
                let ldc = bs * ohw;
                let mut col = vec![T::ZERO; ckk * ldc];
                for local in 0..bs {
                    im2col(
                        &xin[(b_lo + local) * chw..(b_lo + local + 1) * chw],
                        &mut col,
                        local * ohw,
                        ldc,
                        cin,
                        h,
                        wd,
                        kh,
                        kw,
                        oh,
                        ow,
                        stride,
                        padding,
                    );
                }
                let gt = transpose_chunk(b_lo, bs);
                // dW [Cout, CKK] = dOut [Cout, bs*OHW] x col'
                let mut dw = vec![T::ZERO; cout * ckk];
                matmul_bt(cout, ldc, ckk, &gt, &col, T::ZERO, &mut dw);
                dw
            })
            .collect();
        let mut dw = vec![T::ZERO; cout * ckk];
        for p in partials {
            for (dst, src) in dw.iter_mut().zip(p) {
                *dst += src;
            }
        }
        add_grad(head, w, &dw);
    }

    if need_dx {
        let wmat = head[w.0].value.data().to_vec();
        let mut dx = vec![T::ZERO; b * chw];
        dx.par_chunks_mut(chunk * chw)
            .enumerate()
            .for_each(|(ci, dx_chunk)| {
                let b_lo = ci * chunk;
                let bs = ((b_lo + chunk).min(b)) - b_lo;
                let ldc = bs * ohw;
                let gt = transpose_chunk(b_lo, bs);
                // dcol [CKK, bs*OHW] = W' [CKK, Cout] x dOut
                let mut dcol = vec![T::ZERO; ckk * ldc];
                matmul_at(ckk, cout, ldc, &wmat, &gt, T::ZERO, &mut dcol);
                drop(gt);
                for local in 0..bs {
                    col2im_add(
                        &dcol,
                        local * ohw,
                        ldc,
                        &mut dx_chunk[local * chw..(local + 1) * chw],
                        cin,
                        h,
                        wd,
                        kh,
                        kw,
                        oh,
                        ow,
                        stride,
                        padding,
                    );
                }
            });
        add_grad(head, x, &dx);
    }

    if let Some(bv) = bias {
        if head[bv.0].requires_grad {
            let mut db = vec![T::ZERO; cout];
            for bi in 0..b {
                for co in 0..cout {
                    let base = (bi * cout + co) * ohw;
                    let mut acc = T::ZERO;
                    for &v in &gd[base..base + ohw] {
                        acc += v;
                    }
                    db[co] += acc;
                }
            }
            add_grad(head, bv, &db);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_backward<T: Scalar>(
    head: &mut [Node<T>],
    g: &Tensor<T>,
    x: ValRef,
    gamma: ValRef,
    beta: ValRef,
    mean: &[T],
    inv_std: &[T],
    train: bool,
) {
    let (b, c, h, w) = head[x.0].value.dims4().unwrap();
    let hw = h * w;
    let n = (b * hw) as f64;
    let gd = g.data();
    let xs = head[x.0].value.data();
    let gs = head[gamma.0].value.data();

    // Reductions needed by every branch: sum(dY) and sum(dY * xhat) per channel.
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let (m, is) = (mean[ch].to_f64(), inv_std[ch].to_f64());
            let mut a0 = 0.0;
            let mut a1 = 0.0;
            for i in base..base + hw {
                let dy = gd[i].to_f64();
                a0 += dy;
                a1 += dy * (xs[i].to_f64() - m) * is;
            }
            sum_dy[ch] += a0;
            sum_dy_xhat[ch] += a1;
        }
    }

    if head[x.0].requires_grad {
        let mut dx = vec![T::ZERO; xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                let m = mean[ch].to_f64();
                let is = inv_std[ch].to_f64();
                let gamma_is = gs[ch].to_f64() * is;
                if train {
                    let mean_dy = sum_dy[ch] / n;
                    let mean_dy_xhat = sum_dy_xhat[ch] / n;
                    for i in base..base + hw {
                        let xhat = (xs[i].to_f64() - m) * is;
                        dx[i] = T::from_f64(
                            gamma_is * (gd[i].to_f64() - mean_dy - xhat * mean_dy_xhat),
                        );
                    }
                } else {
                    for i in base..base + hw {
                        dx[i] = T::from_f64(gamma_is * gd[i].to_f64());
                    }
                }
            }
        }
        add_grad(head, x, &dx);
    }
    if head[gamma.0].requires_grad {
        let dg: Vec<T> = sum_dy_xhat.iter().map(|&v| T::from_f64(v)).collect();
        add_grad(head, gamma, &dg);
    }
    if head[beta.0].requires_grad {
        let db: Vec<T> = sum_dy.iter().map(|&v| T::from_f64(v)).collect();
        add_grad(head, beta, &db);
    }
}
