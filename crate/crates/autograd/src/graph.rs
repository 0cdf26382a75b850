//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes only
//! remember how they were produced when at least one input needs a gradient,
//! so frozen sub-networks cost nothing extra in the backward sweep.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::gemm::{gemm, MatRef};
use crate::kernels::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dSpec { stride, pad }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        batch: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    RepeatLeading {
        x: Var,
        times: usize,
    },
    Resize {
        x: Var,
    },
    PairFuse {
        g: Var,
        l: Var,
        w: Var,
        b: Var,
    },
    WeightedMean {
        s: Var,
        w: Var,
    },
    MseLoss {
        pred: Var,
        target: Vec<f32>,
    },
    SumAll(Var),
}

struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Minimum weight mass accepted by [`Graph::weighted_mean`].
pub const WEIGHT_SUM_EPS: f64 = 1e-8;

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn erf(x: f32) -> f32 {
    libm::erff(x)
}

const INV_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

impl<'s> Graph<'s> {
    /// A graph that records ops for differentiation.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            grad_enabled: true,
            param_vars: HashMap::new(),
        }
    }

    /// A graph for inference only; nothing requires gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.requires_grad(*v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let requires_grad = self.grad_enabled && self.store.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn zip_map(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(a);
        Tensor::from_fn(t.shape(), |i| f(t.data()[i]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b` is repeated over the leading axes of `a`
    /// (`b`'s shape, ignoring leading ones, must be a suffix of `a`'s).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let trimmed: Vec<usize> = tb.shape().iter().copied().skip_while(|d| *d == 1).collect();
        if !ta.shape().ends_with(&trimmed) || tb.numel() == 0 {
            return Err(TensorError::shape("add_tiled", ta.shape(), tb.shape()));
        }
        let bd = tb.data();
        let n = bd.len();
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + bd[i % n]);
        Ok(self.push(out, Op::AddTiled(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 0.5 * x * (1.0 + erf(x * INV_SQRT_2)));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// `x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.dims() != 2 || tx.dims() == 0 || tx.shape()[tx.dims() - 1] != tw.dim(1) {
            return Err(TensorError::shape("linear", tw.shape(), tx.shape()));
        }
        let (out_f, in_f) = (tw.dim(0), tw.dim(1));
        let rows = tx.numel() / in_f;
        let mut out = vec![0.0; rows * out_f];
        gemm(
            MatRef::new(tx.data(), rows, in_f),
            MatRef::new(tw.data(), out_f, in_f).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != out_f {
                return Err(TensorError::shape("linear bias", &[out_f], tb.shape()));
            }
            for row in out.chunks_mut(out_f) {
                for (o, bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched matmul of `[B, m, k] x [B, k, n]`; `ta`/`tb` read the stored
    /// operand as transposed in its last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != 3 || vb.dims() != 3 || va.dim(0) != vb.dim(0) {
            return Err(TensorError::shape("bmm", va.shape(), vb.shape()));
        }
        let batch = va.dim(0);
        let (m, k) = if ta { (va.dim(2), va.dim(1)) } else { (va.dim(1), va.dim(2)) };
        let (k2, n) = if tb { (vb.dim(2), vb.dim(1)) } else { (vb.dim(1), vb.dim(2)) };
        if k != k2 {
            return Err(TensorError::shape("bmm", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; batch * m * n];
        let (sa, sb) = (m * k, k * n);
        for i in 0..batch {
            let am = operand(&va.data()[i * sa..(i + 1) * sa], m, k, ta);
            let bm = operand(&vb.data()[i * sb..(i + 1) * sb], k, n, tb);
            gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let out = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, &[a, b]))
    }

    /// 2-D convolution of `[N, C, H, W]` with weights `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.dims() != 4 || tw.dims() != 4 || tx.dim(1) != tw.dim(1) {
            return Err(TensorError::shape("conv2d", tw.shape(), tx.shape()));
        }
        let geom = ConvGeometry {
            channels: tx.dim(1),
            height: tx.dim(2),
            width: tx.dim(3),
            kernel_h: tw.dim(2),
            kernel_w: tw.dim(3),
            stride: spec.stride.max(1),
            pad: spec.pad,
        };
        if geom.height + 2 * geom.pad < geom.kernel_h || geom.width + 2 * geom.pad < geom.kernel_w {
            return Err(TensorError::invalid("conv2d", "kernel larger than padded input"));
        }
        let (batch, out_c) = (tx.dim(0), tw.dim(0));
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let npos = oh * ow;
        let krows = geom.col_rows();
        let in_sz = geom.channels * geom.height * geom.width;
        let mut out = vec![0.0; batch * out_c * npos];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; krows * npos] };
        let wmat = MatRef::new(tw.data(), out_c, krows);
        for n in 0..batch {
            let src = &tx.data()[n * in_sz..(n + 1) * in_sz];
            let colm = if geom.is_pointwise() {
                MatRef::new(src, krows, npos)
            } else {
                kernels::im2col(src, &geom, &mut cols);
                MatRef::new(&cols, krows, npos)
            };
            gemm(wmat, colm, &mut out[n * out_c * npos..(n + 1) * out_c * npos], false);
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != out_c {
                return Err(TensorError::shape("conv2d bias", &[out_c], tb.shape()));
            }
            for (i, plane) in out.chunks_mut(npos).enumerate() {
                let bv = tb.data()[i % out_c];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(&[batch, out_c, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, batch }, &inputs))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.dims() != 4 {
            return Err(TensorError::invalid("max_pool2d", "expected [N, C, H, W]"));
        }
        let geom = ConvGeometry {
            channels: tx.dim(1),
            height: tx.dim(2),
            width: tx.dim(3),
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
        };
        let batch = tx.dim(0);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let in_sz = geom.channels * geom.height * geom.width;
        let out_sz = geom.channels * oh * ow;
        let mut out = vec![0.0; batch * out_sz];
        let mut argmax = vec![0u32; batch * out_sz];
        for n in 0..batch {
            kernels::max_pool(
                &tx.data()[n * in_sz..(n + 1) * in_sz],
                &geom,
                &mut out[n * out_sz..(n + 1) * out_sz],
                &mut argmax[n * out_sz..(n + 1) * out_sz],
            );
            // argmax is per-image; rebase to the batch
            for a in &mut argmax[n * out_sz..(n + 1) * out_sz] {
                *a += (n * in_sz) as u32;
            }
        }
        let out = Tensor::new(&[batch, geom.channels, oh, ow], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Inference-mode batch norm over axis 1 using stored running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        eps: f32,
    ) -> Result<Var> {
        let tx = self.value(x);
        if tx.dims() < 2 {
            return Err(TensorError::invalid("batch_norm", "expected [N, C, ...]"));
        }
        let c = tx.dim(1);
        for v in [gamma, beta, running_mean, running_var] {
            if self.value(v).numel() != c {
                return Err(TensorError::shape("batch_norm", &[c], self.value(v).shape()));
            }
        }
        let mean = self.value(running_mean).data().to_vec();
        let inv_std: Vec<f32> = self
            .value(running_var)
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let inner: usize = tx.shape()[2..].iter().product();
        let out = Tensor::from_fn(tx.shape(), |i| {
            let ch = (i / inner) % c;
            (tx.data()[i] - mean[ch]) * inv_std[ch] * gd[ch] + bd[ch]
        });
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        if gd.len() != d || bd.len() != d {
            return Err(TensorError::shape("layer_norm", &[d], self.value(gamma).shape()));
        }
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * gd[j] + bd[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstd }, &[x, gamma, beta]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != tx.dims() || check.iter().enumerate().any(|(i, p)| i != *p) {
            return Err(TensorError::invalid("permute", format!("bad permutation {perm:?}")));
        }
        let out = permute_tensor(tx, perm);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).dims();
        if d < 2 {
            return Err(TensorError::invalid("transpose_last", "need at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..d).collect();
        perm.swap(d - 2, d - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?);
        if axis >= first.dims() {
            return Err(TensorError::invalid("concat", "axis out of range"));
        }
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for v in inputs {
            let t = self.value(*v);
            let ok = t.dims() == shape.len()
                && t.shape().iter().zip(&shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::shape("concat", &shape, t.shape()));
            }
            total += t.dim(axis);
        }
        shape[axis] = total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.dim(axis) * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.dims() || start + len > tx.dim(axis) {
            return Err(TensorError::invalid("narrow", "range out of bounds"));
        }
        let mut shape = tx.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Repeat the whole tensor `times` over its leading axis.
    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.dims() == 0 {
            return Err(TensorError::invalid("repeat_leading", "scalar input"));
        }
        let mut shape = tx.shape().to_vec();
        shape[0] *= times;
        let mut out = Vec::with_capacity(tx.numel() * times);
        for _ in 0..times {
            out.extend_from_slice(tx.data());
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::RepeatLeading { x, times }, &[x]))
    }

    /// Bilinear resize of `[N, C, H, W]` (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.dims() != 4 {
            return Err(TensorError::invalid("resize_bilinear", "expected [N, C, H, W]"));
        }
        let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let data = kernels::resize_bilinear_planar(tx.data(), n * c, h, w, out_h, out_w);
        let out = Tensor::new(&[n, c, out_h, out_w], data)?;
        Ok(self.push(out, Op::Resize { x }, &[x]))
    }

    /// `w[k,0] * g + w[k,1] * l + b[k]` with `k` the channel (axis 1) index
    /// when `w` has one row per channel, or `0` when it has a single row.
    pub fn pair_fuse(&mut self, g: Var, l: Var, w: Var, b: Var) -> Result<Var> {
        let (tg, tl, tw, tb) = (self.value(g), self.value(l), self.value(w), self.value(b));
        same_shape("pair_fuse", tg, tl)?;
        if tg.dims() < 2 {
            return Err(TensorError::invalid("pair_fuse", "expected [N, C, ...]"));
        }
        let c = tg.dim(1);
        let rows = tw.numel() / 2;
        if tw.numel() % 2 != 0 || !(rows == 1 || rows == c) || tb.numel() != rows {
            return Err(TensorError::shape("pair_fuse", &[c, 2], tw.shape()));
        }
        let inner: usize = tg.shape()[2..].iter().product();
        let (wd, bd) = (tw.data(), tb.data());
        let out = Tensor::from_fn(tg.shape(), |i| {
            let k = if rows == 1 { 0 } else { (i / inner) % c };
            wd[2 * k] * tg.data()[i] + wd[2 * k + 1] * tl.data()[i] + bd[k]
        });
        Ok(self.push(out, Op::PairFuse { g, l, w, b }, &[g, l, w, b]))
    }

    /// Per-sample weighted mean `sum(s * w) / sum(w)` over all but the
    /// leading axis.
    pub fn weighted_mean(&mut self, s: Var, w: Var) -> Result<Var> {
        let (ts, tw) = (self.value(s), self.value(w));
        same_shape("weighted_mean", ts, tw)?;
        if ts.dims() == 0 {
            return Err(TensorError::invalid("weighted_mean", "scalar input"));
        }
        let n = ts.dim(0);
        let inner = ts.numel() / n.max(1);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (sv, wv) = (
                &ts.data()[i * inner..(i + 1) * inner],
                &tw.data()[i * inner..(i + 1) * inner],
            );
            let (num, den) = weighted_sums(sv, wv);
            if den <= WEIGHT_SUM_EPS {
                return Err(TensorError::DegenerateWeights {
                    sum: den,
                    eps: WEIGHT_SUM_EPS,
                });
            }
            out.push((num / den) as f32);
        }
        let out = Tensor::new(&[n], out)?;
        Ok(self.push(out, Op::WeightedMean { s, w }, &[s, w]))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.numel() != target.len() || target.is_empty() {
            return Err(TensorError::shape("mse_loss", tp.shape(), &[target.len()]));
        }
        let loss = tp
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| ((p - t) as f64).powi(2))
            .sum::<f64>()
            / target.len() as f64;
        let out = Tensor::scalar(loss as f32);
        Ok(self.push(
            out,
            Op::MseLoss {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| *v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::SumAll(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Gradients::default();
        if !self.requires_grad(loss) {
            return Ok(result);
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Param(id) => {
                    result.params.insert(*id, g);
                }
                Op::Leaf => {
                    result.leaves.insert(Var(idx), g);
                }
                op => self.backward_op(op, Var(idx), &g, &mut grads)?,
            }
        }
        Ok(result)
    }

    /// Gradient buffer for `v`, or `None` when `v` is not differentiable.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f32]> {
        if !self.requires_grad(v) {
            return None;
        }
        let shape = self.value(v).shape();
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl Fn(usize) -> f32) {
        if let Some(dst) = self.slot(grads, v) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += f(i);
            }
        }
    }

    fn backward_op(&self, op: &Op, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| gd[i]);
                self.accumulate(grads, *b, |i| gd[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| gd[i]);
                self.accumulate(grads, *b, |i| -gd[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |i| gd[i] * vb[i]);
                self.accumulate(grads, *b, |i| gd[i] * va[i]);
            }
            Op::AddTiled(a, b) => {
                self.accumulate(grads, *a, |i| gd[i]);
                if let Some(dst) = self.slot(grads, *b) {
                    let n = dst.len();
                    for (i, v) in gd.iter().enumerate() {
                        dst[i % n] += v;
                    }
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |i| gd[i] * s),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |i| if va[i] > 0.0 { gd[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = self.value(out).data();
                self.accumulate(grads, *a, |i| gd[i] * y[i] * (1.0 - y[i]));
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |i| {
                    let x = va[i];
                    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
                    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                    gd[i] * (cdf + x * pdf)
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (out_f, in_f) = (tw.dim(0), tw.dim(1));
                let rows = tx.numel() / in_f;
                let gm = MatRef::new(gd, rows, out_f);
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(gm, MatRef::new(tw.data(), out_f, in_f), dx, true);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(gm.t(), MatRef::new(tx.data(), rows, in_f), dw, true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in gd.chunks(out_f) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let batch = va.dim(0);
                let (m, k) = if *ta { (va.dim(2), va.dim(1)) } else { (va.dim(1), va.dim(2)) };
                let n = if *tb { vb.dim(1) } else { vb.dim(2) };
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..batch {
                        let gm = MatRef::new(&gd[i * sc..(i + 1) * sc], m, n);
                        let bm = operand(&vb.data()[i * sb..(i + 1) * sb], k, n, *tb);
                        let dst = &mut da[i * sa..(i + 1) * sa];
                        if *ta {
                            gemm(bm, gm.t(), dst, true);
                        } else {
                            gemm(gm, bm.t(), dst, true);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let gm = MatRef::new(&gd[i * sc..(i + 1) * sc], m, n);
                        let am = operand(&va.data()[i * sa..(i + 1) * sa], m, k, *ta);
                        let dst = &mut db[i * sb..(i + 1) * sb];
                        if *tb {
                            gemm(gm.t(), am, dst, true);
                        } else {
                            gemm(am.t(), gm, dst, true);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let out_c = tw.dim(0);
                let npos = geom.col_cols();
                let krows = geom.col_rows();
                let in_sz = geom.channels * geom.height * geom.width;
                let need_w = self.requires_grad(*w);
                let need_x = self.requires_grad(*x);
                let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { krows * npos }];
                if need_w {
                    let dw = self.slot(grads, *w).unwrap();
                    for n in 0..*batch {
                        let src = &tx.data()[n * in_sz..(n + 1) * in_sz];
                        let colm = if geom.is_pointwise() {
                            MatRef::new(src, krows, npos)
                        } else {
                            kernels::im2col(src, geom, &mut cols);
                            MatRef::new(&cols, krows, npos)
                        };
                        let gm = MatRef::new(&gd[n * out_c * npos..(n + 1) * out_c * npos], out_c, npos);
                        gemm(gm, colm.t(), dw, true);
                    }
                }
                if need_x {
                    let wm = MatRef::new(tw.data(), out_c, krows);
                    let dx = self.slot(grads, *x).unwrap();
                    for n in 0..*batch {
                        let gm = MatRef::new(&gd[n * out_c * npos..(n + 1) * out_c * npos], out_c, npos);
                        let dst = &mut dx[n * in_sz..(n + 1) * in_sz];
                        if geom.is_pointwise() {
                            gemm(wm.t(), gm, dst, true);
                        } else {
                            gemm(wm.t(), gm, &mut cols, false);
                            kernels::col2im(&cols, geom, dst);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for (i, plane) in gd.chunks(npos).enumerate() {
                            db[i % out_c] += plane.iter().sum::<f32>();
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, a) in argmax.iter().enumerate() {
                        dx[*a as usize] += gd[i];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let tx = self.value(*x);
                let c = tx.dim(1);
                let inner: usize = tx.shape()[2..].iter().product();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, |i| {
                    let ch = (i / inner) % c;
                    gd[i] * inv_std[ch] * gam[ch]
                });
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (i, v) in gd.iter().enumerate() {
                        let ch = (i / inner) % c;
                        dg[ch] += v * (tx.data()[i] - mean[ch]) * inv_std[ch];
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for (i, v) in gd.iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let tx = self.value(*x);
                let d = *tx.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let xhat = |r: usize, row: &[f32]| -> Vec<f32> {
                    let mean = row.iter().sum::<f32>() / d as f32;
                    row.iter().map(|v| (v - mean) * rstd[r]).collect()
                };
                let need_x = self.requires_grad(*x);
                let mut dgam = vec![0.0; d];
                let mut dbet = vec![0.0; d];
                let mut dx_all = if need_x { vec![0.0; tx.numel()] } else { Vec::new() };
                for (r, rs) in rstd.iter().enumerate() {
                    let row = &tx.data()[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let xh = xhat(r, row);
                    for j in 0..d {
                        dgam[j] += gr[j] * xh[j];
                        dbet[j] += gr[j];
                    }
                    if need_x {
                        let dxh: Vec<f32> = (0..d).map(|j| gr[j] * gam[j]).collect();
                        let m1 = dxh.iter().sum::<f32>() / d as f32;
                        let m2 = dxh.iter().zip(&xh).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        for j in 0..d {
                            dx_all[r * d + j] = rs * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, |i| dx_all[i]);
                }
                self.accumulate(grads, *gamma, |i| dgam[i]);
                self.accumulate(grads, *beta, |i| dbet[i]);
            }
            Op::Softmax(x) => {
                let y = self.value(out).data();
                let d = *self.value(out).shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, |i| dx[i]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |i| gd[i]),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, p) in perm.iter().enumerate() {
                    inv[*p] = i;
                }
                let back = permute_tensor(g, &inv);
                let bd = back.data();
                self.accumulate(grads, *x, |i| bd[i]);
            }
            Op::Concat { inputs, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.value(*v).dim(*axis) * inner;
                    if let Some(dst) = self.slot(grads, *v) {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + len];
                            for (d, s) in dst[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full_shape = self.value(*x).shape().to_vec();
                let inner: usize = full_shape[axis + 1..].iter().product();
                let full = full_shape[*axis] * inner;
                let len = g.dim(*axis) * inner;
                if let Some(dst) = self.slot(grads, *x) {
                    for (o, chunk) in gd.chunks(len).enumerate() {
                        let base = o * full + start * inner;
                        for (d, s) in dst[base..base + len].iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
            }
            Op::RepeatLeading { x, times } => {
                if let Some(dst) = self.slot(grads, *x) {
                    let n = dst.len();
                    for t in 0..*times {
                        for (d, s) in dst.iter_mut().zip(&gd[t * n..(t + 1) * n]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Resize { x } => {
                let tx = self.value(*x);
                let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
                if let Some(dst) = self.slot(grads, *x) {
                    kernels::resize_bilinear_planar_backward(gd, n * c, h, w, g.dim(2), g.dim(3), dst);
                }
            }
            Op::PairFuse { g: gv, l, w, b } => {
                let (tg, tl, tw) = (self.value(*gv), self.value(*l), self.value(*w));
                let c = tg.dim(1);
                let inner: usize = tg.shape()[2..].iter().product();
                let rows = tw.numel() / 2;
                let wd = tw.data();
                let row_of = |i: usize| if rows == 1 { 0 } else { (i / inner) % c };
                self.accumulate(grads, *gv, |i| gd[i] * wd[2 * row_of(i)]);
                self.accumulate(grads, *l, |i| gd[i] * wd[2 * row_of(i) + 1]);
                if let Some(dw) = self.slot(grads, *w) {
                    for (i, v) in gd.iter().enumerate() {
                        let k = row_of(i);
                        dw[2 * k] += v * tg.data()[i];
                        dw[2 * k + 1] += v * tl.data()[i];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (i, v) in gd.iter().enumerate() {
                        db[row_of(i)] += v;
                    }
                }
            }
            Op::WeightedMean { s, w } => {
                let (ts, tw) = (self.value(*s), self.value(*w));
                let means = self.value(out).data();
                let n = ts.dim(0);
                let inner = ts.numel() / n;
                let dens: Vec<f32> = tw
                    .data()
                    .chunks(inner)
                    .map(|row| row.iter().map(|v| *v as f64).sum::<f64>() as f32)
                    .collect();
                self.accumulate(grads, *s, |i| {
                    let r = i / inner;
                    gd[r] * tw.data()[i] / dens[r]
                });
                self.accumulate(grads, *w, |i| {
                    let r = i / inner;
                    gd[r] * (ts.data()[i] - means[r]) / dens[r]
                });
            }
            Op::MseLoss { pred, target } => {
                let p = self.value(*pred).data();
                let scale = 2.0 * gd[0] / target.len() as f32;
                self.accumulate(grads, *pred, |i| scale * (p[i] - target[i]));
            }
            Op::SumAll(x) => self.accumulate(grads, *x, |_| gd[0]),
        }
        Ok(())
    }
}

/// `(sum(s*w), sum(w))` accumulated in f64.
fn weighted_sums(s: &[f32], w: &[f32]) -> (f64, f64) {
    let den: f64 = w.iter().map(|v| *v as f64).sum();
    let num: f64 = s.iter().zip(w).map(|(a, b)| *a as f64 * *b as f64).sum();
    (num, den)
}

fn operand(data: &[f32], rows: usize, cols: usize, transposed: bool) -> MatRef<'_> {
    if transposed {
        MatRef::new(data, cols, rows).t()
    } else {
        MatRef::new(data, rows, cols)
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|p| in_shape[*p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|p| in_strides[*p]).collect();
    let numel = t.numel();
    let mut out = Vec::with_capacity(numel);
    let nd = out_shape.len();
    if nd == 0 {
        return t.clone();
    }
    // iterate the output in order, tracking the source offset incrementally
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let last = nd - 1;
    let data = t.data();
    while out.len() < numel {
        let run = out_shape[last];
        let s = src_strides[last];
        for j in 0..run {
            out.push(data[offset + j * s]);
        }
        // carry into the higher axes
        let mut axis = last;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves element count")
}
