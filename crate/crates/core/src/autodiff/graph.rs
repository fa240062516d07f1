use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, BinaryKind, Op, UnaryKind};
use crate::error::{Error, Result};
use crate::par::ExecPolicy;
use crate::ssm::ScanEngine;
use crate::tensor::kernels::{self, Conv2dGeom, PoolKind};
use crate::tensor::{numel, Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op<T>,
    pub(super) requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Batch-norm mode: batch statistics, or frozen running statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

pub struct Graph<T: Scalar> {
    id: u64,
    pub(super) nodes: Vec<Node<T>>,
    policy: ExecPolicy,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new(ExecPolicy::default())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(policy: ExecPolicy) -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            policy,
        }
    }

    pub fn policy(&self) -> ExecPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    // ---------------------------------------------------------------- algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k, n) = kernels::matmul_dims(va.shape(), vb.shape())?;
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(va.data(), vb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a: ia, b: ib }))
    }

    /// `x [.., k] · w [k, n] (+ b [n])` over any number of leading axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().ok_or_else(|| Error::invalid("affine map of a scalar"))?;
        let n = match self.shape(w) {
            [_, n] => *n,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "affine",
                    lhs: xs.clone(),
                    rhs: other.to_vec(),
                })
            }
        };
        let rows = numel(&xs) / k.max(1);
        let flat = self.reshape(x, &[rows, k])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out = xs;
        *out.last_mut().unwrap() = n;
        self.reshape(y, &out)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let out_shape = ops::broadcast_shape(kind.name(), va.shape(), vb.shape())?;
        let n = numel(&out_shape);
        let (pa, pb) = (va.len(), vb.len());
        let (da, db) = (va.data(), vb.data());
        let out: Vec<T> = (0..n).map(|i| kind.apply(da[i % pa], db[i % pb])).collect();
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Binary { kind, a: ia, b: ib }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise maximum; ties send the gradient to the left operand.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| kind.apply(v));
        Ok(self.push(out, Op::Unary { kind, a: ia }))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v * k);
        Ok(self.push(out, Op::Scale { a: ia, k }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: T = self.nodes[ia].value.data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: ia }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean { a: ia }))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let shape = v.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(format!("mean_axis: bad axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = ops::split_axis(shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let scale = T::one() / T::of(len as f64);
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= scale);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MeanAxis { a: ia, axis }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape { a: ia }))
    }

    /// `out[i] = a[index[i]]` with the given output shape.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        if numel(shape) != index.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out: Vec<T> = index.iter().map(|&i| src.data()[i]).collect();
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Gather { a: ia, index }))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let lead = numel(&shape[..r - 2]);
        let mut index = Vec::with_capacity(numel(&shape));
        for b in 0..lead {
            for j in 0..cols {
                for i in 0..rows {
                    index.push(b * rows * cols + i * cols + j);
                }
            }
        }
        let mut out_shape = shape;
        out_shape.swap(r - 2, r - 1);
        self.gather(a, index, &out_shape)
    }

    /// Reverse the order along `axis`.
    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("flip: bad axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = ops::split_axis(&shape, axis);
        let mut index = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for l in 0..len {
                let src = len - 1 - l;
                for i in 0..inner {
                    index.push((o * len + src) * inner + i);
                }
            }
        }
        self.gather(a, index, &shape)
    }

    /// Repeat `a` along new or size-1 leading axes to reach `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let out_shape = ops::broadcast_shape("broadcast_to", shape, src.shape())?;
        if out_shape != shape {
            return Err(Error::Broadcast {
                op: "broadcast_to",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let p = src.len();
        let out: Vec<T> = (0..numel(shape)).map(|i| src.data()[i % p]).collect();
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::BroadcastTo { a: ia }))
    }

    // ----------------------------------------------------------- convolution

    /// Cross-correlation of `[C,H,W]` or `[B,C,H,W]` with `[C_out,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[ix].value.shape().to_vec();
        let geom = Conv2dGeom::new(&xs, self.nodes[iw].value.shape(), stride, pad)?;
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [geom.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geom.c_out],
                    rhs: self.nodes[ib].value.shape().to_vec(),
                });
            }
        }
        let out = kernels::conv2d_direct(
            self.policy,
            &geom,
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
        );
        let shape = if xs.len() == 3 {
            vec![geom.c_out, geom.out_h(), geom.out_w()]
        } else {
            vec![geom.batch, geom.c_out, geom.out_h(), geom.out_w()]
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
            },
        ))
    }

    /// Cross-correlation along the sequence axis of `[D,N]` or `[B,D,N]`
    /// with weights `[D_out,D,k]`, stride 1.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (lead, d, n) = match xs[..] {
            [d, n] => (None, d, n),
            [b, d, n] => (Some(b), d, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        let [d_out, wd, k] = ws[..] else {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        };
        if wd != d {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: xs,
                rhs: ws,
            });
        }
        if k == 0 || k > n + 2 * pad {
            return Err(Error::KernelTooLarge {
                op: "conv1d",
                kernel: vec![k],
                input: vec![n + 2 * pad],
            });
        }
        let x4 = self.reshape(x, &[lead.unwrap_or(1), d, 1, n])?;
        let w4 = self.reshape(w, &[d_out, d, 1, k])?;
        let y = self.conv2d(x4, w4, bias, 1, (0, pad))?;
        let n_out = n + 2 * pad - k + 1;
        match lead {
            Some(b) => self.reshape(y, &[b, d_out, n_out]),
            None => self.reshape(y, &[d_out, n_out]),
        }
    }

    /// Non-overlapping pooling over the last two axes (stride == kernel).
    pub fn pool2d(&mut self, x: Var, kh: usize, kw: usize, kind: PoolKind) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        let r = shape.len();
        if r < 2 || kh == 0 || kw == 0 || kh > shape[r - 2] || kw > shape[r - 1] {
            return Err(Error::KernelTooLarge {
                op: "pool2d",
                kernel: vec![kh, kw],
                input: shape,
            });
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = numel(&shape[..r - 2]);
        let (vals, argmax) = kernels::pool2d(
            self.policy,
            self.nodes[ix].value.data(),
            planes,
            h,
            w,
            kh,
            kw,
            kind,
        );
        let mut out_shape = shape;
        out_shape[r - 2] = h / kh;
        out_shape[r - 1] = w / kw;
        Ok(self.push(
            Tensor::new(out_shape, vals)?,
            Op::Pool {
                x: ix,
                kh,
                kw,
                kind,
                argmax,
                planes,
                h,
                w,
            },
        ))
    }

    // --------------------------------------------------------- normalization

    /// Per-channel batch normalization of `[B,C,H,W]` (or `[C,H,W]`).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let shape = self.nodes[ix].value.shape().to_vec();
        let (batch, c, spatial) = match shape[..] {
            [c, h, w] => (1, c, h * w),
            [b, c, h, w] => (b, c, h * w),
            _ => {
                return Err(Error::invalid(format!(
                    "batch_norm expects [B,C,H,W], got {shape:?}"
                )))
            }
        };
        for i in [ig, ib] {
            if self.nodes[i].value.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[i].value.shape().to_vec(),
                });
            }
        }
        let xd = self.nodes[ix].value.data();
        let count = batch * spatial;
        let (mean, var_biased, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += xd[(b * c + ch) * spatial..(b * c + ch + 1) * spatial]
                            .iter()
                            .copied()
                            .sum();
                    }
                    let m = s / T::of(count as f64);
                    let mut q = T::zero();
                    for b in 0..batch {
                        for &v in &xd[(b * c + ch) * spatial..(b * c + ch + 1) * spatial] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / T::of(count as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| {
                        if count > 1 {
                            v * T::of(count as f64 / (count - 1) as f64)
                        } else {
                            v
                        }
                    })
                    .collect();
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::invalid("batch_norm running stats length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let gd = self.nodes[ig].value.data();
        let bd = self.nodes[ib].value.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gd[ch] + bd[ch];
                }
            }
        }
        let var_out = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
                train: matches!(mode, NormMode::Train),
                batch,
                channels: c,
                spatial,
            },
        );
        Ok((var_out, stats))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let shape = self.nodes[ix].value.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
        for i in [ig, ib] {
            if self.nodes[i].value.shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[i].value.shape().to_vec(),
                });
            }
        }
        let xd = self.nodes[ix].value.data();
        let gd = self.nodes[ig].value.data();
        let bd = self.nodes[ib].value.data();
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() / dn;
            let v = row.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / dn;
            let is = (v + eps).sqrt().recip();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - m) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
                dim: d,
            },
        ))
    }

    // -------------------------------------------------------------------- ssm

    /// Zero-order-hold state transition `exp(Δ·A)`:
    /// `delta [..., dim]`, `a [dim, dim_s]` -> `[..., dim, dim_s]`.
    pub fn zoh_transition(&mut self, delta: Var, a: Var) -> Result<Var> {
        let (idl, ia) = (self.idx(delta)?, self.idx(a)?);
        let (dims, ds) = ops::zoh_dims(
            self.nodes[idl].value.shape(),
            self.nodes[ia].value.shape(),
        )?;
        ops::check_negative(self.nodes[ia].value.data())?;
        let out = crate::ssm::discretize_transition(
            self.nodes[idl].value.data(),
            self.nodes[ia].value.data(),
            dims,
            ds,
        );
        let mut shape = self.nodes[idl].value.shape().to_vec();
        shape.push(ds);
        Ok(self.push(Tensor::new(shape, out)?, Op::ZohA { delta: idl, a: ia, ds }))
    }

    /// Discretized input matrix: exact ZOH `((exp(Δa) − 1)/a)·b`, or Euler `Δ·b`.
    /// `delta [..., dim]`, `a [dim, dim_s]`, `b [..., dim_s]` -> `[..., dim, dim_s]`.
    pub fn zoh_input(
        &mut self,
        delta: Var,
        a: Var,
        b: Var,
        method: crate::ssm::Discretization,
    ) -> Result<Var> {
        let (idl, ia, ib) = (self.idx(delta)?, self.idx(a)?, self.idx(b)?);
        let dshape = self.nodes[idl].value.shape().to_vec();
        let (dims, ds) = ops::zoh_dims(&dshape, self.nodes[ia].value.shape())?;
        let bshape = self.nodes[ib].value.shape();
        let lead = &dshape[..dshape.len() - 1];
        if bshape.len() != dshape.len() || &bshape[..lead.len()] != lead || bshape[lead.len()] != ds {
            return Err(Error::ShapeMismatch {
                op: "zoh_input",
                lhs: dshape.clone(),
                rhs: bshape.to_vec(),
            });
        }
        ops::check_negative(self.nodes[ia].value.data())?;
        let out = crate::ssm::discretize_input(
            self.nodes[idl].value.data(),
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            dims,
            ds,
            method,
        );
        let mut shape = dshape;
        shape.push(ds);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ZohB {
                delta: idl,
                a: ia,
                b: ib,
                ds,
                method,
            },
        ))
    }

    /// Selective scan: `h[n] = Ā[n]⊙h[n−1] + B̄[n]·x[n]`, `y[n] = C[n]·h[n] + D⊙x[n]`.
    ///
    /// `x [B,N,dim]` (or `[N,dim]`), `abar`/`bbar [B,N,dim,dim_s]`,
    /// `c [B,N,dim_s]`, `d [dim]`.
    pub fn scan(
        &mut self,
        x: Var,
        abar: Var,
        bbar: Var,
        c: Var,
        d: Var,
        engine: ScanEngine,
    ) -> Result<Var> {
        let (ix, ia, ib) = (self.idx(x)?, self.idx(abar)?, self.idx(bbar)?);
        let (ic, id) = (self.idx(c)?, self.idx(d)?);
        let dims = crate::ssm::ScanDims::infer(
            self.nodes[ix].value.shape(),
            self.nodes[ia].value.shape(),
            self.nodes[ib].value.shape(),
            self.nodes[ic].value.shape(),
            self.nodes[id].value.shape(),
        )?;
        let (y, h) = crate::ssm::scan_forward(
            self.policy,
            engine,
            &dims,
            self.nodes[ix].value.data(),
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            self.nodes[ic].value.data(),
            self.nodes[id].value.data(),
        )?;
        let shape = self.nodes[ix].value.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Scan {
                x: ix,
                abar: ia,
                bbar: ib,
                c: ic,
                d: id,
                h,
                dims,
            },
        ))
    }

    // ------------------------------------------------------------------ loss

    /// Mean cross-entropy of `logits [B,Q]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let v = &self.nodes[il].value;
        let [b, q] = v.shape()[..] else {
            return Err(Error::invalid(format!(
                "cross_entropy expects [B,Q] logits, got {:?}",
                v.shape()
            )));
        };
        if labels.len() != b || b == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= q) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: q,
            });
        }
        let (loss, probs) = crate::train::loss::softmax_cross_entropy(v.data(), labels, q);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
                classes: q,
            },
        ))
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`; returns the gradient of every
    /// node that depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[il].requires_grad {
            grads[il] = Some(vec![T::one()]);
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            ops::propagate(self, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        let g = self.grads.get(v.index)?.as_ref()?;
        Tensor::new(self.shapes[v.index].clone(), g.clone()).ok()
    }

    /// Gradient for `v`, or zeros of its shape if nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.index].clone()))
    }
}
