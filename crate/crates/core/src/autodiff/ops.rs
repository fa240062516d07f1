use super::graph::{Graph, Node};
use crate::error::{Error, Result};
use crate::ssm::{self, Discretization, ScanDims};
use crate::tensor::kernels::{self, Conv2dGeom, PoolKind};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinaryKind {
    pub fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Max => "max",
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Partial derivatives `(∂/∂a, ∂/∂b)`.
    #[inline]
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        match self {
            BinaryKind::Add => (T::one(), T::one()),
            BinaryKind::Sub => (T::one(), -T::one()),
            BinaryKind::Mul => (b, a),
            BinaryKind::Max => {
                if a >= b {
                    (T::one(), T::zero())
                } else {
                    (T::zero(), T::one())
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Neg,
    Silu,
    Softplus,
}

/// Above this input softplus returns its argument (the correction is < 1e-13).
pub const SOFTPLUS_THRESHOLD: f64 = 30.0;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(SOFTPLUS_THRESHOLD) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

impl UnaryKind {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Neg => -x,
            UnaryKind::Silu => silu(x),
            UnaryKind::Softplus => softplus(x),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Exp => y,
            UnaryKind::Log => x.recip(),
            UnaryKind::Neg => -T::one(),
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            UnaryKind::Softplus => {
                if x > T::of(SOFTPLUS_THRESHOLD) {
                    T::one()
                } else {
                    sigmoid(x)
                }
            }
        }
    }
}

pub(super) enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Scale {
        a: usize,
        k: T,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Gather {
        a: usize,
        index: Vec<usize>,
    },
    BroadcastTo {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: Conv2dGeom,
    },
    Pool {
        x: usize,
        kh: usize,
        kw: usize,
        kind: PoolKind,
        argmax: Vec<usize>,
        planes: usize,
        h: usize,
        w: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dim: usize,
    },
    ZohA {
        delta: usize,
        a: usize,
        ds: usize,
    },
    ZohB {
        delta: usize,
        a: usize,
        b: usize,
        ds: usize,
        method: Discretization,
    },
    Scan {
        x: usize,
        abar: usize,
        bbar: usize,
        c: usize,
        d: usize,
        h: Vec<T>,
        dims: ScanDims,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
}

impl<T> Op<T> {
    pub(super) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanAxis { a, .. }
            | Op::Reshape { a }
            | Op::Gather { a, .. }
            | Op::BroadcastTo { a } => vec![*a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Pool { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::ZohA { delta, a, .. } => vec![*delta, *a],
            Op::ZohB { delta, a, b, .. } => vec![*delta, *a, *b],
            Op::Scan {
                x, abar, bbar, c, d, ..
            } => vec![*x, *abar, *bbar, *c, *d],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Output shape for a binary op under leading-axis expansion: the smaller
/// operand, with leading size-1 axes stripped, must be a suffix of the larger.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let fits = |big: &[usize], small: &[usize]| {
        let first = small.iter().position(|&e| e != 1).unwrap_or(small.len());
        let core = &small[first..];
        small.len() <= big.len() && big.ends_with(core)
    };
    let (na, nb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    if na >= nb && a.len() >= b.len() && fits(a, b) {
        Ok(a.to_vec())
    } else if nb >= na && b.len() >= a.len() && fits(b, a) {
        Ok(b.to_vec())
    } else {
        Err(Error::Broadcast {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn zoh_dims(delta: &[usize], a: &[usize]) -> Result<(usize, usize)> {
    match (delta.last(), a) {
        (Some(&d), [ad, ds]) if d == *ad => Ok((d, *ds)),
        _ => Err(Error::ShapeMismatch {
            op: "discretize",
            lhs: delta.to_vec(),
            rhs: a.to_vec(),
        }),
    }
}

pub fn check_negative<T: Scalar>(a: &[T]) -> Result<()> {
    match a.iter().position(|&v| !(v < T::zero())) {
        Some(i) => Err(Error::invalid(format!(
            "discretize: A must be strictly negative, entry {i} is {}",
            a[i]
        ))),
        None => Ok(()),
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], idx: usize, g: Vec<T>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

pub(super) fn propagate<T: Scalar>(
    graph: &Graph<T>,
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let nodes = &graph.nodes;
    let policy = graph.policy();
    let req = |k: usize| nodes[k].requires_grad;
    let val = |k: usize| nodes[k].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            if req(*a) {
                let mut ga = vec![T::zero(); m * k];
                kernels::matmul_bt(g, val(*b), &mut ga, m, k, n);
                accumulate(nodes, grads, *a, ga);
            }
            if req(*b) {
                let mut gb = vec![T::zero(); k * n];
                kernels::matmul_at(val(*a), g, &mut gb, m, k, n);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Binary { kind, a, b } => {
            let (va, vb) = (val(*a), val(*b));
            let (pa, pb) = (va.len(), vb.len());
            let mut ga = vec![T::zero(); pa];
            let mut gb = vec![T::zero(); pb];
            for (j, &gv) in g.iter().enumerate() {
                let (da, db) = kind.partials(va[j % pa], vb[j % pb]);
                ga[j % pa] += gv * da;
                gb[j % pb] += gv * db;
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Unary { kind, a } => {
            let x = val(*a);
            let y = nodes[i].value.data();
            let ga = g
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Scale { a, k } => {
            accumulate(nodes, grads, *a, g.iter().map(|&v| v * *k).collect());
        }
        Op::Sum { a } => {
            accumulate(nodes, grads, *a, vec![g[0]; val(*a).len()]);
        }
        Op::Mean { a } => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![g[0] / T::of(n as f64); n]);
        }
        Op::MeanAxis { a, axis } => {
            let (outer, len, inner) = split_axis(nodes[*a].value.shape(), *axis);
            let scale = T::one() / T::of(len as f64);
            let mut ga = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for j in 0..inner {
                        ga[(o * len + l) * inner + j] = g[o * inner + j] * scale;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reshape { a } => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Gather { a, index } => {
            let mut ga = vec![T::zero(); val(*a).len()];
            for (&src, &gv) in index.iter().zip(g) {
                ga[src] += gv;
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::BroadcastTo { a } => {
            let p = val(*a).len();
            let mut ga = vec![T::zero(); p];
            for (j, &gv) in g.iter().enumerate() {
                ga[j % p] += gv;
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Conv2d { x, w, b, geom } => {
            let need_w = req(*w) || b.is_some_and(req);
            let (dx, dw, db) =
                kernels::conv2d_backward(policy, geom, val(*x), val(*w), g, req(*x), need_w);
            if req(*x) {
                accumulate(nodes, grads, *x, dx);
            }
            if need_w {
                accumulate(nodes, grads, *w, dw);
                if let Some(b) = b {
                    accumulate(nodes, grads, *b, db);
                }
            }
        }
        Op::Pool {
            x,
            kh,
            kw,
            kind,
            argmax,
            planes,
            h,
            w,
        } => {
            let mut gx = vec![T::zero(); planes * h * w];
            match kind {
                PoolKind::Max => {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
                PoolKind::Avg => {
                    let (oh, ow) = (h / kh, w / kw);
                    let scale = T::one() / T::of((kh * kw) as f64);
                    for p in 0..*planes {
                        for r in 0..oh {
                            for c in 0..ow {
                                let gv = g[(p * oh + r) * ow + c] * scale;
                                for a in 0..*kh {
                                    for b in 0..*kw {
                                        gx[p * h * w + (r * kh + a) * w + c * kw + b] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            batch,
            channels,
            spatial,
        } => {
            let gam = val(*gamma);
            let (c, s) = (*channels, *spatial);
            let count = T::of((batch * s) as f64);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut sum_dxhat = vec![T::zero(); c];
            let mut sum_dxhat_xhat = vec![T::zero(); c];
            for b in 0..*batch {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    for j in base..base + s {
                        dgamma[ch] += g[j] * xhat[j];
                        dbeta[ch] += g[j];
                        let dxh = g[j] * gam[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xhat[j];
                    }
                }
            }
            if req(*x) {
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..*batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for j in base..base + s {
                            let dxh = g[j] * gam[ch];
                            gx[j] = if *train {
                                inv_std[ch] / count
                                    * (count * dxh - sum_dxhat[ch] - xhat[j] * sum_dxhat_xhat[ch])
                            } else {
                                dxh * inv_std[ch]
                            };
                        }
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            dim,
        } => {
            let d = *dim;
            let gam = val(*gamma);
            let dn = T::of(d as f64);
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut gx = vec![T::zero(); g.len()];
            for (r, &is) in inv_std.iter().enumerate() {
                let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..d {
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                    let dxh = gr[j] * gam[j];
                    s1 += dxh;
                    s2 += dxh * xr[j];
                }
                for j in 0..d {
                    let dxh = gr[j] * gam[j];
                    gx[r * d + j] = is / dn * (dn * dxh - s1 - xr[j] * s2);
                }
            }
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::ZohA { delta, a, ds } => {
            let (gd, ga) = ssm::discretize_transition_backward(
                val(*delta),
                val(*a),
                nodes[i].value.data(),
                g,
                *ds,
            );
            accumulate(nodes, grads, *delta, gd);
            accumulate(nodes, grads, *a, ga);
        }
        Op::ZohB {
            delta,
            a,
            b,
            ds,
            method,
        } => {
            let (gd, ga, gb) =
                ssm::discretize_input_backward(val(*delta), val(*a), val(*b), g, *ds, *method);
            accumulate(nodes, grads, *delta, gd);
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Scan {
            x,
            abar,
            bbar,
            c,
            d,
            h,
            dims,
        } => {
            let sg = ssm::scan_backward(
                policy,
                dims,
                val(*x),
                val(*abar),
                val(*bbar),
                val(*c),
                val(*d),
                h,
                g,
            );
            accumulate(nodes, grads, *x, sg.x);
            accumulate(nodes, grads, *abar, sg.abar);
            accumulate(nodes, grads, *bbar, sg.bbar);
            accumulate(nodes, grads, *c, sg.c);
            accumulate(nodes, grads, *d, sg.d);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            classes,
        } => {
            let scale = g[0] / T::of(labels.len() as f64);
            let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (b, &l) in labels.iter().enumerate() {
                gl[b * classes + l] -= scale;
            }
            accumulate(nodes, grads, *logits, gl);
        }
    }
    Ok(())
}
