use serde::{Deserialize, Serialize};

use super::SsmParams;
use crate::error::{Error, Result};
use crate::par::{self, ExecPolicy};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanEngine {
    /// Step-by-step recurrence; the reference path.
    #[default]
    Sequential,
    /// Work-efficient (Blelloch) associative scan over `(Ā, B̄x)` pairs.
    Blelloch,
}

/// Element of the first-order linear recurrence `h ← a·h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffinePair<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> AffinePair<T> {
    pub fn identity() -> Self {
        AffinePair {
            a: T::one(),
            b: T::zero(),
        }
    }

    /// Apply `self` first, then `later`: `(a₂a₁, a₂b₁ + b₂)`.
    #[inline]
    pub fn then(self, later: Self) -> Self {
        AffinePair {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }
}

/// In-place inclusive scan with the up-sweep / down-sweep tree of Blelloch.
/// After the call `items[i]` is `items[0] ∘ … ∘ items[i]`.
pub fn blelloch_inclusive<T: Scalar>(items: &mut [AffinePair<T>]) {
    let n = items.len();
    if n <= 1 {
        return;
    }
    let m = n.next_power_of_two();
    let mut tree: Vec<AffinePair<T>> = items.to_vec();
    tree.resize(m, AffinePair::identity());

    let mut step = 2;
    while step <= m {
        let half = step / 2;
        for k in (0..m).step_by(step) {
            tree[k + step - 1] = tree[k + half - 1].then(tree[k + step - 1]);
        }
        step *= 2;
    }
    tree[m - 1] = AffinePair::identity();
    let mut step = m;
    while step >= 2 {
        let half = step / 2;
        for k in (0..m).step_by(step) {
            let left = tree[k + half - 1];
            tree[k + half - 1] = tree[k + step - 1];
            tree[k + step - 1] = tree[k + half - 1].then(left);
        }
        step /= 2;
    }
    // exclusive prefix -> inclusive
    for (item, prefix) in items.iter_mut().zip(tree) {
        *item = prefix.then(*item);
    }
}

/// Extents of a batched scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub ds: usize,
}

impl ScanDims {
    pub fn infer(
        x: &[usize],
        abar: &[usize],
        bbar: &[usize],
        c: &[usize],
        d: &[usize],
    ) -> Result<Self> {
        let mismatch = |rhs: &[usize]| Error::ShapeMismatch {
            op: "scan",
            lhs: x.to_vec(),
            rhs: rhs.to_vec(),
        };
        let (batch, len, dim) = match x {
            [n, dim] => (1, *n, *dim),
            [b, n, dim] => (*b, *n, *dim),
            _ => return Err(mismatch(abar)),
        };
        let lead = &x[..x.len() - 1];
        let ds = *abar.last().ok_or_else(|| mismatch(abar))?;
        let expect_state: Vec<usize> = x.iter().copied().chain([ds]).collect();
        if abar != expect_state.as_slice() {
            return Err(mismatch(abar));
        }
        if bbar != abar {
            return Err(mismatch(bbar));
        }
        let expect_c: Vec<usize> = lead.iter().copied().chain([ds]).collect();
        if c != expect_c.as_slice() {
            return Err(mismatch(c));
        }
        if d != [dim] {
            return Err(mismatch(d));
        }
        Ok(ScanDims {
            batch,
            len,
            dim,
            ds,
        })
    }

    #[inline]
    fn state(&self, b: usize, n: usize, d: usize, s: usize) -> usize {
        ((b * self.len + n) * self.dim + d) * self.ds + s
    }

    #[inline]
    fn token(&self, b: usize, n: usize, d: usize) -> usize {
        (b * self.len + n) * self.dim + d
    }

    #[inline]
    fn cidx(&self, b: usize, n: usize, s: usize) -> usize {
        (b * self.len + n) * self.ds + s
    }
}

struct ChainOut<T> {
    h: Vec<T>, // [len, ds]
    y: Vec<T>, // [len]
}

fn run_chain<T: Scalar>(
    engine: ScanEngine,
    dims: &ScanDims,
    b: usize,
    d: usize,
    x: &[T],
    abar: &[T],
    bbar: &[T],
    c: &[T],
    dskip: &[T],
) -> ChainOut<T> {
    let (n, ds) = (dims.len, dims.ds);
    let mut h = vec![T::zero(); n * ds];
    match engine {
        ScanEngine::Sequential => {
            let mut state = vec![T::zero(); ds];
            for t in 0..n {
                let xv = x[dims.token(b, t, d)];
                for s in 0..ds {
                    let k = dims.state(b, t, d, s);
                    state[s] = abar[k] * state[s] + bbar[k] * xv;
                    h[t * ds + s] = state[s];
                }
            }
        }
        ScanEngine::Blelloch => {
            let mut pairs = Vec::with_capacity(n);
            for s in 0..ds {
                pairs.clear();
                for t in 0..n {
                    let k = dims.state(b, t, d, s);
                    pairs.push(AffinePair {
                        a: abar[k],
                        b: bbar[k] * x[dims.token(b, t, d)],
                    });
                }
                blelloch_inclusive(&mut pairs);
                for (t, p) in pairs.iter().enumerate() {
                    h[t * ds + s] = p.b;
                }
            }
        }
    }
    let mut y = vec![T::zero(); n];
    for t in 0..n {
        let mut acc = T::zero();
        for s in 0..ds {
            acc += c[dims.cidx(b, t, s)] * h[t * ds + s];
        }
        y[t] = acc + dskip[d] * x[dims.token(b, t, d)];
    }
    ChainOut { h, y }
}

/// Forward scan over every `(batch, channel)` chain. Returns `y [B,N,dim]`
/// and the hidden states `h [B,N,dim,dim_s]` kept for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<T: Scalar>(
    policy: ExecPolicy,
    engine: ScanEngine,
    dims: &ScanDims,
    x: &[T],
    abar: &[T],
    bbar: &[T],
    c: &[T],
    dskip: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let chains = dims.batch * dims.dim;
    let outs = par::map_indices(policy, chains, |k| {
        run_chain(engine, dims, k / dims.dim, k % dims.dim, x, abar, bbar, c, dskip)
    });
    let mut y = vec![T::zero(); dims.batch * dims.len * dims.dim];
    let mut h = vec![T::zero(); y.len() * dims.ds];
    let mut first_bad: Option<usize> = None;
    for (k, out) in outs.into_iter().enumerate() {
        let (b, d) = (k / dims.dim, k % dims.dim);
        for t in 0..dims.len {
            let yv = out.y[t];
            let hs = &out.h[t * dims.ds..(t + 1) * dims.ds];
            if !yv.is_finite() || hs.iter().any(|v| !v.is_finite()) {
                first_bad = Some(first_bad.map_or(t, |f| f.min(t)));
            }
            y[dims.token(b, t, d)] = yv;
            let base = dims.state(b, t, d, 0);
            h[base..base + dims.ds].copy_from_slice(hs);
        }
    }
    if let Some(step) = first_bad {
        return Err(Error::NonFinite { op: "scan", step });
    }
    Ok((y, h))
}

pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub abar: Vec<T>,
    pub bbar: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

struct ChainGrad<T> {
    x: Vec<T>,    // [len]
    abar: Vec<T>, // [len, ds]
    bbar: Vec<T>, // [len, ds]
    c: Vec<T>,    // [len, ds]
    d: T,
}

/// Reverse-time adjoint recurrence of [`scan_forward`].
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Scalar>(
    policy: ExecPolicy,
    dims: &ScanDims,
    x: &[T],
    abar: &[T],
    bbar: &[T],
    c: &[T],
    dskip: &[T],
    h: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let (n, ds) = (dims.len, dims.ds);
    let chains = dims.batch * dims.dim;
    let outs = par::map_indices(policy, chains, |k| {
        let (b, d) = (k / dims.dim, k % dims.dim);
        let mut cg = ChainGrad {
            x: vec![T::zero(); n],
            abar: vec![T::zero(); n * ds],
            bbar: vec![T::zero(); n * ds],
            c: vec![T::zero(); n * ds],
            d: T::zero(),
        };
        let mut carry = vec![T::zero(); ds];
        for t in (0..n).rev() {
            let g = gy[dims.token(b, t, d)];
            let xv = x[dims.token(b, t, d)];
            cg.d += g * xv;
            let mut gx = dskip[d] * g;
            for s in 0..ds {
                let k = dims.state(b, t, d, s);
                let gh = g * c[dims.cidx(b, t, s)] + carry[s];
                cg.c[t * ds + s] = g * h[k];
                cg.abar[t * ds + s] = if t > 0 {
                    gh * h[dims.state(b, t - 1, d, s)]
                } else {
                    T::zero()
                };
                cg.bbar[t * ds + s] = gh * xv;
                gx += gh * bbar[k];
                carry[s] = gh * abar[k];
            }
            cg.x[t] = gx;
        }
        cg
    });
    let mut out = ScanGrads {
        x: vec![T::zero(); x.len()],
        abar: vec![T::zero(); abar.len()],
        bbar: vec![T::zero(); bbar.len()],
        c: vec![T::zero(); c.len()],
        d: vec![T::zero(); dskip.len()],
    };
    for (k, cg) in outs.into_iter().enumerate() {
        let (b, d) = (k / dims.dim, k % dims.dim);
        out.d[d] += cg.d;
        for t in 0..n {
            out.x[dims.token(b, t, d)] = cg.x[t];
            let base = dims.state(b, t, d, 0);
            out.abar[base..base + ds].copy_from_slice(&cg.abar[t * ds..(t + 1) * ds]);
            out.bbar[base..base + ds].copy_from_slice(&cg.bbar[t * ds..(t + 1) * ds]);
            for s in 0..ds {
                out.c[dims.cidx(b, t, s)] += cg.c[t * ds + s];
            }
        }
    }
    out
}

fn scan_tensor<T: Scalar>(
    policy: ExecPolicy,
    engine: ScanEngine,
    x: &Tensor<T>,
    p: &SsmParams<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = ScanDims::infer(
        x.shape(),
        p.abar.shape(),
        p.bbar.shape(),
        p.c.shape(),
        d.shape(),
    )?;
    let (y, _) = scan_forward(
        policy,
        engine,
        &dims,
        x.data(),
        p.abar.data(),
        p.bbar.data(),
        p.c.data(),
        d.data(),
    )?;
    Tensor::new(x.shape().to_vec(), y)
}

/// Reference recurrence on plain tensors (`x [N,dim]` or `[B,N,dim]`).
pub fn scan_sequential<T: Scalar>(
    x: &Tensor<T>,
    p: &SsmParams<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    scan_tensor(ExecPolicy::Sequential, ScanEngine::Sequential, x, p, d)
}

/// Associative-scan evaluation of the same recurrence, chains in parallel.
pub fn scan_parallel<T: Scalar>(
    x: &Tensor<T>,
    p: &SsmParams<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    scan_tensor(ExecPolicy::default(), ScanEngine::Blelloch, x, p, d)
}
