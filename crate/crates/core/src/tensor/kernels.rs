//! Loop-level numeric kernels. Batched kernels take the batch as the
//! leading axis and parallelize over it through [`crate::par`].

use super::Scalar;
use crate::error::{Error, Result};
use crate::par::{self, ExecPolicy};

pub fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }),
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`; each output sums over `k` in ascending order.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] = g[m,n] · b[k,n]ᵀ`
pub fn matmul_bt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] = acc;
        }
    }
}

/// `out[k,n] = a[m,k]ᵀ · g[m,n]`
pub fn matmul_at<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Geometry of a batched 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dGeom {
    pub fn new(
        x: &[usize],
        weight: &[usize],
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Self> {
        let (batch, c_in, h, w) = match x {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.to_vec(),
                    rhs: weight.to_vec(),
                })
            }
        };
        let [c_out, wc, kh, kw] = weight else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: weight.to_vec(),
            });
        };
        if *wc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if *kh > h + 2 * pad.0 || *kw > w + 2 * pad.1 || *kh == 0 || *kw == 0 {
            return Err(Error::KernelTooLarge {
                op: "conv2d",
                kernel: vec![*kh, *kw],
                input: vec![h + 2 * pad.0, w + 2 * pad.1],
            });
        }
        Ok(Conv2dGeom {
            batch,
            c_in,
            h,
            w,
            c_out: *c_out,
            kh: *kh,
            kw: *kw,
            stride,
            pad_h: pad.0,
            pad_w: pad.1,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w - self.kw) / self.stride + 1
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.c_out * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    /// Input coordinate hit by output index `o` and kernel tap `k` along one axis.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = o * stride + k;
        if p < pad || p - pad >= extent {
            None
        } else {
            Some(p - pad)
        }
    }
}

/// Direct-loop convolution. Per output element the taps are accumulated in
/// `(c, ki, kj)` order starting from zero, then the bias is added.
pub fn conv2d_direct<T: Scalar>(
    policy: ExecPolicy,
    g: &Conv2dGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    par::for_each_chunk(policy, &mut out, oh * ow, |bo, plane| {
        let (b, o) = (bo / g.c_out, bo % g.c_out);
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        for c in 0..g.c_in {
            let xc = &xb[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = w[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                    for i in 0..oh {
                        let Some(y) = Conv2dGeom::src(i, ki, g.stride, g.pad_h, g.h) else {
                            continue;
                        };
                        let xrow = &xc[y * g.w..(y + 1) * g.w];
                        let orow = &mut plane[i * ow..(i + 1) * ow];
                        for (j, ov) in orow.iter_mut().enumerate() {
                            if let Some(xx) = Conv2dGeom::src(j, kj, g.stride, g.pad_w, g.w) {
                                *ov += wv * xrow[xx];
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            let bv = bias[o];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    });
    out
}

/// Lower one sample into `[c_in·kh·kw, out_h·out_w]` columns.
pub fn im2col<T: Scalar>(g: &Conv2dGeom, xb: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * oh * ow];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * oh * ow;
                for i in 0..oh {
                    let Some(y) = Conv2dGeom::src(i, ki, g.stride, g.pad_h, g.h) else {
                        continue;
                    };
                    for j in 0..ow {
                        if let Some(xx) = Conv2dGeom::src(j, kj, g.stride, g.pad_w, g.w) {
                            cols[row + i * ow + j] = xb[(c * g.h + y) * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// im2col + matmul fast path; numerically identical to [`conv2d_direct`].
pub fn conv2d_im2col<T: Scalar>(
    policy: ExecPolicy,
    g: &Conv2dGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let taps = g.c_in * g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    par::for_each_chunk(policy, &mut out, g.out_plane(), |b, sample| {
        let cols = im2col(g, &x[b * g.in_plane()..(b + 1) * g.in_plane()]);
        matmul_dense(w, &cols, sample, g.c_out, taps, oh * ow);
        if let Some(bias) = bias {
            for (o, plane) in sample.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    });
    out
}

/// Plain matmul without the zero-skip shortcut, so that adding `w·0` terms
/// matches the direct path's handling of padding taps.
fn matmul_dense<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Gradients of [`conv2d_direct`]: `(d_x, d_w, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    policy: ExecPolicy,
    g: &Conv2dGeom,
    x: &[T],
    w: &[T],
    grad: &[T],
    need_x: bool,
    need_w: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let gplane = g.out_plane();

    let mut dx = Vec::new();
    if need_x {
        dx = vec![T::zero(); g.batch * g.in_plane()];
        par::for_each_chunk(policy, &mut dx, g.in_plane(), |b, dxb| {
            let gb = &grad[b * gplane..(b + 1) * gplane];
            for o in 0..g.c_out {
                let go = &gb[o * oh * ow..(o + 1) * oh * ow];
                for c in 0..g.c_in {
                    let dxc = &mut dxb[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let wv = w[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                            for i in 0..oh {
                                let Some(y) = Conv2dGeom::src(i, ki, g.stride, g.pad_h, g.h)
                                else {
                                    continue;
                                };
                                for j in 0..ow {
                                    if let Some(xx) =
                                        Conv2dGeom::src(j, kj, g.stride, g.pad_w, g.w)
                                    {
                                        dxc[y * g.w + xx] += wv * go[i * ow + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    let mut dw = vec![T::zero(); g.weight_len()];
    let mut db = vec![T::zero(); g.c_out];
    if need_w {
        let partials = par::map_indices(policy, g.batch, |b| {
            let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
            let gb = &grad[b * gplane..(b + 1) * gplane];
            let mut pw = vec![T::zero(); g.weight_len()];
            let mut pb = vec![T::zero(); g.c_out];
            for o in 0..g.c_out {
                let go = &gb[o * oh * ow..(o + 1) * oh * ow];
                pb[o] = go.iter().copied().sum();
                for c in 0..g.c_in {
                    let xc = &xb[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let mut acc = T::zero();
                            for i in 0..oh {
                                let Some(y) = Conv2dGeom::src(i, ki, g.stride, g.pad_h, g.h)
                                else {
                                    continue;
                                };
                                for j in 0..ow {
                                    if let Some(xx) =
                                        Conv2dGeom::src(j, kj, g.stride, g.pad_w, g.w)
                                    {
                                        acc += go[i * ow + j] * xc[y * g.w + xx];
                                    }
                                }
                            }
                            pw[((o * g.c_in + c) * g.kh + ki) * g.kw + kj] = acc;
                        }
                    }
                }
            }
            (pw, pb)
        });
        let (pws, pbs): (Vec<_>, Vec<_>) = partials.into_iter().unzip();
        par::sum_partials(pws, &mut dw);
        par::sum_partials(pbs, &mut db);
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Non-overlapping pooling (stride == kernel) over the last two axes of a
/// `[planes, h, w]` array. Returns the pooled values and, for max pooling,
/// the flat source index of each output.
pub fn pool2d<T: Scalar>(
    policy: ExecPolicy,
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    kind: PoolKind,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / kh, w / kw);
    let per = oh * ow;
    let results = par::map_indices(policy, planes, |p| {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let mut vals = Vec::with_capacity(per);
        let mut arg = Vec::with_capacity(if kind == PoolKind::Max { per } else { 0 });
        let scale = T::one() / T::of((kh * kw) as f64);
        for i in 0..oh {
            for j in 0..ow {
                match kind {
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for a in 0..kh {
                            for b in 0..kw {
                                let idx = (i * kh + a) * w + j * kw + b;
                                // First maximum wins on ties; NaN propagates.
                                if xp[idx] > best || xp[idx].is_nan() && !best.is_nan() {
                                    best = xp[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        if best == T::neg_infinity() {
                            best_idx = (i * kh) * w + j * kw;
                        }
                        vals.push(best);
                        arg.push(p * h * w + best_idx);
                    }
                    PoolKind::Avg => {
                        let mut acc = T::zero();
                        for a in 0..kh {
                            for b in 0..kw {
                                acc += xp[(i * kh + a) * w + j * kw + b];
                            }
                        }
                        vals.push(acc * scale);
                    }
                }
            }
        }
        (vals, arg)
    });
    let mut out = Vec::with_capacity(planes * per);
    let mut args = Vec::new();
    for (v, a) in results {
        out.extend(v);
        args.extend(a);
    }
    (out, args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn im2col_path_equals_direct_path_exactly() {
        let mut s = 7u64;
        for &(b, c, h, w, o, k, stride, pad) in &[
            (2, 3, 9, 7, 4, 3, 1, 1),
            (1, 1, 5, 5, 2, 5, 1, 0),
            (3, 2, 8, 6, 3, 3, 2, 1),
            (1, 4, 4, 10, 1, 1, 1, 0),
        ] {
            let x: Vec<f32> = (0..b * c * h * w).map(|_| lcg(&mut s) as f32).collect();
            let wt: Vec<f32> = (0..o * c * k * k).map(|_| lcg(&mut s) as f32).collect();
            let bias: Vec<f32> = (0..o).map(|_| lcg(&mut s) as f32).collect();
            let g = Conv2dGeom::new(&[b, c, h, w], &[o, c, k, k], stride, (pad, pad)).unwrap();
            for policy in [ExecPolicy::Sequential, ExecPolicy::Parallel] {
                let direct = conv2d_direct(policy, &g, &x, &wt, Some(&bias));
                let fast = conv2d_im2col(policy, &g, &x, &wt, Some(&bias));
                assert_eq!(direct, fast);
            }
        }
    }

    #[test]
    fn conv_output_extent_formula() {
        let g = Conv2dGeom::new(&[3, 224, 224], &[16, 3, 3, 3], 1, (1, 1)).unwrap();
        assert_eq!((g.out_h(), g.out_w()), (224, 224));
        let g = Conv2dGeom::new(&[1, 10, 11], &[1, 1, 3, 2], 2, (0, 1)).unwrap();
        assert_eq!((g.out_h(), g.out_w()), ((10 - 3) / 2 + 1, (11 + 2 - 2) / 2 + 1));
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let err = Conv2dGeom::new(&[1, 2, 2], &[1, 1, 5, 1], 1, (1, 0)).unwrap_err();
        assert!(matches!(err, Error::KernelTooLarge { .. }));
    }

    #[test]
    fn max_pool_picks_block_maximum() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (v, arg) = pool2d(ExecPolicy::Sequential, &x, 1, 4, 4, 2, 2, PoolKind::Max);
        assert_eq!(v, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
        let (v, _) = pool2d(ExecPolicy::Sequential, &x, 1, 4, 4, 1, 4, PoolKind::Avg);
        assert_eq!(v, vec![1.5, 5.5, 9.5, 13.5]);
    }
}
