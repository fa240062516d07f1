use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How the fused map `[C_cd, H_cd, W_cd]` is cut into patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PatchGeometry {
    /// One patch per time bin spanning the whole Doppler axis (`H_cd × 1`).
    DopplerAligned,
    /// `h × w` tiles in row-major order, time inner.
    Rectangular { h: usize, w: usize },
    /// One patch per Doppler bin spanning the whole time axis (`1 × W_cd`).
    TimeAligned,
}

impl PatchGeometry {
    /// Patch extents `(H_seg, W_seg)` for a fused map of `h × w`.
    pub fn patch_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hs, ws) = match *self {
            PatchGeometry::DopplerAligned => (h, 1),
            PatchGeometry::Rectangular { h: ph, w: pw } => (ph, pw),
            PatchGeometry::TimeAligned => (1, w),
        };
        if hs == 0 || ws == 0 || h % hs != 0 || w % ws != 0 {
            return Err(Error::invalid(format!(
                "patch {hs}×{ws} does not tile the {h}×{w} map"
            )));
        }
        Ok((hs, ws))
    }

    /// `(N, P)` for a `[c, h, w]` map.
    pub fn layout(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hs, ws) = self.patch_extents(h, w)?;
        Ok(((h / hs) * (w / ws), c * hs * ws))
    }
}

/// Source offsets into a `[c,h,w]` map such that patch `n`, element `p`
/// reads `x[idx[n·P + p]]`. Inner order: channel, Doppler, time.
pub fn segment_indices(c: usize, h: usize, w: usize, g: PatchGeometry) -> Result<Vec<usize>> {
    let (hs, ws) = g.patch_extents(h, w)?;
    let (gh, gw) = (h / hs, w / ws);
    let mut idx = Vec::with_capacity(c * h * w);
    for i in 0..gh {
        for j in 0..gw {
            for ch in 0..c {
                for dh in 0..hs {
                    for dw in 0..ws {
                        idx.push((ch * h + i * hs + dh) * w + j * ws + dw);
                    }
                }
            }
        }
    }
    Ok(idx)
}

fn chw(x: &[usize]) -> Result<(usize, usize, usize)> {
    match *x {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("expected [C,H,W], got {x:?}"))),
    }
}

/// `[C,H,W]` → `[N, C·H_seg·W_seg]`.
pub fn segment<T: Scalar>(x: &Tensor<T>, g: PatchGeometry) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x.shape())?;
    let (n, p) = g.layout(c, h, w)?;
    let idx = segment_indices(c, h, w, g)?;
    Tensor::new([n, p], idx.iter().map(|&i| x.data()[i]).collect())
}

/// Inverse of [`segment`].
pub fn unsegment<T: Scalar>(
    patches: &Tensor<T>,
    shape: [usize; 3],
    g: PatchGeometry,
) -> Result<Tensor<T>> {
    let [c, h, w] = shape;
    let (n, p) = g.layout(c, h, w)?;
    if patches.shape() != [n, p] {
        return Err(Error::ShapeMismatch {
            op: "unsegment",
            lhs: patches.shape().to_vec(),
            rhs: vec![n, p],
        });
    }
    let mut out = vec![T::zero(); c * h * w];
    for (k, i) in segment_indices(c, h, w, g)?.into_iter().enumerate() {
        out[i] = patches.data()[k];
    }
    Tensor::new(shape, out)
}

/// Batched segmentation on the graph: `[B,C,H,W]` → `[B,N,P]`.
pub fn segment_graph<T: Scalar>(gr: &mut Graph<T>, x: Var, g: PatchGeometry) -> Result<Var> {
    let shape = gr.shape(x).to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::invalid(format!("segment expects [B,C,H,W], got {shape:?}")));
    };
    let (n, p) = g.layout(c, h, w)?;
    let base = segment_indices(c, h, w, g)?;
    let plane = c * h * w;
    let idx = (0..b)
        .flat_map(|bi| base.iter().map(move |&i| bi * plane + i))
        .collect();
    gr.gather(x, idx, &[b, n, p])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(shape: [usize; 3]) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape, (1..=n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn doppler_aligned_columns() {
        let p = segment(&seq([1, 2, 3]), PatchGeometry::DopplerAligned).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn rectangular_top_left_first() {
        let p = segment(&seq([1, 4, 4]), PatchGeometry::Rectangular { h: 2, w: 2 }).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[1.0, 2.0, 5.0, 6.0]);
        // second patch is to the right (time inner)
        assert_eq!(&p.data()[4..8], &[3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn doppler_aligned_patch_dim() {
        let (n, p) = PatchGeometry::DopplerAligned.layout(1, 112, 7).unwrap();
        assert_eq!((n, p), (7, 112));
        let (n, p) = PatchGeometry::TimeAligned.layout(2, 3, 5).unwrap();
        assert_eq!((n, p), (3, 10));
    }

    #[test]
    fn bad_geometry_rejected() {
        assert!(segment(&seq([1, 4, 4]), PatchGeometry::Rectangular { h: 3, w: 2 }).is_err());
    }

    #[test]
    fn graph_matches_tensor_path() {
        let x = seq([2, 4, 6]);
        let geom = PatchGeometry::Rectangular { h: 2, w: 3 };
        let mut g = Graph::<f64>::default();
        let xb = x.clone().reshape([1, 2, 4, 6]).unwrap();
        let v = g.constant(xb);
        let y = segment_graph(&mut g, v, geom).unwrap();
        let want = segment(&x, geom).unwrap();
        assert_eq!(g.value(y).data(), want.data());
    }

    fn geometry() -> impl Strategy<Value = (PatchGeometry, [usize; 3])> {
        (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..4, 0u8..3).prop_map(
            |(c, gh, gw, hs, ws, kind)| {
                let shape = [c, gh * hs, gw * ws];
                let geom = match kind {
                    0 => PatchGeometry::DopplerAligned,
                    1 => PatchGeometry::Rectangular { h: hs, w: ws },
                    _ => PatchGeometry::TimeAligned,
                };
                (geom, shape)
            },
        )
    }

    proptest! {
        #[test]
        fn roundtrip((geom, shape) in geometry()) {
            let x = seq(shape);
            let back = unsegment(&segment(&x, geom).unwrap(), shape, geom).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn time_shift_shifts_patches(c in 1usize..3, h in 1usize..6, w in 2usize..9) {
            let x = seq([c, h, w]);
            let shifted: Vec<f64> = (0..c * h * w)
                .map(|i| if i % w + 1 < w { x.data()[i + 1] } else { 0.0 })
                .collect();
            let xs = Tensor::new([c, h, w], shifted).unwrap();
            let a = segment(&x, PatchGeometry::DopplerAligned).unwrap();
            let b = segment(&xs, PatchGeometry::DopplerAligned).unwrap();
            let p = c * h;
            for n in 0..w - 1 {
                prop_assert_eq!(&b.data()[n * p..(n + 1) * p], &a.data()[(n + 1) * p..(n + 2) * p]);
            }
        }
    }
}
