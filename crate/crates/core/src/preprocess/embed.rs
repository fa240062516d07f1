use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-patch affine map `x [N,P] · W_e [P,dim] + b`.
pub fn patch_embed<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(crate::par::ExecPolicy::Sequential);
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = patch_embed_graph(&mut g, xv, wv, bv)?;
    Ok(g.value(y).clone())
}

pub fn patch_embed_graph<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let p = *g.shape(x).last().unwrap_or(&0);
    if g.shape(w).first() != Some(&p) {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(w).to_vec(),
        });
    }
    g.affine(x, w, Some(b))
}

/// Sinusoidal table `PE[n,2i] = sin(n/10000^{2i/dim})`, `PE[n,2i+1] = cos(·)`.
pub fn pos_encoding<T: Scalar>(n: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(Error::invalid(format!("position encoding needs an even dim, got {dim}")));
    }
    let mut data = Vec::with_capacity(n * dim);
    for pos in 0..n {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(T::of(angle.sin()));
            data.push(T::of(angle.cos()));
        }
    }
    Tensor::new([n, dim], data)
}

/// `x [N,dim] + PE`.
pub fn pos_encode<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, dim] = x.shape()[..] else {
        return Err(Error::invalid(format!("pos_encode expects [N,dim], got {:?}", x.shape())));
    };
    let pe = pos_encoding::<T>(n, dim)?;
    Tensor::new([n, dim], x.data().iter().zip(pe.data()).map(|(&a, &b)| a + b).collect())
}
