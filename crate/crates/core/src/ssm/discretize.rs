use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// `B̄ = ((exp(ΔA) − 1)/A)·B`
    #[default]
    Zoh,
    /// `B̄ = Δ·B`, as in most Mamba implementations.
    Euler,
}

/// `(exp(Δa) − 1)/a`; `exp_m1` keeps it accurate as `Δa → 0`.
#[inline]
fn expm1_over<T: Scalar>(delta: T, a: T) -> T {
    (delta * a).exp_m1() / a
}

/// `d/da [(e^{Δa} − 1)/a]` = `Δ²·(z e^z − (e^z − 1))/z²`, `z = Δa`.
#[inline]
fn d_expm1_over_da<T: Scalar>(delta: T, a: T) -> T {
    let z = delta * a;
    let psi = if z.abs() < T::of(1e-3) {
        T::of(0.5) + z * (T::one() / T::of(3.0) + z * (T::of(0.125) + z / T::of(30.0)))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    };
    delta * delta * psi
}

/// `out[r,d,s] = exp(Δ[r,d]·A[d,s])`
pub fn discretize_transition<T: Scalar>(delta: &[T], a: &[T], dim: usize, ds: usize) -> Vec<T> {
    let rows = delta.len() / dim.max(1);
    let mut out = Vec::with_capacity(rows * dim * ds);
    for r in 0..rows {
        for d in 0..dim {
            let dv = delta[r * dim + d];
            for s in 0..ds {
                out.push((dv * a[d * ds + s]).exp());
            }
        }
    }
    out
}

pub fn discretize_transition_backward<T: Scalar>(
    delta: &[T],
    a: &[T],
    out: &[T],
    g: &[T],
    ds: usize,
) -> (Vec<T>, Vec<T>) {
    let dim = a.len() / ds.max(1);
    let rows = delta.len() / dim.max(1);
    let mut gd = vec![T::zero(); delta.len()];
    let mut ga = vec![T::zero(); a.len()];
    for r in 0..rows {
        for d in 0..dim {
            let dv = delta[r * dim + d];
            for s in 0..ds {
                let k = (r * dim + d) * ds + s;
                let t = g[k] * out[k];
                gd[r * dim + d] += t * a[d * ds + s];
                ga[d * ds + s] += t * dv;
            }
        }
    }
    (gd, ga)
}

/// `out[r,d,s] = f(Δ[r,d], A[d,s])·B[r,s]`, `f` per [`Discretization`].
pub fn discretize_input<T: Scalar>(
    delta: &[T],
    a: &[T],
    b: &[T],
    dim: usize,
    ds: usize,
    method: Discretization,
) -> Vec<T> {
    let rows = delta.len() / dim.max(1);
    let mut out = Vec::with_capacity(rows * dim * ds);
    for r in 0..rows {
        for d in 0..dim {
            let dv = delta[r * dim + d];
            for s in 0..ds {
                let f = match method {
                    Discretization::Zoh => expm1_over(dv, a[d * ds + s]),
                    Discretization::Euler => dv,
                };
                out.push(f * b[r * ds + s]);
            }
        }
    }
    out
}

pub fn discretize_input_backward<T: Scalar>(
    delta: &[T],
    a: &[T],
    b: &[T],
    g: &[T],
    ds: usize,
    method: Discretization,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dim = a.len() / ds.max(1);
    let rows = delta.len() / dim.max(1);
    let mut gdelta = vec![T::zero(); delta.len()];
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for r in 0..rows {
        for d in 0..dim {
            let dv = delta[r * dim + d];
            for s in 0..ds {
                let gv = g[(r * dim + d) * ds + s];
                let bv = b[r * ds + s];
                let av = a[d * ds + s];
                match method {
                    Discretization::Zoh => {
                        gdelta[r * dim + d] += gv * (dv * av).exp() * bv;
                        ga[d * ds + s] += gv * bv * d_expm1_over_da(dv, av);
                        gb[r * ds + s] += gv * expm1_over(dv, av);
                    }
                    Discretization::Euler => {
                        gdelta[r * dim + d] += gv * bv;
                        gb[r * ds + s] += gv * dv;
                    }
                }
            }
        }
    }
    (gdelta, ga, gb)
}

/// Plain-tensor discretization: `A [dim,dim_s]`, `B [..., dim_s]`,
/// `Δ [..., dim]` -> `(Ā, B̄)`, both `[..., dim, dim_s]`.
pub fn discretize<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &Tensor<T>,
    method: Discretization,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [dim, ds] = a.shape()[..] else {
        return Err(Error::ShapeMismatch {
            op: "discretize",
            lhs: a.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    };
    let ds_ok = b.shape().last() == Some(&ds);
    let dim_ok = delta.shape().last() == Some(&dim);
    let lead_ok = b.shape()[..b.rank().saturating_sub(1)]
        == delta.shape()[..delta.rank().saturating_sub(1)];
    if !(ds_ok && dim_ok && lead_ok) {
        return Err(Error::ShapeMismatch {
            op: "discretize",
            lhs: b.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    if let Some(i) = a.data().iter().position(|&v| !(v < T::zero())) {
        return Err(Error::invalid(format!(
            "discretize: A must be strictly negative, entry {i} is {}",
            a.data()[i]
        )));
    }
    if let Some(i) = delta.data().iter().position(|&v| !(v > T::zero())) {
        return Err(Error::invalid(format!(
            "discretize: step size must be positive, entry {i} is {}",
            delta.data()[i]
        )));
    }
    let mut shape = delta.shape().to_vec();
    shape.push(ds);
    let abar = discretize_transition(delta.data(), a.data(), dim, ds);
    let bbar = discretize_input(delta.data(), a.data(), b.data(), dim, ds, method);
    Ok((Tensor::new(shape.clone(), abar)?, Tensor::new(shape, bbar)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn half_life_closed_form() {
        let (abar, bbar) = discretize(
            &t(&[1, 1], &[-1.0]),
            &t(&[1, 1], &[1.0]),
            &t(&[1, 1], &[std::f64::consts::LN_2]),
            Discretization::Zoh,
        )
        .unwrap();
        assert!((abar.data()[0] - 0.5).abs() < 1e-15);
        assert!((bbar.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn small_step_limit() {
        let (abar, bbar) = discretize(
            &t(&[1, 1], &[-3.0]),
            &t(&[1, 1], &[2.0]),
            &t(&[1, 1], &[1e-12]),
            Discretization::Zoh,
        )
        .unwrap();
        assert!((abar.data()[0] - 1.0).abs() < 1e-11);
        assert!(bbar.data()[0].abs() < 1e-11);
    }

    #[test]
    fn euler_ignores_a() {
        for a in [-0.1, -1.0, -50.0] {
            let (_, bbar) = discretize(
                &t(&[1, 1], &[a]),
                &t(&[1, 1], &[2.0]),
                &t(&[1, 1], &[0.1]),
                Discretization::Euler,
            )
            .unwrap();
            assert!((bbar.data()[0] - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_negative_a() {
        for a in [0.0, 0.5] {
            let err = discretize(
                &t(&[1, 1], &[a]),
                &t(&[1, 1], &[1.0]),
                &t(&[1, 1], &[0.1]),
                Discretization::Zoh,
            )
            .unwrap_err();
            assert!(err.to_string().contains("strictly negative"));
        }
    }

    #[test]
    fn a_derivative_matches_finite_difference() {
        for &(delta, a) in &[(0.3f64, -1.5f64), (1e-4, -2.0), (2.0, -0.01), (0.05, -16.0)] {
            let eps = 1e-6;
            let fd = (expm1_over(delta, a + eps) - expm1_over(delta, a - eps)) / (2.0 * eps);
            let an = d_expm1_over_da(delta, a);
            assert!((fd - an).abs() <= 1e-7 * an.abs().max(1e-3), "{delta} {a}: {fd} vs {an}");
        }
    }
}
