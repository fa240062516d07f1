use rand::Rng;

use super::{Discretization, ScanEngine};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::par::ExecPolicy;
use crate::tensor::{Scalar, Tensor};

/// Learned weights of one selective SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmWeights<T: Scalar = f32> {
    /// `log(−A)`, `[dim, dim_s]`; `A = −exp(a_log)` is negative by construction.
    pub a_log: Tensor<T>,
    pub d: Tensor<T>,
    pub w_b: Tensor<T>,
    pub w_c: Tensor<T>,
    /// Low-rank step-size path, absent when `dt_rank == 0`.
    pub w_dt: Option<(Tensor<T>, Tensor<T>)>,
    pub dt_bias: Tensor<T>,
}

impl<T: Scalar> SsmWeights<T> {
    /// `A[d,s] = −(s+1)`, `D = 1`, `Δ_bias = softplus⁻¹(U[1e-3, 1e-1])`,
    /// projections `U(±1/√fan_in)`.
    pub fn init<R: Rng + ?Sized>(dim: usize, ds: usize, dt_rank: usize, rng: &mut R) -> Self {
        let a_log = (0..dim * ds)
            .map(|i| T::of(((i % ds) as f64 + 1.0).ln()))
            .collect();
        let bound = 1.0 / (dim as f64).sqrt();
        let w_b = Tensor::uniform([dim, ds], bound, rng);
        let w_c = Tensor::uniform([dim, ds], bound, rng);
        let w_dt = (dt_rank > 0).then(|| {
            (
                Tensor::uniform([dim, dt_rank], bound, rng),
                Tensor::uniform([dt_rank, dim], 1.0 / (dt_rank as f64).sqrt(), rng),
            )
        });
        let dt_bias = (0..dim)
            .map(|_| {
                let dt = 1e-3 + (1e-1 - 1e-3) * rng.random::<f64>();
                // softplus⁻¹(y) = y + ln(1 − e^{−y})
                T::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        SsmWeights {
            a_log: Tensor::new([dim, ds], a_log).expect("shape"),
            d: Tensor::ones([dim]),
            w_b,
            w_c,
            w_dt,
            dt_bias: Tensor::new([dim], dt_bias).expect("shape"),
        }
    }

    pub fn dim(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn dim_s(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn dt_rank(&self) -> usize {
        self.w_dt.as_ref().map_or(0, |(w1, _)| w1.shape()[1])
    }

    /// The (negative) state matrix.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    /// Tensors under their stable checkpoint names.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("a_log", &self.a_log),
            ("d", &self.d),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
        ];
        if let Some((w1, w2)) = &self.w_dt {
            out.push(("w_dt1", w1));
            out.push(("w_dt2", w2));
        }
        out.push(("dt_bias", &self.dt_bias));
        out
    }

    /// Add every tensor to `store` as `{prefix}.{name}`.
    pub fn insert_into(&self, store: &mut crate::model::ParamStore<T>, prefix: &str) {
        for (name, t) in self.named() {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Place every tensor on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> SsmVars {
        SsmVars {
            a_log: g.param(self.a_log.clone()),
            d: g.param(self.d.clone()),
            w_b: g.param(self.w_b.clone()),
            w_c: g.param(self.w_c.clone()),
            w_dt: self
                .w_dt
                .as_ref()
                .map(|(w1, w2)| (g.param(w1.clone()), g.param(w2.clone()))),
            dt_bias: g.param(self.dt_bias.clone()),
        }
    }

    /// Like [`bind`](Self::bind) but as constants (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> SsmVars {
        SsmVars {
            a_log: g.constant(self.a_log.clone()),
            d: g.constant(self.d.clone()),
            w_b: g.constant(self.w_b.clone()),
            w_c: g.constant(self.w_c.clone()),
            w_dt: self
                .w_dt
                .as_ref()
                .map(|(w1, w2)| (g.constant(w1.clone()), g.constant(w2.clone()))),
            dt_bias: g.constant(self.dt_bias.clone()),
        }
    }
}

/// [`SsmWeights`] placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt: Option<(Var, Var)>,
    pub dt_bias: Var,
}

impl SsmVars {
    /// Look up `{prefix}.a_log`, `{prefix}.d`, ... in a model binding.
    pub fn from_binding(b: &crate::model::Binding, prefix: &str) -> Result<Self> {
        let get = |n: &str| b.get(&format!("{prefix}.{n}"));
        let w_dt = match (b.opt(&format!("{prefix}.w_dt1")), b.opt(&format!("{prefix}.w_dt2"))) {
            (Some(w1), Some(w2)) => Some((w1, w2)),
            (None, None) => None,
            _ => return Err(Error::invalid(format!("{prefix}: incomplete step-size path"))),
        };
        Ok(SsmVars {
            a_log: get("a_log")?,
            d: get("d")?,
            w_b: get("w_b")?,
            w_c: get("w_c")?,
            w_dt,
            dt_bias: get("dt_bias")?,
        })
    }

    /// Vars in the same order as [`SsmWeights::named`].
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let mut out = vec![
            ("a_log", self.a_log),
            ("d", self.d),
            ("w_b", self.w_b),
            ("w_c", self.w_c),
        ];
        if let Some((w1, w2)) = self.w_dt {
            out.push(("w_dt1", w1));
            out.push(("w_dt2", w2));
        }
        out.push(("dt_bias", self.dt_bias));
        out
    }
}

/// Intermediate selective parameters of one [`selective_ssm`] call.
#[derive(Clone, Copy, Debug)]
pub struct SsmTrace {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
    pub abar: Var,
    pub bbar: Var,
}

/// Per-step selective parameters. Leading axes follow the input
/// (`[N, …]` or `[B, N, …]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T: Scalar = f32> {
    pub delta: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub abar: Tensor<T>,
    pub bbar: Tensor<T>,
}

fn generate<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &SsmVars,
    method: Discretization,
) -> Result<SsmTrace> {
    let xs = g.shape(x).to_vec();
    if !(2..=3).contains(&xs.len()) || g.shape(w.w_b)[0] != xs[xs.len() - 1] {
        return Err(Error::ShapeMismatch {
            op: "selective_ssm",
            lhs: xs,
            rhs: g.shape(w.w_b).to_vec(),
        });
    }
    let b = g.affine(x, w.w_b, None)?;
    let c = g.affine(x, w.w_c, None)?;
    let pre = match w.w_dt {
        Some((w1, w2)) => {
            let low = g.affine(x, w1, None)?;
            let full = g.affine(low, w2, None)?;
            g.add(full, w.dt_bias)?
        }
        None => g.broadcast_to(w.dt_bias, &xs)?,
    };
    let delta = g.softplus(pre)?;
    let pos = g.exp(w.a_log)?;
    let a = g.neg(pos)?;
    let abar = g.zoh_transition(delta, a)?;
    let bbar = g.zoh_input(delta, a, b, method)?;
    Ok(SsmTrace {
        delta,
        b,
        c,
        abar,
        bbar,
    })
}

/// Selective SSM over `x [B,N,dim]` (or `[N,dim]`): generate `Δ, B, C` from
/// the input, discretize and scan. Returns `y` with the shape of `x`.
pub fn selective_ssm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: &SsmVars,
    method: Discretization,
    engine: ScanEngine,
) -> Result<(Var, SsmTrace)> {
    let trace = generate(g, x, w, method)?;
    let y = g.scan(x, trace.abar, trace.bbar, trace.c, w.d, engine)?;
    Ok((y, trace))
}

/// Tensor-level parameter generation for `x [N,dim]` (or `[B,N,dim]`).
pub fn gen_params<T: Scalar>(
    x: &Tensor<T>,
    w: &SsmWeights<T>,
    method: Discretization,
) -> Result<SsmParams<T>> {
    let mut g = Graph::new(ExecPolicy::Sequential);
    let xv = g.constant(x.clone());
    let vars = w.bind_frozen(&mut g);
    let t = generate(&mut g, xv, &vars, method)?;
    Ok(SsmParams {
        delta: g.value(t.delta).clone(),
        b: g.value(t.b).clone(),
        c: g.value(t.c).clone(),
        abar: g.value(t.abar).clone(),
        bbar: g.value(t.bbar).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::scan_sequential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(dim: usize, ds: usize, r: usize) -> SsmWeights<f64> {
        SsmWeights::init(dim, ds, r, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn zero_input_gives_bias_step() {
        let w = weights(3, 2, 2);
        let p = gen_params(&Tensor::zeros([4, 3]), &w, Discretization::Zoh).unwrap();
        assert!(p.b.data().iter().chain(p.c.data()).all(|&v| v == 0.0));
        for n in 0..4 {
            for d in 0..3 {
                let sp = crate::autodiff::softplus(w.dt_bias.data()[d]);
                assert_eq!(p.delta.at(&[n, d]), sp);
            }
        }
    }

    #[test]
    fn rank_zero_bias_zero_is_ln2() {
        let mut w = weights(2, 2, 0);
        w.dt_bias = Tensor::zeros([2]);
        let x = Tensor::from_f64([3, 2], &[1.0, -4.0, 2.0, 0.5, 9.0, -1.0]).unwrap();
        let p = gen_params(&x, &w, Discretization::Zoh).unwrap();
        assert!(p.delta.data().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn init_ranges() {
        let w = weights(4, 3, 2);
        assert_eq!(w.a().at(&[2, 0]), -1.0);
        assert!((w.a().at(&[1, 2]) + 3.0).abs() < 1e-12);
        for &b in w.dt_bias.data() {
            let dt = crate::autodiff::softplus(b);
            assert!((1e-3..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        assert_eq!(w.dt_rank(), 2);
    }

    #[test]
    fn graph_path_matches_tensor_path() {
        let w = weights(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform([2, 5, 3], 1.0, &mut rng);
        let p = gen_params(&x, &w, Discretization::Zoh).unwrap();
        let y_ref = scan_sequential(&x, &p, &w.d).unwrap();
        let mut g = Graph::new(ExecPolicy::Sequential);
        let xv = g.constant(x.clone());
        let vars = w.bind(&mut g);
        let (y, _) =
            selective_ssm(&mut g, xv, &vars, Discretization::Zoh, ScanEngine::Blelloch).unwrap();
        let diff = g
            .value(y)
            .data()
            .iter()
            .zip(y_ref.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn long_range_gradient_matches_product_formula() {
        // dy[1]/dx[0] = C[1]·Ā[1]·B̄[0] for dim = dim_s = 1 with fixed parameters.
        let mut g = Graph::<f64>::new(ExecPolicy::Sequential);
        let x = g.param(Tensor::from_f64([2, 1], &[0.3, -0.2]).unwrap());
        let abar = g.constant(Tensor::from_f64([2, 1, 1], &[0.6, 0.7]).unwrap());
        let bbar = g.constant(Tensor::from_f64([2, 1, 1], &[0.9, 0.4]).unwrap());
        let c = g.constant(Tensor::from_f64([2, 1], &[1.5, 2.0]).unwrap());
        let d = g.constant(Tensor::zeros([1]));
        let y = g.scan(x, abar, bbar, c, d, ScanEngine::Sequential).unwrap();
        let y1 = g.gather(y, vec![1], &[]).unwrap();
        let grads = g.backward(y1).unwrap();
        let gx = grads.get(x).unwrap();
        assert!((gx.data()[0] - 2.0 * 0.7 * 0.9).abs() < 1e-15);
        assert!(gx.data()[0] != 0.0);
    }
}
