use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// AdamW hyper-parameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, keyed like the parameter store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

impl AdamW {
    /// One update of every parameter that has a gradient. Parameters absent
    /// from `grads` only receive the weight decay.
    ///
    /// Moments are kept in `f64` regardless of the parameter precision.
    pub fn step<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
        state: &mut AdamState,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (name, p) in params.params.iter_mut() {
            let n = p.len();
            let data = p.data_mut();
            let Some(g) = grads.get(name) else {
                data.iter_mut().for_each(|w| *w = T::of(w.as_f64() * decay));
                continue;
            };
            let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::invalid(format!("optimizer state for {name} has the wrong size")));
            }
            for (i, (w, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
                let gi = gi.as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let upd = w.as_f64() * decay - lr * mhat / (vhat.sqrt() + self.eps);
                *w = T::of(upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64([2], &[v, -v]).unwrap());
        s
    }

    fn grads(g: f64) -> IndexMap<String, Tensor<f64>> {
        let mut m = IndexMap::new();
        m.insert("w".to_string(), Tensor::from_f64([2], &[g, g]).unwrap());
        m
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut s = store(0.7);
        let before = s.clone();
        opt.step(&mut s, &grads(0.0), &mut AdamState::default(), 1e-2).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn zero_grad_only_decays() {
        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let mut s = store(0.7);
        opt.step(&mut s, &grads(0.0), &mut AdamState::default(), 0.5).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.7 * 0.95).abs() < 1e-15);
        assert!((w[1] + 0.7 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn two_unit_gradient_steps_match_hand_evaluation() {
        let opt = AdamW::default();
        let lr = 0.1;
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0f64));
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::scalar(1.0f64));
        let mut st = AdamState::default();
        opt.step(&mut s, &g, &mut st, lr).unwrap();
        opt.step(&mut s, &g, &mut st, lr).unwrap();

        // step 1: m̂ = v̂ = 1 → Δ = lr/(1+ε)
        let mut w = 1.0 * (1.0 - lr * 0.01) - lr / (1.0 + 1e-8);
        // step 2: m = 0.19, v = 0.001999 → m̂ = 1, v̂ = 1
        let m = 0.9 * 0.1 + 0.1;
        let v = 0.999 * 0.001 + 0.001;
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        w = w * (1.0 - lr * 0.01) - lr * mh / (vh.sqrt() + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - w).abs() < 1e-14);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store(1.0);
        let before = s.clone();
        let err = AdamW::default()
            .step(&mut s, &grads(f64::NAN), &mut AdamState::default(), 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s, before);
    }
}
