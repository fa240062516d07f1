use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::model::{Binding, ParamStore};
use crate::par::ExecPolicy;
use crate::tensor::kernels::PoolKind;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Channel fusion (`layers` × conv + batch norm) followed by pooling that
/// reduces `(H, W)` by exactly `factors`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChanDsConfig {
    pub layers: usize,
    /// Fused channel count `C_cd`.
    pub channels: usize,
    pub kernel: (usize, usize),
    /// `(H / H_cd, W / W_cd)`.
    pub factors: (usize, usize),
    #[serde(default = "yes")]
    pub use_avgpool: bool,
}

fn yes() -> bool {
    true
}

/// One non-overlapping pooling step (stride equals kernel).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStage {
    pub kh: usize,
    pub kw: usize,
    pub kind: PoolKind,
}

impl ChanDsConfig {
    /// Problems with this configuration for an input of `[c, h, w]`.
    pub fn problems(&self, input: [usize; 3]) -> Vec<String> {
        let mut out = Vec::new();
        if !(1..=2).contains(&self.layers) {
            out.push(format!("chan_ds.layers must be 1 or 2, got {}", self.layers));
        }
        if self.channels == 0 {
            out.push("chan_ds.channels must be ≥ 1".into());
        }
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            out.push(format!("chan_ds.kernel must be odd and positive, got {:?}", self.kernel));
        }
        let (rh, rw) = self.factors;
        if rh == 0 || rw == 0 {
            out.push(format!("chan_ds.factors must be ≥ 1, got {:?}", self.factors));
        } else if input[1] % rh != 0 || input[2] % rw != 0 {
            out.push(format!(
                "chan_ds.factors {:?} must divide the input extents ({}, {})",
                self.factors, input[1], input[2]
            ));
        }
        out
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let p = self.problems(input);
        if !p.is_empty() {
            return Err(Error::InvalidConfig(p));
        }
        Ok([self.channels, input[1] / self.factors.0, input[2] / self.factors.1])
    }

    fn in_channels(&self, layer: usize, c_in: usize) -> usize {
        if layer == 0 {
            c_in
        } else {
            self.channels
        }
    }
}

/// Split `(r_H, r_W)` into pooling stages: a 2×2 max pool when both factors
/// are even, then a max pool carrying the remaining Doppler factor and part
/// of the time factor, then (for a large time factor, if enabled) an average
/// pool taking the rest of the time factor.
pub fn pool_plan(cfg: &ChanDsConfig) -> Vec<PoolStage> {
    let (mut rh, mut rw) = cfg.factors;
    let mut stages = Vec::new();
    if rh >= 2 && rw >= 2 && rh % 2 == 0 && rw % 2 == 0 {
        stages.push(PoolStage {
            kh: 2,
            kw: 2,
            kind: PoolKind::Max,
        });
        rh /= 2;
        rw /= 2;
    }
    let (m, a) = if cfg.use_avgpool && rw > 8 {
        // most even factorization, the larger factor to the max pool
        let a = (1..=rw).filter(|d| rw % d == 0 && d * d <= rw).max().unwrap_or(1);
        (rw / a, a)
    } else {
        (rw, 1)
    };
    if rh > 1 || m > 1 {
        stages.push(PoolStage {
            kh: rh,
            kw: m,
            kind: PoolKind::Max,
        });
    }
    if a > 1 {
        stages.push(PoolStage {
            kh: 1,
            kw: a,
            kind: PoolKind::Avg,
        });
    }
    stages
}

/// Default-initialized parameters and running statistics under `chan_ds.*`.
pub fn init_chan_ds<T: Scalar, R: Rng + ?Sized>(
    cfg: &ChanDsConfig,
    c_in: usize,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let (kh, kw) = cfg.kernel;
    for l in 0..cfg.layers {
        let ci = cfg.in_channels(l, c_in);
        let bound = 1.0 / ((ci * kh * kw) as f64).sqrt();
        store.insert(
            format!("chan_ds.conv{l}.weight"),
            Tensor::uniform([cfg.channels, ci, kh, kw], bound, rng),
        );
        store.insert(format!("chan_ds.conv{l}.bias"), Tensor::zeros([cfg.channels]));
        store.insert(format!("chan_ds.bn{l}.weight"), Tensor::ones([cfg.channels]));
        store.insert(format!("chan_ds.bn{l}.bias"), Tensor::zeros([cfg.channels]));
        store.insert_buffer(format!("chan_ds.bn{l}.running_mean"), Tensor::zeros([cfg.channels]));
        store.insert_buffer(format!("chan_ds.bn{l}.running_var"), Tensor::ones([cfg.channels]));
    }
}

/// Chan-DS on `x [B,C,H,W]`. In training mode batch statistics are used and
/// returned (one entry per layer) for the caller to fold into the running
/// estimates; otherwise the running statistics from `store` are used.
pub fn chan_ds<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ChanDsConfig,
    vars: &Binding,
    store: &ParamStore<T>,
    train: bool,
) -> Result<(Var, Vec<BnStats<T>>)> {
    let shape = g.shape(x).to_vec();
    let [_, c, h, w] = shape[..] else {
        return Err(Error::invalid(format!("chan_ds expects [B,C,H,W], got {shape:?}")));
    };
    cfg.output_shape([c, h, w])?;
    let pad = (cfg.kernel.0 / 2, cfg.kernel.1 / 2);
    let eps = T::of(BN_EPS);
    let mut y = x;
    let mut stats = Vec::new();
    for l in 0..cfg.layers {
        let wv = vars.get(&format!("chan_ds.conv{l}.weight"))?;
        let bv = vars.get(&format!("chan_ds.conv{l}.bias"))?;
        y = g.conv2d(y, wv, Some(bv), 1, pad)?;
        let gamma = vars.get(&format!("chan_ds.bn{l}.weight"))?;
        let beta = vars.get(&format!("chan_ds.bn{l}.bias"))?;
        let (out, st) = if train {
            g.batch_norm(y, gamma, beta, eps, NormMode::Train)?
        } else {
            let mean = store.buffer(&format!("chan_ds.bn{l}.running_mean"))?;
            let var = store.buffer(&format!("chan_ds.bn{l}.running_var"))?;
            g.batch_norm(
                y,
                gamma,
                beta,
                eps,
                NormMode::Eval {
                    mean: mean.data(),
                    var: var.data(),
                },
            )?
        };
        y = out;
        stats.extend(st);
    }
    for st in pool_plan(cfg) {
        y = g.pool2d(y, st.kh, st.kw, st.kind)?;
    }
    Ok((y, stats))
}

/// Inference-mode Chan-DS on a single `[C,H,W]` tensor.
pub fn chan_ds_eval<T: Scalar>(
    x: &Tensor<T>,
    cfg: &ChanDsConfig,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(ExecPolicy::Sequential);
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xv = g.constant(x.clone().reshape(shape)?);
    let vars = store.bind(&mut g, false);
    let (y, _) = chan_ds(&mut g, xv, cfg, &vars, store, false)?;
    let out = g.value(y).clone();
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize, channels: usize, factors: (usize, usize)) -> ChanDsConfig {
        ChanDsConfig {
            layers,
            channels,
            kernel: (3, 3),
            factors,
            use_avgpool: true,
        }
    }

    fn stage(kh: usize, kw: usize, kind: PoolKind) -> PoolStage {
        PoolStage { kh, kw, kind }
    }

    #[test]
    fn plans() {
        assert_eq!(pool_plan(&cfg(1, 1, (1, 1))), vec![]);
        assert_eq!(pool_plan(&cfg(1, 1, (2, 2))), vec![stage(2, 2, PoolKind::Max)]);
        assert_eq!(
            pool_plan(&cfg(1, 1, (2, 8))),
            vec![stage(2, 2, PoolKind::Max), stage(1, 4, PoolKind::Max)]
        );
        assert_eq!(
            pool_plan(&cfg(1, 1, (2, 32))),
            vec![
                stage(2, 2, PoolKind::Max),
                stage(1, 4, PoolKind::Max),
                stage(1, 4, PoolKind::Avg)
            ]
        );
        assert_eq!(
            pool_plan(&cfg(1, 1, (8, 2))),
            vec![stage(2, 2, PoolKind::Max), stage(4, 1, PoolKind::Max)]
        );
        let no_avg = ChanDsConfig {
            use_avgpool: false,
            ..cfg(1, 1, (2, 32))
        };
        assert_eq!(
            pool_plan(&no_avg),
            vec![stage(2, 2, PoolKind::Max), stage(1, 16, PoolKind::Max)]
        );
    }

    #[test]
    fn table_shapes() {
        let input = [1, 224, 224];
        assert_eq!(cfg(2, 16, (2, 2)).output_shape(input).unwrap(), [16, 112, 112]);
        assert_eq!(cfg(1, 1, (2, 8)).output_shape(input).unwrap(), [1, 112, 28]);
        assert_eq!(cfg(1, 1, (2, 32)).output_shape(input).unwrap(), [1, 112, 7]);
    }

    #[test]
    fn realized_shape_matches_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (c, factors) in [(cfg(1, 1, (2, 32)), [1, 112, 7]), (cfg(2, 3, (8, 2)), [3, 4, 16])] {
            let input = if factors[0] == 1 { [1, 224, 224] } else { [2, 32, 32] };
            let mut store = ParamStore::<f32>::new();
            init_chan_ds(&c, input[0], &mut store, &mut rng);
            let x = Tensor::uniform(input, 1.0, &mut rng);
            let y = chan_ds_eval(&x, &c, &store).unwrap();
            assert_eq!(y.shape(), &factors[..]);
        }
    }

    #[test]
    fn non_divisible_rejected() {
        let err = cfg(1, 1, (3, 2)).output_shape([1, 224, 224]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn pooling_never_exceeds_input_max() {
        // identity conv, batch norm with unit running stats ≈ identity
        let c = cfg(1, 1, (2, 32));
        let mut store = ParamStore::<f64>::new();
        init_chan_ds(&c, 1, &mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        *store.get_mut("chan_ds.conv0.weight").unwrap() = k;
        let x = Tensor::uniform([1, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = chan_ds_eval(&x, &c, &store).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        let xmax = x.data().iter().copied().fold(f64::MIN, f64::max) * scale;
        assert!(y.data().iter().all(|&v| v <= xmax + 1e-15));
    }
}
