use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{model_forward, stack, Model};
use crate::par::{self, ExecPolicy};
use crate::tensor::{Scalar, Tensor};

/// `Σ_m Σ_m' a[m]·b[m+m']` with out-of-range terms taken as zero, computed
/// as `Σ_m a[m]·(suffix sum of b from m)`.
pub fn corr(a: &[f64], b: &[f64]) -> f64 {
    let mut suffix = 0.0;
    let mut acc = 0.0;
    for m in (0..a.len().min(b.len())).rev() {
        suffix += b[m];
        acc += a[m] * suffix;
    }
    // a longer than b contributes nothing past b's end
    acc
}

/// Patch cross-correlation averaged over all ordered patch pairs and the
/// batch, for `x [B,N,D]`.
///
/// `corr` is bilinear, so the double mean over patches reduces to `corr`
/// of the patch-mean with itself: O(B·N·D) instead of O(B·N²·D).
pub fn corr_avg<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    let [b, n, d] = x.shape()[..] else {
        return Err(Error::invalid(format!("corr_avg expects [B,N,D], got {:?}", x.shape())));
    };
    if b == 0 || n == 0 {
        return Err(Error::invalid("corr_avg on an empty batch"));
    }
    let data = x.data();
    let mut total = 0.0;
    for bi in 0..b {
        let mut mean = vec![0.0; d];
        for ni in 0..n {
            let row = &data[(bi * n + ni) * d..(bi * n + ni + 1) * d];
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        total += corr(&mean, &mean);
    }
    Ok(total / b as f64)
}

/// Inputs and outputs of the three projections of block 0, `[B,N,dim]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionCapture<T> {
    pub p1_in: Tensor<T>,
    pub p1_out: Tensor<T>,
    pub p2_in: Tensor<T>,
    pub p2_out: Tensor<T>,
    pub p3_in: Tensor<T>,
    pub p3_out: Tensor<T>,
}

/// Frozen-inference forward pass recording the projection activations.
pub fn capture_projections<T: Scalar>(
    model: &Model<T>,
    xs: &[&Tensor<T>],
    policy: ExecPolicy,
) -> Result<ProjectionCapture<T>> {
    let mut g = Graph::new(policy);
    let x = g.constant(stack(xs)?);
    let vars = model.store.bind(&mut g, false);
    let f = model_forward(&mut g, x, &model.cfg, &model.store, &vars, false)?;
    let t = f.blocks.first().ok_or_else(|| Error::invalid("model has no blocks"))?;
    let v = |var| g.value(var).clone();
    Ok(ProjectionCapture {
        p1_in: v(t.x_proj),
        p1_out: v(t.z),
        p2_in: v(t.x_proj),
        p2_out: v(t.x_fw),
        p3_in: v(t.y_sum),
        p3_out: v(t.p3_out),
    })
}

/// One row per projection: averaged correlation at its input and output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrRow {
    pub projection: String,
    pub at_input: f64,
    pub at_output: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrTable {
    pub config_hash: String,
    pub projection_kind: String,
    pub samples: usize,
    pub rows: Vec<CorrRow>,
}

const CAPTURE_CHUNK: usize = 16;

/// Averaged patch correlation at the input and output of P1, P2 and P3 over
/// `xs`, processed in chunks and averaged with per-chunk batch weights.
pub fn corr_table<T: Scalar>(model: &Model<T>, xs: &[&Tensor<T>], policy: ExecPolicy) -> Result<CorrTable> {
    if xs.is_empty() {
        return Err(Error::invalid("corr needs at least one sample"));
    }
    let chunks: Vec<&[&Tensor<T>]> = xs.chunks(CAPTURE_CHUNK).collect();
    let inner = if policy.is_parallel() { ExecPolicy::Sequential } else { policy };
    let parts = par::map_slice(policy, &chunks, |c| -> Result<(usize, [f64; 6])> {
        let cap = capture_projections(model, c, inner)?;
        Ok((
            c.len(),
            [
                corr_avg(&cap.p1_in)?,
                corr_avg(&cap.p1_out)?,
                corr_avg(&cap.p2_in)?,
                corr_avg(&cap.p2_out)?,
                corr_avg(&cap.p3_in)?,
                corr_avg(&cap.p3_out)?,
            ],
        ))
    });
    let mut acc = [0.0; 6];
    for p in parts {
        let (n, vals) = p?;
        for (a, v) in acc.iter_mut().zip(vals) {
            *a += v * n as f64;
        }
    }
    let total = xs.len() as f64;
    let rows = ["P1", "P2", "P3"]
        .iter()
        .enumerate()
        .map(|(i, name)| CorrRow {
            projection: name.to_string(),
            at_input: acc[2 * i] / total,
            at_output: acc[2 * i + 1] / total,
        })
        .collect();
    Ok(CorrTable {
        config_hash: model.cfg.hash(),
        projection_kind: model.cfg.projection.name().to_string(),
        samples: xs.len(),
        rows,
    })
}
