use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Binding, ModelConfig, ParamStore, ProjectionKind};
use crate::autodiff::{BnStats, Graph, Var};
use crate::error::{Error, Result, StageExt};
use crate::par::ExecPolicy;
use crate::preprocess::{chan_ds, init_chan_ds, pos_encoding, segment_graph};
use crate::ssm::{selective_ssm, SsmVars, SsmWeights};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

fn affine_params<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::uniform([fan_in, fan_out], bound, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros([fan_out]));
}

fn conv1d_params<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    dim: usize,
    k: usize,
    rng: &mut R,
) {
    let bound = 1.0 / ((dim * k) as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::uniform([dim, dim, k], bound, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros([dim]));
}

fn norm_params<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert(format!("{name}.weight"), Tensor::ones([dim]));
    store.insert(format!("{name}.bias"), Tensor::zeros([dim]));
}

fn projection_params<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    kind: ProjectionKind,
    is_p3: bool,
    dim: usize,
    rng: &mut R,
) {
    match (kind, is_p3) {
        (ProjectionKind::Conv1dK3, false) => conv1d_params(store, name, dim, 3, rng),
        (ProjectionKind::Conv1dK3, true) => conv1d_params(store, name, dim, 1, rng),
        (ProjectionKind::Linear3, false) => {
            for i in 0..3 {
                affine_params(store, &format!("{name}.{i}"), dim, dim, rng);
            }
        }
        _ => affine_params(store, name, dim, dim, rng),
    }
}

/// Fresh weights for `cfg`: affine/conv weights `U(±1/√fan_in)`, zero biases,
/// unit/zero norm affine, SSM weights per [`SsmWeights::init`].
pub fn init_weights<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let (_, p) = cfg.layout()?;
    let dim = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_chan_ds(&cfg.chan_ds, cfg.input_shape[0], &mut store, &mut rng);
    affine_params(&mut store, "embed", p, dim, &mut rng);
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        norm_params(&mut store, &format!("{b}.norm"), dim);
        for (j, p3) in [("p1", false), ("p2", false), ("p3", true)] {
            projection_params(&mut store, &format!("{b}.{j}"), cfg.projection, p3, dim, &mut rng);
        }
        for dir in ["fw", "bw"] {
            conv1d_params(&mut store, &format!("{b}.{dir}.conv"), dim, 1, &mut rng);
            norm_params(&mut store, &format!("{b}.{dir}.norm"), dim);
            SsmWeights::<T>::init(dim, cfg.dim_s, cfg.dt_rank, &mut rng)
                .insert_into(&mut store, &format!("{b}.{dir}.ssm"));
        }
    }
    affine_params(&mut store, "head", dim, cfg.n_classes, &mut rng);
    Ok(store)
}

/// Kernel-`k` convolution along the patch axis of `x [B,N,dim]`.
fn seq_conv<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &Binding, name: &str) -> Result<Var> {
    let w = vars.get(&format!("{name}.weight"))?;
    let b = vars.get(&format!("{name}.bias"))?;
    let k = g.shape(w)[2];
    let xt = g.transpose_last2(x)?;
    let y = g.conv1d(xt, w, Some(b), k / 2)?;
    g.transpose_last2(y)
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &Binding, name: &str) -> Result<Var> {
    let w = vars.get(&format!("{name}.weight"))?;
    let b = vars.get(&format!("{name}.bias"))?;
    g.affine(x, w, Some(b))
}

fn projection<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: &Binding,
    name: &str,
    kind: ProjectionKind,
    is_p3: bool,
) -> Result<Var> {
    match (kind, is_p3) {
        (ProjectionKind::Conv1dK3, _) => seq_conv(g, x, vars, name),
        (ProjectionKind::Linear3, false) => {
            let mut y = x;
            for i in 0..3 {
                y = linear(g, y, vars, &format!("{name}.{i}"))?;
            }
            Ok(y)
        }
        _ => linear(g, x, vars, name),
    }
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &Binding, name: &str) -> Result<Var> {
    let w = vars.get(&format!("{name}.weight"))?;
    let b = vars.get(&format!("{name}.bias"))?;
    g.layer_norm(x, w, b, T::of(LN_EPS))
}

/// Handles to the intermediate activations of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub x_proj: Var,
    /// P1 output (gate pre-activation).
    pub z: Var,
    /// P2 output.
    pub x_fw: Var,
    /// Gated forward / backward branch outputs, both in canonical time order.
    pub y_fw: Var,
    pub y_bw: Var,
    /// P3 input.
    pub y_sum: Var,
    /// P3 output (before the residual).
    pub p3_out: Var,
    pub out: Var,
}

fn branch<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ModelConfig,
    vars: &Binding,
    prefix: &str,
) -> Result<Var> {
    let h = seq_conv(g, x, vars, &format!("{prefix}.conv"))?;
    let h = layer_norm(g, h, vars, &format!("{prefix}.norm"))?;
    let ssm = SsmVars::from_binding(vars, &format!("{prefix}.ssm"))?;
    let (y, _) = selective_ssm(g, h, &ssm, cfg.discretization, cfg.scan)?;
    Ok(y)
}

/// One CP-Mamba block on `x [B,N,dim]`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ModelConfig,
    vars: &Binding,
    index: usize,
) -> Result<BlockTrace> {
    let p = format!("blocks.{index}");
    let kind = cfg.projection;
    let x_proj = layer_norm(g, x, vars, &format!("{p}.norm"))?;
    let z = projection(g, x_proj, vars, &format!("{p}.p1"), kind, false)?;
    let x_fw = projection(g, x_proj, vars, &format!("{p}.p2"), kind, false)?;
    let x_bw = g.flip(x_fw, 1)?;
    let y_fw = branch(g, x_fw, cfg, vars, &format!("{p}.fw"))?;
    let y_bw = branch(g, x_bw, cfg, vars, &format!("{p}.bw"))?;
    let y_bw = g.flip(y_bw, 1)?;
    let gate = g.silu(z)?;
    let y_fw = g.mul(y_fw, gate)?;
    let y_bw = g.mul(y_bw, gate)?;
    let y_sum = g.add(y_fw, y_bw)?;
    let p3_out = projection(g, y_sum, vars, &format!("{p}.p3"), kind, true)?;
    let out = g.add(p3_out, x_proj)?;
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite { op: "block", step: index });
    }
    Ok(BlockTrace {
        x_proj,
        z,
        x_fw,
        y_fw,
        y_bw,
        y_sum,
        p3_out,
        out,
    })
}

/// Graph outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// `[B, Q]`
    pub logits: Var,
    /// Batch-norm batch statistics (training mode only), one per Chan-DS layer.
    pub bn_stats: Vec<BnStats<T>>,
    pub blocks: Vec<BlockTrace>,
}

/// Full pipeline on `x [B,C,H,W]`: Chan-DS, segmentation, patch embedding,
/// position encoding, `depth` blocks, mean over patches, classifier.
pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    vars: &Binding,
    train: bool,
) -> Result<Forward<T>> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1..] != cfg.input_shape {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            lhs: shape,
            rhs: cfg.input_shape.to_vec(),
        });
    }
    let (fused, bn_stats) = chan_ds(g, x, &cfg.chan_ds, vars, store, train).stage("chan_ds")?;
    let seg = segment_graph(g, fused, cfg.geometry).stage("segment")?;
    let emb = linear(g, seg, vars, "embed").stage("patch_embed")?;
    let (n, _) = cfg.layout()?;
    let pe = g.constant(pos_encoding(n, cfg.dim).stage("pos_encode")?);
    let mut h = g.add(emb, pe).stage("pos_encode")?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let t = block_forward(g, h, cfg, vars, i).stage("block")?;
        h = t.out;
        blocks.push(t);
    }
    let pooled = g.mean_axis(h, 1).stage("pool")?;
    let logits = linear(g, pooled, vars, "head").stage("head")?;
    Ok(Forward {
        logits,
        bn_stats,
        blocks,
    })
}

/// Stack equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let mut data = Vec::with_capacity(first.len() * xs.len());
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        data.extend_from_slice(x.data());
    }
    let mut shape = vec![xs.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let store = init_weights(&cfg, seed)?;
        Ok(Model { cfg, store })
    }

    /// Inference-mode logits `[B, Q]` for a batch of `[C,H,W]` inputs.
    pub fn logits(&self, xs: &[&Tensor<T>], policy: ExecPolicy) -> Result<Tensor<T>> {
        let mut g = Graph::new(policy);
        let x = g.constant(stack(xs)?);
        let vars = self.store.bind(&mut g, false);
        let f = model_forward(&mut g, x, &self.cfg, &self.store, &vars, false)?;
        Ok(g.value(f.logits).clone())
    }

    /// Arg-max class per input; ties go to the lower index.
    pub fn predict(&self, xs: &[&Tensor<T>], policy: ExecPolicy) -> Result<Vec<usize>> {
        let logits = self.logits(xs, policy)?;
        let q = self.cfg.n_classes;
        Ok(logits
            .data()
            .chunks(q)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}
