//! CP-Mamba block, full classifier, weight initialization and checkpoints.
//!
//! Parameter names are stable and used verbatim in checkpoints:
//!
//! | prefix | tensors |
//! |---|---|
//! | `chan_ds.conv{l}` | `weight [C_cd, C_in, kh, kw]`, `bias` |
//! | `chan_ds.bn{l}` | `weight`, `bias`; buffers `running_mean`, `running_var` |
//! | `embed` | `weight [P, dim]`, `bias` |
//! | `blocks.{i}.norm` | `weight`, `bias` |
//! | `blocks.{i}.p1`, `.p2`, `.p3` | `weight`, `bias` (`p1.{0,1,2}` for three stacked maps) |
//! | `blocks.{i}.{fw,bw}.conv` | `weight [dim, dim, 1]`, `bias` |
//! | `blocks.{i}.{fw,bw}.norm` | `weight`, `bias` |
//! | `blocks.{i}.{fw,bw}.ssm` | `a_log`, `d`, `w_b`, `w_c`, `w_dt1`, `w_dt2`, `dt_bias` |
//! | `head` | `weight [dim, Q]`, `bias` |

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_MAGIC};
pub use config::{hash_json, presets, ModelConfig, ProjectionKind};
pub use network::{
    block_forward, init_weights, model_forward, stack, BlockTrace, Forward, Model, LN_EPS,
};
pub use params::{Binding, ParamStore};
