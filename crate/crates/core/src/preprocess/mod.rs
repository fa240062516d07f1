//! Front end of the classifier: channel fusion with downsampling,
//! patch segmentation, patch embedding and position encoding.

mod chan_ds;
mod embed;
mod segment;

pub use chan_ds::{chan_ds, chan_ds_eval, init_chan_ds, pool_plan, ChanDsConfig, PoolStage, BN_EPS, BN_MOMENTUM};
pub use embed::{patch_embed, patch_embed_graph, pos_encode, pos_encoding};
pub use segment::{segment, segment_graph, segment_indices, unsegment, PatchGeometry};
