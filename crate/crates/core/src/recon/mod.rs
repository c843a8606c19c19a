//! Block-wise reconstruction of learnable weight rounding.

mod adam;
mod config;
mod pipeline;
mod reconstruct;
mod report;
pub mod ste;

pub use adam::Adam;
pub use config::{PipelineMode, QuantScheme, ReconConfig};
pub use pipeline::{advance, advance_dropped, embed_set, layer_prefix, quantize_model, quantize_model_observed, quantize_rtn};
pub use reconstruct::{
    block_loss, dequantize_block, init_block_params, reconstruct_block, ste_gradients, ActContext, BlockParams,
    DropMask,
};
pub use report::{BlockReport, ReconReport, TrajectoryPoint};
