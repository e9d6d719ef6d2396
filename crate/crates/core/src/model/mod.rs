//! Tiny deterministic decoder-only transformer with block-addressable parameters.

mod batch;
pub mod checkpoint;
mod config;
mod forward;
mod loss;
mod store;

pub use batch::Batch;
pub use config::ModelConfig;
pub use forward::{forward, forward_block, Activation, Hidden};
pub use loss::loss;
pub use store::{block_layout, init_model, BlockKind, Fnv, ParamBlock, ParamStore, TensorSpec};

/// Forward the whole model and return the mean cross-entropy.
pub fn evaluate<T: crate::real::Real>(store: &ParamStore<T>, batch: &Batch) -> crate::error::Result<f64> {
    let logits = forward(store, batch)?;
    loss(&logits, batch)
}
