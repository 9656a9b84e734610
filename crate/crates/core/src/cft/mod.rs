//! The cross-modality fusion transformer.

mod config;
mod correlation;
pub mod diagnostics;
mod module;

pub use config::CftConfig;
pub use correlation::{correlation_blocks, CorrelationBlocks, CorrelationMatrix};
pub use module::{attention_block, detokenize, tokenize, BlockParams, CftModule, CftOutput};
