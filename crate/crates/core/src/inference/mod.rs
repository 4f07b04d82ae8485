//! TSK inference in its softmax form: membership, preliminary firing,
//! optional layer normalization, softmax or 1.5-entmax, and the affine
//! decision layer.

pub mod firing;
pub mod head;
pub mod network;

pub use firing::{
    entmax15_row, layer_normalize, normalize_firing, normalized_entropy, preliminary_firing, softmax_row, FiringMode,
    Normalizer,
};
pub use head::{CertaintyMode, TskHead};
pub use network::{BlockConfig, BlockTape, FiringRecord, InferenceConfig, LayerNormParams, Network, NfnBlock, Tape};
