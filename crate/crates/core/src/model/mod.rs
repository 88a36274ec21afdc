//! Vision-language transformer with attention capture, head pruning and
//! oracle-parameter transfer.

mod config;
pub mod layers;
mod params;
mod vlt;

pub use config::{BlockType, EncoderKind, HeadAddress, ModelConfig, PruneMask};
pub use params::{Init, ParamId, ParamStore, INIT_STD};
pub use vlt::{
    argmax, AttentionRecord, ForwardOutput, ModelInput, ParamGroup, TransferScope, VisualTokens, VlTransformer,
};
