//! Miniature conditional U-Net partitioned into nine addressable blocks.

mod block;
mod config;
mod encoder;
mod layers;
mod model;

pub use block::{BlockId, LayerEntry, LayerKind};
pub use config::{UNetConfig, DOWNSAMPLES};
pub use encoder::{tokenize, ConditionEncoder, EncodedCaptions, NULL_ID, UNK_ID};
pub(crate) use model::fingerprint_params;
pub use model::{BlockTrace, Conditioning, UNet, BASE_MODEL_KIND, EMBEDDING_PARAM};
