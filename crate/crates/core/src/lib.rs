//! Block-wise low-rank adaptation for a miniature diffusion U-Net.

pub mod adapter;
pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod optim;
pub mod sampler;
pub mod tensor;
pub mod unet;

pub use adapter::{inject, merge, Adapter, AdapterKind, BlockRankPolicy, LayerAdapter};
pub use error::{Error, Result};
pub use tensor::{Element, Parameter, Tensor};
pub use unet::{BlockId, Conditioning, LayerEntry, LayerKind, UNet, UNetConfig};
pub use data::Image;
pub use diffusion::{NoiseSchedule, TrainConfig, TrainDataset};
pub use sampler::SamplerConfig;
pub use config::ExperimentConfig;
