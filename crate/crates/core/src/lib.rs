//! Drag-style video editing on a video diffusion U-Net.
//!
//! The editing flow fine-tunes a sample-specific LoRA on the input video,
//! inverts its latent with DDIM, optimizes the noisy latent so that feature
//! patches around handle points move toward their targets (tracking the handles
//! as it goes), and denoises the result with mutual self-attention guided by
//! the original video. Temporal consistency is scored by mean optical-flow
//! magnitude.

pub mod codec;
pub mod ddim;
pub mod dove;
pub mod error;
pub mod instruction;
pub mod lora;
pub mod metrics;
pub mod msa;
pub mod pipeline;
pub mod remote;
pub mod schedule;
pub mod service;
pub mod unet;
pub mod util;

pub use error::{Error, Result};
