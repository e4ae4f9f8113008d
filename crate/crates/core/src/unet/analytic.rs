use candle_core::Tensor;

use super::{AttentionLayerInfo, AttentionRecord, Backbone, ConditioningEmbedding, ForwardOptions};
use crate::error::{Error, Result};
use crate::lora::LoraTarget;

/// Predicts zero noise and exposes the latent itself as its only feature layer.
///
/// After the bilinear resize in [`super::extract_features`] the feature map is the
/// upsampled latent, which makes drag optimization analytically transparent.
#[derive(Debug, Clone, Copy)]
pub struct TransparentBackbone {
    pub channels: usize,
}

/// The zero-noise predictor; DDIM transitions under it reduce to rescaling.
pub type ZeroNoiseBackbone = TransparentBackbone;

impl TransparentBackbone {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }
}

impl Backbone for TransparentBackbone {
    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn attention_layers(&self) -> &[AttentionLayerInfo] {
        &[]
    }

    fn lora_targets(&self) -> Vec<LoraTarget> {
        Vec::new()
    }

    fn feature_layers(&self) -> usize {
        1
    }

    fn default_feature_layer(&self) -> usize {
        0
    }

    fn forward(
        &self,
        z: &Tensor,
        _timestep: usize,
        _cond: &ConditioningEmbedding,
        _opts: &ForwardOptions,
        _temporal: bool,
        capture: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        Ok((z.zeros_like()?, capture.then(AttentionRecord::default)))
    }

    fn forward_features(
        &self,
        z: &Tensor,
        _timestep: usize,
        _cond: &ConditioningEmbedding,
        layer: usize,
        _opts: &ForwardOptions,
        _temporal: bool,
    ) -> Result<Tensor> {
        if layer != 0 {
            return Err(Error::Config(format!("feature layer {layer} does not exist")));
        }
        Ok(z.clone())
    }
}
