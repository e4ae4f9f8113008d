//! Video U-Net abstraction.
//!
//! A [`Backbone`] predicts noise for a batch of latent videos, exposes
//! intermediate decoder features, and lets callers capture or replace the
//! keys/values of its attention layers. The crate ships the desk-scale
//! [`ToyVideoUnet`] plus two analytic backbones used as test oracles; a wrapper
//! around pretrained weights plugs in by implementing the same trait.

mod analytic;
mod toy;

pub use analytic::{TransparentBackbone, ZeroNoiseBackbone};
pub use toy::{BackboneConfig, ToyVideoUnet};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::LatentVideo;
use crate::error::{Error, Result};
use crate::lora::{LoraTarget, LoraWeights};

/// Decoder features resized to half the pixel resolution: `(frames, channels, h/2, w/2)`.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    data: Tensor,
}

impl FeatureVolume {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::Structural(format!(
                "feature volume must be rank 4, got {:?}",
                data.dims()
            )));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// `(frames, channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("rank checked at construction")
    }

    pub fn detach(&self) -> Self {
        Self {
            data: self.data.detach(),
        }
    }
}

/// Text-side conditioning; `None` is the null embedding.
#[derive(Debug, Clone, Default)]
pub struct ConditioningEmbedding {
    pub embedding: Option<Tensor>,
}

impl ConditioningEmbedding {
    pub fn null() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Self-attention over the spatial tokens of each frame.
    Spatial,
    /// Motion-module attention over the frame axis at each spatial location.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayerInfo {
    pub index: usize,
    pub kind: AttentionKind,
    pub name: String,
}

/// Keys and values of one attention layer, before the head split: `(batch, tokens, d)`.
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub layer: usize,
    pub kind: AttentionKind,
    pub keys: Tensor,
    pub values: Tensor,
}

/// Keys/values of every attention layer of one forward pass, in evaluation order.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub layers: Vec<LayerKv>,
}

impl AttentionRecord {
    pub fn get(&self, layer: usize) -> Option<&LayerKv> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn spatial_len(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == AttentionKind::Spatial).count()
    }
}

/// How attention layers source their keys and values.
#[derive(Debug, Clone, Copy, Default)]
pub enum AttentionMode<'a> {
    #[default]
    Normal,
    /// Listed layers take keys/values from `source` instead of their own input.
    Mutual {
        source: &'a AttentionRecord,
        layers: &'a [usize],
    },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub lora: Option<&'a LoraWeights>,
    pub attention: AttentionMode<'a>,
    /// Treat every frame as an independent one-frame video with the motion modules off.
    pub per_frame: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn with_lora(lora: Option<&'a LoraWeights>) -> Self {
        Self {
            lora,
            ..Self::default()
        }
    }
}

/// A noise-prediction network over batches of latent videos.
///
/// Tensors passed to `forward` and `forward_features` have shape
/// `(videos, frames, channels, height, width)`.
pub trait Backbone: Send + Sync {
    fn latent_channels(&self) -> usize;

    fn attention_layers(&self) -> &[AttentionLayerInfo];

    fn lora_targets(&self) -> Vec<LoraTarget>;

    /// Number of decoder layers whose output can feed the feature map.
    fn feature_layers(&self) -> usize;

    fn default_feature_layer(&self) -> usize;

    /// Predicted noise, plus the attention record when `capture` is set.
    fn forward(
        &self,
        z: &Tensor,
        timestep: usize,
        cond: &ConditioningEmbedding,
        opts: &ForwardOptions,
        temporal: bool,
        capture: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)>;

    /// Raw output of decoder layer `layer`: `(videos, frames, c_f, h', w')`.
    fn forward_features(
        &self,
        z: &Tensor,
        timestep: usize,
        cond: &ConditioningEmbedding,
        layer: usize,
        opts: &ForwardOptions,
        temporal: bool,
    ) -> Result<Tensor>;
}

fn batch_view(z: &LatentVideo, per_frame: bool) -> Result<Tensor> {
    let (l, c, h, w) = z.dims();
    Ok(if per_frame {
        z.tensor().reshape((l, 1, c, h, w))?
    } else {
        z.tensor().unsqueeze(0)?
    })
}

/// Noise prediction for one latent video.
pub fn predict_noise(
    backbone: &dyn Backbone,
    z: &LatentVideo,
    timestep: usize,
    cond: &ConditioningEmbedding,
    opts: &ForwardOptions,
) -> Result<LatentVideo> {
    let (noise, _) = backbone.forward(
        &batch_view(z, opts.per_frame)?,
        timestep,
        cond,
        opts,
        !opts.per_frame,
        false,
    )?;
    z.with_data(noise.reshape(z.tensor().shape())?)
}

/// Noise prediction that also records every attention layer's keys and values.
pub fn capture_attention(
    backbone: &dyn Backbone,
    z: &LatentVideo,
    timestep: usize,
    cond: &ConditioningEmbedding,
    opts: &ForwardOptions,
) -> Result<(LatentVideo, AttentionRecord)> {
    let (noise, record) = backbone.forward(
        &batch_view(z, opts.per_frame)?,
        timestep,
        cond,
        opts,
        !opts.per_frame,
        true,
    )?;
    let record = record.ok_or_else(|| Error::Structural("backbone did not produce an attention record".into()))?;
    Ok((z.with_data(noise.reshape(z.tensor().shape())?)?, record))
}

/// Decoder features of layer `layer`, bilinearly resized to `(h/2, w/2)` of the pixel video.
pub fn extract_features(
    backbone: &dyn Backbone,
    z: &LatentVideo,
    timestep: usize,
    cond: &ConditioningEmbedding,
    layer: usize,
    opts: &ForwardOptions,
) -> Result<FeatureVolume> {
    if layer >= backbone.feature_layers() {
        return Err(Error::Config(format!(
            "feature layer {layer} does not exist (backbone has {})",
            backbone.feature_layers()
        )));
    }
    let (l, _, hl, wl) = z.dims();
    let sf = z.scale_factor();
    if !(hl * sf).is_multiple_of(2) || !(wl * sf).is_multiple_of(2) {
        return Err(Error::Structural("pixel size must be even to halve".into()));
    }
    let raw = backbone.forward_features(
        &batch_view(z, opts.per_frame)?,
        timestep,
        cond,
        layer,
        opts,
        !opts.per_frame,
    )?;
    let (_, _, cf, fh, fw) = raw.dims5()?;
    let raw = raw.reshape((l, cf, fh, fw))?;
    FeatureVolume::new(resize_bilinear(&raw, hl * sf / 2, wl * sf / 2)?)
}

/// Interpolation matrix `(out, in)` for linear resizing with half-pixel centers.
pub fn linear_resize_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of the last two axes of a rank-4 tensor; differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (a, b, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = Device::Cpu;
    let ry = Tensor::from_vec(linear_resize_matrix(h, out_h), (out_h, h), &dev)?.to_dtype(x.dtype())?;
    let rxt = Tensor::from_vec(linear_resize_matrix(w, out_w), (out_w, w), &dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let flat = x.reshape((a * b, h, w))?;
    let cols = flat.broadcast_matmul(&rxt)?;
    let rows = ry.broadcast_matmul(&cols)?;
    Ok(rows.reshape((a, b, out_h, out_w))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_matrix_rows_sum_to_one() {
        for (i, o) in [(8, 32), (4, 8), (5, 3)] {
            let m = linear_resize_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let x = Tensor::full(2.5f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 16, 16).unwrap();
        assert_eq!(y.dims(), &[1, 2, 16, 16]);
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 2.5).abs() < 1e-14);
        }
    }
}
