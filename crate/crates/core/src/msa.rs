//! Mutual self-attention denoising.
//!
//! The original and the edited noisy latents are denoised in lockstep. At each
//! step the original branch runs normally and its attention keys/values are
//! recorded; the edited branch then runs with its own queries against those
//! keys/values in the designated layers:
//! `ŷ = softmax(Q(x̂) K(x)ᵀ / √d) V(x)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, LatentVideo, VideoFrames};
use crate::ddim::Ddim;
use crate::error::{Error, Result};
use crate::unet::{capture_attention, predict_noise, AttentionKind, AttentionMode, Backbone, ForwardOptions};

/// Softmax over the last axis, composed of differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let shifted = x.broadcast_sub(&x.max_keepdim(last)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(last)?)?)
}

/// `softmax(q kᵀ / √d) v` over the last two axes of `(batch, tokens, d)` tensors.
pub fn msa_attention(q: &Tensor, k: &Tensor, v: &Tensor, d: f64) -> Result<Tensor> {
    if !(d > 0.0) {
        return Err(Error::Config(format!("attention dimension must be positive, got {d}")));
    }
    let kd = k.dims();
    let vd = v.dims();
    if kd.len() != vd.len() || kd[..kd.len() - 1] != vd[..vd.len() - 1] {
        return Err(Error::Structural(format!(
            "keys {kd:?} and values {vd:?} disagree on token count"
        )));
    }
    let scores = (q.broadcast_matmul(&k.transpose(k.rank() - 2, k.rank() - 1)?)? / d.sqrt())?;
    let weights = softmax_last(&scores)?;
    let tokens = v.rank() - 2;
    let v0 = v.narrow(tokens, 0, 1)?;
    let offsets = v.broadcast_sub(&v0)?;
    Ok(weights.broadcast_matmul(&offsets)?.broadcast_add(&v0)?)
}

/// Splits `(batch, tokens, c)` inputs into `heads` and applies [`msa_attention`] per head.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, tq, c) = q.dims3()?;
    let (_, tk, _) = k.dims3()?;
    if heads == 1 {
        return msa_attention(q, k, v, c as f64);
    }
    let dh = c / heads;
    let split =
        |x: &Tensor, t: usize| -> Result<Tensor> { Ok(x.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?) };
    let y = msa_attention(&split(q, tq)?, &split(k, tk)?, &split(v, tk)?, dh as f64)?;
    Ok(y.transpose(1, 2)?.contiguous()?.reshape((b, tq, c))?)
}

/// Which attention layers swap keys/values, and over which steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsaPlan {
    /// Explicit layer indices; `None` designates every spatial self-attention.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Also swap inside the motion modules when `layers` is `None`.
    #[serde(default)]
    pub include_temporal: bool,
    /// Highest step with swapping active; `None` means the starting step.
    #[serde(default)]
    pub start_step: Option<usize>,
    /// Lowest step with swapping active.
    #[serde(default = "default_end_step")]
    pub end_step: usize,
}

fn default_end_step() -> usize {
    1
}

impl Default for MsaPlan {
    fn default() -> Self {
        Self {
            layers: None,
            include_temporal: false,
            start_step: None,
            end_step: 1,
        }
    }
}

impl MsaPlan {
    /// A plan that never swaps.
    pub fn disabled() -> Self {
        Self {
            layers: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn resolve_layers(&self, backbone: &dyn Backbone) -> Result<Vec<usize>> {
        let infos = backbone.attention_layers();
        match &self.layers {
            Some(layers) => {
                for l in layers {
                    if !infos.iter().any(|i| i.index == *l) {
                        return Err(Error::Config(format!("designated layer {l} does not exist")));
                    }
                }
                Ok(layers.clone())
            }
            None => Ok(infos
                .iter()
                .filter(|i| i.kind == AttentionKind::Spatial || self.include_temporal)
                .map(|i| i.index)
                .collect()),
        }
    }

    pub fn active_at(&self, step: usize, from_step: usize) -> bool {
        step >= self.end_step && step <= self.start_step.unwrap_or(from_step)
    }
}

/// A latent tagged with the sampling step it sits at.
#[derive(Debug, Clone)]
pub struct StepLatent {
    pub step: usize,
    pub latent: LatentVideo,
}

#[derive(Debug, Clone)]
pub struct PairOutput {
    pub original: LatentVideo,
    pub edited: LatentVideo,
}

impl PairOutput {
    pub fn decode(&self, codec: &dyn Codec, fps: f64) -> Result<(VideoFrames, VideoFrames)> {
        Ok((codec.decode(&self.original, fps)?, codec.decode(&self.edited, fps)?))
    }
}

/// Denoises both branches to step 0; the edited branch attends to the original's keys/values.
pub fn denoise_pair(
    ddim: &Ddim,
    original: &StepLatent,
    edited: &StepLatent,
    plan: &MsaPlan,
    opts: &ForwardOptions,
) -> Result<PairOutput> {
    if original.step != edited.step {
        return Err(Error::Pairing(format!(
            "original latent is at step {}, edited at step {}",
            original.step, edited.step
        )));
    }
    if original.latent.dims() != edited.latent.dims() {
        return Err(Error::Pairing("original and edited latents differ in shape".into()));
    }
    let from = original.step;
    ddim.schedule.check_step(from)?;
    if let Some(start) = plan.start_step {
        ddim.schedule.check_step(start)?;
    }
    let layers = plan.resolve_layers(ddim.backbone)?;
    let mut z = LatentVideo::new(original.latent.tensor().detach(), original.latent.scale_factor())?;
    let mut z_hat = LatentVideo::new(edited.latent.tensor().detach(), edited.latent.scale_factor())?;
    for step in (1..=from).rev() {
        let t = ddim.schedule.timestep(step);
        let (eps, record) = capture_attention(ddim.backbone, &z, t, ddim.cond, opts)?;
        let edited_opts = if plan.active_at(step, from) && !layers.is_empty() {
            ForwardOptions {
                attention: AttentionMode::Mutual {
                    source: &record,
                    layers: &layers,
                },
                ..*opts
            }
        } else {
            *opts
        };
        let eps_hat = predict_noise(ddim.backbone, &z_hat, t, ddim.cond, &edited_opts)?;
        z = ddim.transition(&z, &eps, step, step - 1)?;
        z_hat = ddim.transition(&z_hat, &eps_hat, step, step - 1)?;
        z.check_finite(Some(step - 1))?;
        z_hat.check_finite(Some(step - 1))?;
    }
    Ok(PairOutput {
        original: z,
        edited: z_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn rejects_non_positive_dimension() {
        let q = t(&[1.0], (1, 1, 1));
        assert!(matches!(msa_attention(&q, &q, &q, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_values_collapse() {
        let q = t(&[0.3, -1.0, 2.0, 0.5, 0.1, 0.0], (1, 3, 2));
        let k = t(&[1.0, 2.0, -1.0, 0.5], (1, 2, 2));
        let v = t(&[7.0, -3.0, 7.0, -3.0], (1, 2, 2));
        let y = msa_attention(&q, &k, &v, 2.0).unwrap();
        for row in y.get(0).unwrap().to_vec2::<f64>().unwrap() {
            assert_eq!(row, vec![7.0, -3.0]);
        }
    }

    #[test]
    fn multi_head_with_one_head_matches_kernel() {
        let q = t(&[0.3, -1.0, 2.0, 0.5], (1, 2, 2));
        let a = multi_head_attention(&q, &q, &q, 1).unwrap();
        let b = msa_attention(&q, &q, &q, 2.0).unwrap();
        assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn plan_range() {
        let p = MsaPlan {
            start_step: Some(30),
            end_step: 10,
            ..MsaPlan::default()
        };
        assert!(p.active_at(30, 40) && p.active_at(10, 40));
        assert!(!p.active_at(31, 40) && !p.active_at(9, 40));
        assert!(MsaPlan::default().active_at(40, 40));
    }
}
