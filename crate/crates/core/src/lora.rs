//! Sample-specific low-rank adaptation of the attention projections.
//!
//! Every query, key and value projection `W` of every attention module gets a
//! delta `scaling * B A` with `A: r × d_in`, `B: d_out × r` and `scaling = 1/r`.
//! `B` starts at zero so a fresh injection leaves the backbone unchanged.
//! Training minimizes the denoising objective on the single input video:
//! draw a timestep `t` and noise `ε`, form `α_t z + σ_t ε`, and regress the
//! backbone's prediction onto `ε` with mean squared error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::codec::LatentVideo;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::unet::{Backbone, ConditioningEmbedding, ForwardOptions};

/// One projection that can carry a low-rank delta.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTarget {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rank: usize,
    pub seed: u64,
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 12,
            learning_rate: 5e-4,
            rank: 16,
            seed: 0,
        }
    }
}

impl LoraTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rank == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "batch_size, rank and learning_rate must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LoraPair {
    down: Var,
    up: Var,
}

/// Low-rank deltas keyed by projection name.
#[derive(Debug, Clone)]
pub struct LoraWeights {
    rank: usize,
    scaling: f64,
    targets: Vec<LoraTarget>,
    pairs: BTreeMap<String, LoraPair>,
}

impl LoraWeights {
    /// Creates a zero-effect delta slot on every target.
    pub fn inject(targets: &[LoraTarget], rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = BTreeMap::new();
        for t in targets {
            if rank > t.d_in.min(t.d_out) {
                return Err(Error::Config(format!(
                    "rank {rank} exceeds min(d_in, d_out) = {} of `{}`",
                    t.d_in.min(t.d_out),
                    t.name
                )));
            }
            let bound = 1.0 / (t.d_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
            let a: Vec<f64> = (0..rank * t.d_in).map(|_| dist.sample(&mut rng)).collect();
            let down = Var::from_tensor(&Tensor::from_vec(a, (rank, t.d_in), &Device::Cpu)?)?;
            let up = Var::zeros((t.d_out, rank), DType::F64, &Device::Cpu)?;
            pairs.insert(t.name.clone(), LoraPair { down, up });
        }
        Ok(Self {
            rank,
            scaling: 1.0 / rank as f64,
            targets: targets.to_vec(),
            pairs,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn targets(&self) -> &[LoraTarget] {
        &self.targets
    }

    pub fn parameter_count(&self) -> usize {
        self.targets.iter().map(|t| self.rank * (t.d_in + t.d_out)).sum()
    }

    /// `scaling * x Aᵀ Bᵀ` for projection `name`, or `None` when it carries no delta.
    pub fn delta(&self, name: &str, x: &Tensor) -> Result<Option<Tensor>> {
        let Some(pair) = self.pairs.get(name) else {
            return Ok(None);
        };
        let h = x.broadcast_matmul(&pair.down.as_tensor().t()?)?;
        let y = h.broadcast_matmul(&pair.up.as_tensor().t()?)?;
        Ok(Some((y * self.scaling)?))
    }

    /// Trainable variables in target order, `A` before `B`.
    pub fn vars(&self) -> Vec<Var> {
        self.targets
            .iter()
            .flat_map(|t| {
                let p = &self.pairs[&t.name];
                [p.down.clone(), p.up.clone()]
            })
            .collect()
    }

    pub fn down(&self, name: &str) -> Option<&Var> {
        self.pairs.get(name).map(|p| &p.down)
    }

    pub fn up(&self, name: &str) -> Option<&Var> {
        self.pairs.get(name).map(|p| &p.up)
    }

    /// An independent copy whose variables no longer alias `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (k, p) in &self.pairs {
            pairs.insert(
                k.clone(),
                LoraPair {
                    down: Var::from_tensor(&p.down.as_tensor().copy()?)?,
                    up: Var::from_tensor(&p.up.as_tensor().copy()?)?,
                },
            );
        }
        Ok(Self {
            rank: self.rank,
            scaling: self.scaling,
            targets: self.targets.clone(),
            pairs,
        })
    }

    fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for v in self.vars() {
            out.extend(v.as_tensor().flatten_all()?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    /// Bitwise equality of all deltas.
    pub fn same_values(&self, other: &LoraWeights) -> Result<bool> {
        if self.targets != other.targets || self.rank != other.rank {
            return Ok(false);
        }
        let (a, b) = (self.flat_values()?, other.flat_values()?);
        Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Writes `weights.bin` (little-endian f64, targets in order, `A` then `B`) and `manifest.json`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self.flat_values()?.into_iter().flat_map(f64::to_le_bytes).collect();
        let bin = dir.join("weights.bin");
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let manifest = LoraManifest {
            rank: self.rank,
            scaling: self.scaling,
            targets: self.targets.clone(),
            config_hash: config_hash.to_string(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Loads weights and returns them with the stored config hash.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let path = dir.join("manifest.json");
        let manifest: LoraManifest = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let bin = dir.join("weights.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        let mut weights = Self::inject(&manifest.targets, manifest.rank, 0)?;
        if values.len() != weights.parameter_count() {
            return Err(Error::Structural(format!(
                "{} holds {} values, manifest needs {}",
                bin.display(),
                values.len(),
                weights.parameter_count()
            )));
        }
        let mut offset = 0;
        for v in weights.vars() {
            let n = v.elem_count();
            v.set(&Tensor::from_vec(
                values[offset..offset + n].to_vec(),
                v.shape(),
                &Device::Cpu,
            )?)?;
            offset += n;
        }
        weights.scaling = manifest.scaling;
        Ok((weights, manifest.config_hash))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraManifest {
    rank: usize,
    scaling: f64,
    targets: Vec<LoraTarget>,
    config_hash: String,
}

/// Mean squared error between the drawn noise and the prediction.
pub fn noise_regression_loss(noise: &Tensor, predicted: &Tensor) -> Result<Tensor> {
    Ok((noise - predicted)?.sqr()?.mean_all()?)
}

/// One draw of the denoising objective: noise `z` to training timestep `t` with `noise`,
/// predict it back, return the mean squared error (differentiable in the LoRA variables).
/// With `per_frame` each frame is predicted as its own one-frame video.
#[allow(clippy::too_many_arguments)]
pub fn denoising_loss(
    backbone: &dyn Backbone,
    z0: &LatentVideo,
    lora: Option<&LoraWeights>,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    noise: &Tensor,
    cond: &ConditioningEmbedding,
    per_frame: bool,
) -> Result<Tensor> {
    let (l, c, h, w) = z0.dims();
    let b = timesteps.len();
    if noise.dims() != [b, l, c, h, w] {
        return Err(Error::Structural(format!(
            "noise batch {:?} does not match ({b}, {l}, {c}, {h}, {w})",
            noise.dims()
        )));
    }
    let mut noisy = Vec::with_capacity(b);
    for (k, &t) in timesteps.iter().enumerate() {
        let (a, s) = schedule.train_rates(t);
        noisy.push(((z0.tensor() * a)? + (noise.get(k)? * s)?)?);
    }
    let noisy = Tensor::stack(&noisy, 0)?;
    let mut preds = Vec::with_capacity(b);
    let opts = ForwardOptions::with_lora(lora);
    for (k, &t) in timesteps.iter().enumerate() {
        let x = noisy.narrow(0, k, 1)?;
        let x = if per_frame { x.reshape((l, 1, c, h, w))? } else { x };
        let (p, _) = backbone.forward(&x, t, cond, &opts, !per_frame, false)?;
        preds.push(p.reshape((1, l, c, h, w))?);
    }
    let preds = Tensor::cat(&preds, 0)?;
    noise_regression_loss(noise, &preds)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean loss of each epoch's batch.
    pub epoch_loss: Vec<f64>,
}

/// Fine-tunes `lora` in place on the single video latent `z0`.
///
/// One epoch is one AdamW step over `batch_size` independent `(t, ε)` draws.
pub fn train_lora(
    backbone: &dyn Backbone,
    z0: &LatentVideo,
    schedule: &NoiseSchedule,
    cfg: &LoraTrainConfig,
    cond: &ConditioningEmbedding,
    lora: &LoraWeights,
    per_frame: bool,
) -> Result<TrainTrace> {
    cfg.validate()?;
    z0.check_finite(None)?;
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        return Ok(trace);
    }
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        ..ParamsAdamW::default()
    };
    let mut opt = AdamW::new(lora.vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (l, c, h, w) = z0.dims();
    let z0 = LatentVideo::new(z0.tensor().detach(), z0.scale_factor())?;
    for epoch in 0..cfg.epochs {
        let timesteps: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(1..=schedule.train_timesteps()))
            .collect();
        let n = cfg.batch_size * l * c * h * w;
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = Tensor::from_vec(eps, (cfg.batch_size, l, c, h, w), &Device::Cpu)?;
        let loss = denoising_loss(backbone, &z0, Some(lora), schedule, &timesteps, &eps, cond, per_frame)?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Training {
                step: epoch,
                loss: value,
            });
        }
        opt.backward_step(&loss)?;
        trace.epoch_loss.push(value);
        log::debug!("lora epoch {epoch}: loss {value:.6}");
    }
    Ok(trace)
}
