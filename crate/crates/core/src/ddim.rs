//! Deterministic DDIM inversion and denoising, without classifier-free guidance.
//!
//! A transition from step `a` to step `b` with predicted noise `ε` first
//! recovers the clean estimate `x0 = (z_a - σ_a ε) / α_a` and then re-noises
//! it: `z_b = α_b x0 + σ_b ε`. Inversion walks `0 → n` predicting `ε` at the
//! current (less noisy) latent; denoising walks `n → 0` predicting at the
//! current (noisier) latent.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::codec::{load_latent, save_latent, LatentVideo};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::unet::{predict_noise, Backbone, ConditioningEmbedding, ForwardOptions};

/// Noisy latents `z_0 … z_n` indexed by sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrajectory {
    latents: BTreeMap<usize, LatentVideo>,
}

impl InversionTrajectory {
    pub fn get(&self, step: usize) -> Result<&LatentVideo> {
        self.latents
            .get(&step)
            .ok_or_else(|| Error::Domain(format!("trajectory has no latent for step {step}")))
    }

    pub fn steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.latents.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn last_step(&self) -> usize {
        *self.latents.keys().next_back().expect("trajectory always holds z_0")
    }

    /// Persists each latent as `step_NNN.{bin,json}` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (step, z) in &self.latents {
            save_latent(&dir.join(format!("step_{step:03}")), z)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut latents = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some(step) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".json")) {
                let step: usize = step
                    .parse()
                    .map_err(|_| Error::Structural(format!("bad trajectory file {name}")))?;
                latents.insert(step, load_latent(&path.with_extension(""))?);
            }
        }
        if !latents.contains_key(&0) {
            return Err(Error::NotFound(format!("no step_000 latent in {}", dir.display())));
        }
        Ok(Self { latents })
    }
}

/// DDIM sampler bound to a backbone, schedule and conditioning.
#[derive(Clone, Copy)]
pub struct Ddim<'a> {
    pub backbone: &'a dyn Backbone,
    pub schedule: &'a NoiseSchedule,
    pub cond: &'a ConditioningEmbedding,
    /// Fixed-point iterations that re-evaluate each inversion step's noise at its
    /// own output, making denoising retrace the trajectory; 0 is plain inversion.
    pub inversion_refinement: usize,
}

impl<'a> Ddim<'a> {
    pub fn new(backbone: &'a dyn Backbone, schedule: &'a NoiseSchedule, cond: &'a ConditioningEmbedding) -> Self {
        Self {
            backbone,
            schedule,
            cond,
            inversion_refinement: 0,
        }
    }

    pub fn with_inversion_refinement(mut self, iterations: usize) -> Self {
        self.inversion_refinement = iterations;
        self
    }

    /// Moves `z` from step `from` to step `to` given the predicted noise.
    pub fn transition(&self, z: &LatentVideo, noise: &LatentVideo, from: usize, to: usize) -> Result<LatentVideo> {
        let s = self.schedule;
        let x0 = ((z.tensor() - (noise.tensor() * s.sigma(from))?)? / s.alpha(from))?;
        z.with_data(((x0 * s.alpha(to))? + (noise.tensor() * s.sigma(to))?)?)
    }

    fn predict(&self, z: &LatentVideo, step: usize, opts: &ForwardOptions) -> Result<LatentVideo> {
        predict_noise(self.backbone, z, self.schedule.timestep(step), self.cond, opts)
    }

    /// Runs inversion from the clean latent up to `n_steps`, returning every intermediate.
    pub fn invert(&self, z0: &LatentVideo, n_steps: usize, opts: &ForwardOptions) -> Result<InversionTrajectory> {
        self.schedule.check_step(n_steps)?;
        z0.check_finite(Some(0))?;
        let mut latents = BTreeMap::new();
        let mut z = LatentVideo::new(z0.tensor().detach(), z0.scale_factor())?;
        latents.insert(0, z.clone());
        for step in 1..=n_steps {
            let eps = self.predict(&z, step - 1, opts)?;
            let mut next = self.transition(&z, &eps, step - 1, step)?;
            for _ in 0..self.inversion_refinement {
                let eps = self.predict(&next, step, opts)?;
                next = self.transition(&z, &eps, step - 1, step)?;
            }
            z = LatentVideo::new(next.tensor().detach(), next.scale_factor())?;
            z.check_finite(Some(step))?;
            latents.insert(step, z.clone());
        }
        Ok(InversionTrajectory { latents })
    }

    /// One differentiable transition `z_t → z_{t-1}`.
    pub fn step(&self, z_t: &LatentVideo, step: usize, opts: &ForwardOptions) -> Result<LatentVideo> {
        if step == 0 {
            return Err(Error::Domain("cannot denoise below step 0".into()));
        }
        self.schedule.check_step(step)?;
        let eps = self.predict(z_t, step, opts)?;
        self.transition(z_t, &eps, step, step - 1)
    }

    /// Denoises from `from_step` down to the clean latent.
    pub fn denoise(&self, z_t: &LatentVideo, from_step: usize, opts: &ForwardOptions) -> Result<LatentVideo> {
        self.schedule.check_step(from_step)?;
        let mut z = LatentVideo::new(z_t.tensor().detach(), z_t.scale_factor())?;
        for step in (1..=from_step).rev() {
            z = self.step(&z, step, opts)?;
            z = LatentVideo::new(z.tensor().detach(), z.scale_factor())?;
            z.check_finite(Some(step - 1))?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::ZeroNoiseBackbone;
    use candle_core::{Device, Tensor};

    fn latent(seed: u64) -> LatentVideo {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        LatentVideo::new(Tensor::from_vec(v, (2, 4, 4, 4), &Device::Cpu).unwrap(), 8).unwrap()
    }

    #[test]
    fn zero_noise_inversion_scales_by_alpha() {
        let bb = ZeroNoiseBackbone::new(4);
        let sched = NoiseSchedule::default();
        let cond = ConditioningEmbedding::null();
        let ddim = Ddim::new(&bb, &sched, &cond);
        let z0 = latent(1);
        let traj = ddim.invert(&z0, 50, &ForwardOptions::default()).unwrap();
        assert_eq!(traj.len(), 51);
        for t in traj.steps() {
            let expected = z0.with_data((z0.tensor() * sched.alpha(t)).unwrap()).unwrap();
            assert!(
                traj.get(t).unwrap().max_abs_diff(&expected).unwrap() < 1e-12,
                "step {t}"
            );
        }
    }

    #[test]
    fn zero_steps_and_zero_denoise_are_identity() {
        let bb = ZeroNoiseBackbone::new(4);
        let sched = NoiseSchedule::default();
        let cond = ConditioningEmbedding::null();
        let ddim = Ddim::new(&bb, &sched, &cond);
        let z0 = latent(2);
        let traj = ddim.invert(&z0, 0, &ForwardOptions::default()).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.get(0).unwrap(), &z0);
        assert_eq!(ddim.denoise(&z0, 0, &ForwardOptions::default()).unwrap(), z0);
    }

    #[test]
    fn zero_noise_single_step_ratio() {
        let bb = ZeroNoiseBackbone::new(4);
        let sched = NoiseSchedule::default();
        let cond = ConditioningEmbedding::null();
        let ddim = Ddim::new(&bb, &sched, &cond);
        let z = latent(3);
        let prev = ddim.step(&z, 10, &ForwardOptions::default()).unwrap();
        let ratio = sched.alpha(9) / sched.alpha(10);
        let expected = z.with_data((z.tensor() * ratio).unwrap()).unwrap();
        assert!(prev.max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(matches!(
            ddim.step(&z, 0, &ForwardOptions::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn trajectory_persists() {
        let bb = ZeroNoiseBackbone::new(4);
        let sched = NoiseSchedule::default();
        let cond = ConditioningEmbedding::null();
        let traj = Ddim::new(&bb, &sched, &cond)
            .invert(&latent(4), 3, &ForwardOptions::default())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        traj.save(dir.path()).unwrap();
        let back = InversionTrajectory::load(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        assert!(back.get(3).unwrap().max_abs_diff(traj.get(3).unwrap()).unwrap() < 1e-6);
    }
}
