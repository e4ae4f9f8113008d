//! Deterministic desk-scale video U-Net.
//!
//! Each level runs a residual conv block, one spatial self-attention, and one
//! motion module (attention over the frame axis per spatial location, wrapped
//! by project-in/project-out linears). The motion modules carry no positional
//! encoding, so they are equivariant under frame permutation. With
//! `motion_out_scale = 0` the project-out weights are zero and every motion
//! module is an exact identity.
//!
//! The motion module attends along frames only; a second attention along
//! channels is not modelled.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    AttentionKind, AttentionLayerInfo, AttentionMode, AttentionRecord, Backbone, ConditioningEmbedding, ForwardOptions,
    LayerKv,
};
use crate::error::{Error, Result};
use crate::lora::LoraTarget;
use crate::msa::multi_head_attention;
use crate::util::config_hash;

const TIME_FREQS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Channel width of each level, from the top level down.
    pub channels: Vec<usize>,
    pub heads: usize,
    /// Decoder layer feeding the feature map (0 = bottleneck, last = output conv).
    pub feature_layer_index: usize,
    pub seed: u64,
    pub latent_channels: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Std-dev multiplier of the motion-module project-out weights; 0 makes them identities.
    pub motion_out_scale: f64,
    /// Std-dev multiplier of the output convolution.
    pub out_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64],
            heads: 1,
            feature_layer_index: 1,
            seed: 0,
            latent_channels: 4,
            cond_dim: 16,
            time_dim: 64,
            motion_out_scale: 0.0,
            out_scale: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Bottleneck, one per decoder level, and the output conv.
    pub fn feature_layers(&self) -> usize {
        self.levels() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config("toy backbone needs at least two levels".into()));
        }
        if self.heads == 0 || self.channels.iter().any(|&c| c == 0 || c % self.heads != 0) {
            return Err(Error::Config(format!(
                "every channel width must be a positive multiple of the head count {}",
                self.heads
            )));
        }
        if self.feature_layer_index >= self.feature_layers() {
            return Err(Error::Config(format!(
                "feature_layer_index {} does not address one of the {} decoder layers",
                self.feature_layer_index,
                self.feature_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyVideoUnet {
    config: BackboneConfig,
    params: BTreeMap<String, Tensor>,
    layers: Vec<AttentionLayerInfo>,
}

struct Init {
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut self.rng);
                x * std
            })
            .collect();
        self.params.insert(name, Tensor::from_vec(v, shape, &Device::Cpu)?);
        Ok(())
    }

    fn linear(&mut self, name: String, d_in: usize, d_out: usize, gain: f64) -> Result<()> {
        self.normal(name, &[d_out, d_in], gain / (d_in as f64).sqrt())
    }

    fn conv(&mut self, name: String, c_in: usize, c_out: usize, k: usize, gain: f64) -> Result<()> {
        self.normal(name, &[c_out, c_in, k, k], gain / ((c_in * k * k) as f64).sqrt())
    }
}

fn attention_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.to_q"),
        format!("{prefix}.to_k"),
        format!("{prefix}.to_v"),
    ]
}

impl ToyVideoUnet {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: BTreeMap::new(),
        };
        let td = config.time_dim;
        init.linear("time.0".into(), 2 * TIME_FREQS, td, 1.0)?;
        init.linear("time.1".into(), td, td, 1.0)?;
        init.linear("cond".into(), config.cond_dim, td, 1.0)?;
        let c0 = config.channels[0];
        init.conv("conv_in".into(), config.latent_channels, c0, 3, 1.0)?;

        let mut layers = Vec::new();
        let mut add_block = |init: &mut Init, prefix: String, c_in: usize, c: usize| -> Result<()> {
            init.conv(format!("{prefix}.res.conv1"), c_in, c, 3, 1.0)?;
            init.linear(format!("{prefix}.res.time"), td, c, 0.5)?;
            init.conv(format!("{prefix}.res.conv2"), c, c, 3, 0.5)?;
            if c_in != c {
                init.conv(format!("{prefix}.res.skip"), c_in, c, 1, 1.0)?;
            }
            for n in attention_names(&format!("{prefix}.spatial")) {
                init.linear(n, c, c, 1.0)?;
            }
            init.linear(format!("{prefix}.spatial.to_out"), c, c, 0.5)?;
            layers.push(AttentionLayerInfo {
                index: layers.len(),
                kind: AttentionKind::Spatial,
                name: format!("{prefix}.spatial"),
            });
            init.linear(format!("{prefix}.motion.proj_in"), c, c, 1.0)?;
            for n in attention_names(&format!("{prefix}.motion")) {
                init.linear(n, c, c, 1.0)?;
            }
            init.linear(format!("{prefix}.motion.proj_out"), c, c, config.motion_out_scale)?;
            layers.push(AttentionLayerInfo {
                index: layers.len(),
                kind: AttentionKind::Temporal,
                name: format!("{prefix}.motion"),
            });
            Ok(())
        };

        let levels = config.levels();
        for (i, &c) in config.channels.iter().enumerate() {
            let c_in = if i == 0 { c0 } else { config.channels[i - 1] };
            if i > 0 {
                init.conv(format!("down{i}"), c_in, c_in, 3, 1.0)?;
            }
            add_block(&mut init, format!("enc{i}"), c_in, c)?;
        }
        for i in (0..levels - 1).rev() {
            let c_below = config.channels[i + 1];
            let c = config.channels[i];
            add_block(&mut init, format!("dec{i}"), c_below + c, c)?;
        }
        init.conv("conv_out".into(), c0, config.latent_channels, 3, config.out_scale)?;
        Ok(Self {
            config,
            params: init.params,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("toy backbone has no parameter `{name}`"))
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn linear(&self, x: &Tensor, name: &str, opts: &ForwardOptions) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.p(name).t()?)?;
        match opts.lora.map(|l| l.delta(name, x)).transpose()?.flatten() {
            Some(d) => Ok((y + d)?),
            None => Ok(y),
        }
    }

    fn conv(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let k = self.p(name);
        let pad = k.dim(2)? / 2;
        Ok(x.conv2d(k, pad, 1, 1, 1)?)
    }

    fn time_embedding(&self, timestep: usize, cond: &ConditioningEmbedding) -> Result<Tensor> {
        let t = timestep as f64;
        let mut emb = Vec::with_capacity(2 * TIME_FREQS);
        for i in 0..TIME_FREQS {
            let f = (-(10000f64.ln()) * i as f64 / TIME_FREQS as f64).exp();
            emb.push((t * f).cos());
        }
        for i in 0..TIME_FREQS {
            let f = (-(10000f64.ln()) * i as f64 / TIME_FREQS as f64).exp();
            emb.push((t * f).sin());
        }
        let emb = Tensor::from_vec(emb, (1, 2 * TIME_FREQS), &Device::Cpu)?;
        let no_lora = ForwardOptions::default();
        let mut h = self.linear(&emb, "time.0", &no_lora)?.silu()?;
        h = self.linear(&h, "time.1", &no_lora)?;
        if let Some(c) = &cond.embedding {
            if c.dim(1)? != self.config.cond_dim {
                return Err(Error::Structural(format!(
                    "conditioning width {} does not match backbone cond_dim {}",
                    c.dim(1)?,
                    self.config.cond_dim
                )));
            }
            let pooled = c.to_dtype(DType::F64)?.mean_keepdim(0)?;
            h = (h + self.linear(&pooled, "cond", &no_lora)?)?;
        }
        Ok(h)
    }

    fn res_block(&self, x: &Tensor, prefix: &str, temb: &Tensor) -> Result<Tensor> {
        let c = self.p(&format!("{prefix}.res.conv1")).dim(0)?;
        let tproj = self
            .linear(temb, &format!("{prefix}.res.time"), &ForwardOptions::default())?
            .reshape((1, c, 1, 1))?;
        let h = self
            .conv(&x.silu()?, &format!("{prefix}.res.conv1"))?
            .broadcast_add(&tproj)?;
        let h = self.conv(&h.silu()?, &format!("{prefix}.res.conv2"))?;
        let skip_name = format!("{prefix}.res.skip");
        let skip = if self.params.contains_key(&skip_name) {
            self.conv(x, &skip_name)?
        } else {
            x.clone()
        };
        Ok((skip + h)?)
    }

    /// Attention over `tokens: (batch, T, C)` with optional key/value replacement and capture.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tokens: &Tensor,
        prefix: &str,
        layer: usize,
        kind: AttentionKind,
        opts: &ForwardOptions,
        record: &mut Option<AttentionRecord>,
    ) -> Result<Tensor> {
        let [nq, nk, nv] = attention_names(prefix);
        let q = self.linear(tokens, &nq, opts)?;
        let k = self.linear(tokens, &nk, opts)?;
        let v = self.linear(tokens, &nv, opts)?;
        if let Some(rec) = record.as_mut() {
            rec.layers.push(LayerKv {
                layer,
                kind,
                keys: k.clone(),
                values: v.clone(),
            });
        }
        let (k, v) = match opts.attention {
            AttentionMode::Mutual { source, layers } if layers.contains(&layer) => {
                let src = source
                    .get(layer)
                    .ok_or_else(|| Error::Structural(format!("attention record has no entry for layer {layer}")))?;
                if src.keys.dims() != k.dims() || src.values.dims() != v.dims() {
                    return Err(Error::Structural(format!(
                        "recorded keys {:?} do not fit layer {layer} keys {:?}",
                        src.keys.dims(),
                        k.dims()
                    )));
                }
                (src.keys.clone(), src.values.clone())
            }
            _ => (k, v),
        };
        multi_head_attention(&q, &k, &v, self.config.heads)
    }

    fn spatial_attention(
        &self,
        x: &Tensor,
        prefix: &str,
        layer: usize,
        opts: &ForwardOptions,
        record: &mut Option<AttentionRecord>,
    ) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let a = self.attention(
            &tokens,
            &format!("{prefix}.spatial"),
            layer,
            AttentionKind::Spatial,
            opts,
            record,
        )?;
        let out = self.linear(&a, &format!("{prefix}.spatial.to_out"), &ForwardOptions::default())?;
        let y = (tokens + out)?;
        Ok(y.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
    }

    #[allow(clippy::too_many_arguments)]
    fn motion_module(
        &self,
        x: &Tensor,
        videos: usize,
        prefix: &str,
        layer: usize,
        opts: &ForwardOptions,
        record: &mut Option<AttentionRecord>,
    ) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let l = n / videos;
        let seq = x
            .reshape((videos, l, c, h * w))?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .reshape((videos * h * w, l, c))?;
        let inner = self.linear(&seq, &format!("{prefix}.motion.proj_in"), &ForwardOptions::default())?;
        let a = self.attention(
            &inner,
            &format!("{prefix}.motion"),
            layer,
            AttentionKind::Temporal,
            opts,
            record,
        )?;
        let out = self.linear(&a, &format!("{prefix}.motion.proj_out"), &ForwardOptions::default())?;
        let y = (seq + out)?;
        Ok(y.reshape((videos, h * w, l, c))?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((n, c, h, w))?)
    }

    #[allow(clippy::too_many_arguments)]
    fn level(
        &self,
        x: &Tensor,
        prefix: &str,
        first_layer: usize,
        videos: usize,
        temb: &Tensor,
        opts: &ForwardOptions,
        temporal: bool,
        record: &mut Option<AttentionRecord>,
    ) -> Result<Tensor> {
        let h = self.res_block(x, prefix, temb)?;
        let h = self.spatial_attention(&h, prefix, first_layer, opts, record)?;
        if temporal {
            self.motion_module(&h, videos, prefix, first_layer + 1, opts, record)
        } else {
            Ok(h)
        }
    }

    /// Runs the network, stopping after decoder layer `stop_at` if given.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        z: &Tensor,
        timestep: usize,
        cond: &ConditioningEmbedding,
        opts: &ForwardOptions,
        temporal: bool,
        capture: bool,
        stop_at: Option<usize>,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        let (b, l, c, h, w) = z.dims5()?;
        if c != self.config.latent_channels {
            return Err(Error::Structural(format!(
                "latent has {c} channels, backbone expects {}",
                self.config.latent_channels
            )));
        }
        let levels = self.config.levels();
        let div = 1usize << (levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Structural(format!(
                "latent size {h}x{w} must be divisible by {div} for {levels} levels"
            )));
        }
        let mut record = capture.then(AttentionRecord::default);
        let temb = self.time_embedding(timestep, cond)?;
        let x = z.reshape((b * l, c, h, w))?;
        let mut hs = self.conv(&x, "conv_in")?;
        let mut skips = Vec::new();
        let mut layer = 0;
        for i in 0..levels {
            if i > 0 {
                skips.push(hs.clone());
                hs = self.conv(&hs.avg_pool2d(2)?, &format!("down{i}"))?;
            }
            hs = self.level(&hs, &format!("enc{i}"), layer, b, &temb, opts, temporal, &mut record)?;
            layer += 2;
        }
        let reshape5 = |t: &Tensor| -> Result<Tensor> {
            let (_, cf, fh, fw) = t.dims4()?;
            Ok(t.reshape((b, l, cf, fh, fw))?)
        };
        if stop_at == Some(0) {
            return Ok((reshape5(&hs)?, record));
        }
        for (k, i) in (0..levels - 1).rev().enumerate() {
            let skip = skips.pop().expect("one skip per downsample");
            let (_, _, sh, sw) = skip.dims4()?;
            let up = hs.upsample_nearest2d(sh, sw)?;
            hs = Tensor::cat(&[&up, &skip], 1)?;
            hs = self.level(&hs, &format!("dec{i}"), layer, b, &temb, opts, temporal, &mut record)?;
            layer += 2;
            if stop_at == Some(k + 1) {
                return Ok((reshape5(&hs)?, record));
            }
        }
        let out = self.conv(&hs.silu()?, "conv_out")?;
        Ok((reshape5(&out)?, record))
    }

    /// Writes `weights.bin` (little-endian f64, parameters in name order) and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.params {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
            });
            for v in t.flatten_all()?.to_vec1::<f64>()? {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin = dir.join("weights.bin");
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let manifest = WeightsManifest {
            config_hash: config_hash(&self.config)?,
            seed: self.config.seed,
            config: self.config.clone(),
            entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: WeightsManifest = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        if manifest.config_hash != config_hash(&manifest.config)? {
            return Err(Error::Structural("weights manifest config hash mismatch".into()));
        }
        let mut model = Self::new(manifest.config)?;
        let bin = dir.join("weights.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut offset = 0;
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            if offset + n * 8 > bytes.len() {
                return Err(Error::Structural(format!("{} is truncated", bin.display())));
            }
            let vals: Vec<f64> = bytes[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            offset += n * 8;
            let slot = model
                .params
                .get_mut(&e.name)
                .ok_or_else(|| Error::Structural(format!("unknown parameter `{}`", e.name)))?;
            if slot.dims() != e.shape.as_slice() {
                return Err(Error::Structural(format!("parameter `{}` has wrong shape", e.name)));
            }
            *slot = Tensor::from_vec(vals, e.shape.as_slice(), &Device::Cpu)?;
        }
        Ok(model)
    }

    /// Bitwise equality of all parameters.
    pub fn same_weights(&self, other: &Self) -> Result<bool> {
        if self.config != other.config {
            return Ok(false);
        }
        for (name, t) in &self.params {
            let a = t.flatten_all()?.to_vec1::<f64>()?;
            let b = other.p(name).flatten_all()?.to_vec1::<f64>()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    config_hash: String,
    seed: u64,
    config: BackboneConfig,
    entries: Vec<ManifestEntry>,
}

impl Backbone for ToyVideoUnet {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn attention_layers(&self) -> &[AttentionLayerInfo] {
        &self.layers
    }

    fn lora_targets(&self) -> Vec<LoraTarget> {
        self.layers
            .iter()
            .flat_map(|info| {
                attention_names(&info.name).map(|name| {
                    let (d_out, d_in) = self.p(&name).dims2().expect("projection is a matrix");
                    LoraTarget { name, d_in, d_out }
                })
            })
            .collect()
    }

    fn feature_layers(&self) -> usize {
        self.config.feature_layers()
    }

    fn default_feature_layer(&self) -> usize {
        self.config.feature_layer_index
    }

    fn forward(
        &self,
        z: &Tensor,
        timestep: usize,
        cond: &ConditioningEmbedding,
        opts: &ForwardOptions,
        temporal: bool,
        capture: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        self.run(z, timestep, cond, opts, temporal, capture, None)
    }

    fn forward_features(
        &self,
        z: &Tensor,
        timestep: usize,
        cond: &ConditioningEmbedding,
        layer: usize,
        opts: &ForwardOptions,
        temporal: bool,
    ) -> Result<Tensor> {
        if layer >= self.feature_layers() {
            return Err(Error::Config(format!("feature layer {layer} does not exist")));
        }
        Ok(self.run(z, timestep, cond, opts, temporal, false, Some(layer))?.0)
    }
}
