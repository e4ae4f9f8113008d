//! Pixel-space videos, latent videos, and the encoder/decoder pair between them.
//!
//! The desk-scale [`ToyCodec`] average-pools each 8×8 block of every RGB plane,
//! snaps the block mean to the 8-bit grid, and normalizes it to `[-1, 1]`.
//! A fourth latent channel carries the mean of the three color channels.
//! Decoding reads the three color channels back and repeats each value over
//! its block (nearest-neighbor upsample).
//!
//! Because block means are snapped to the 8-bit grid before normalization,
//! `decode` is an exact right inverse of `encode` on the encoder's range, so
//! `encode(decode(encode(v))) == encode(v)`. For a block-constant video the
//! roundtrip `decode(encode(v))` is exact. For an arbitrary video each pixel's
//! roundtrip error is bounded by the spread `max - min` of its 8×8 block, since
//! the snapped mean of integers stays inside `[min, max]`.
//!
//! The all-zero latent decodes to mid-gray 128.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial downsampling factor of the desk-scale codec.
pub const TOY_SCALE_FACTOR: usize = 8;
/// Latent channel count shared by the desk-scale and full-scale codecs.
pub const LATENT_CHANNELS: usize = 4;

/// A video as `l` RGB frames of identical size, stored frame-major, row-major, RGB interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    data: Vec<u8>,
    frames: usize,
    height: usize,
    width: usize,
    fps: f64,
}

impl VideoFrames {
    pub fn new(data: Vec<u8>, frames: usize, height: usize, width: usize, fps: f64) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Structural(format!(
                "video must have non-zero extent, got {frames}x{height}x{width}"
            )));
        }
        if data.len() != frames * height * width * 3 {
            return Err(Error::Structural(format!(
                "pixel buffer has {} bytes, expected {}",
                data.len(),
                frames * height * width * 3
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            data,
            frames,
            height,
            width,
            fps,
        })
    }

    /// Builds a video from a per-pixel color function `f(frame, y, x) -> [r, g, b]`.
    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        fps: f64,
        mut f: impl FnMut(usize, usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * height * width * 3);
        for i in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    data.extend_from_slice(&f(i, y, x));
                }
            }
        }
        Self::new(data, frames, height, width, fps)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, i: usize, y: usize, x: usize) -> [u8; 3] {
        let o = ((i * self.height + y) * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Luma of one pixel in `[0, 255]`.
    pub fn gray(&self, i: usize, y: usize, x: usize) -> f64 {
        let [r, g, b] = self.pixel(i, y, x);
        0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
    }

    pub fn frame_image(&self, i: usize) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.frame(i).to_vec())
            .expect("frame buffer size is checked at construction")
    }

    /// A new video made of the selected frames, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width * 3);
        for &i in indices {
            if i >= self.frames {
                return Err(Error::Domain(format!("frame {i} out of range")));
            }
            data.extend_from_slice(self.frame(i));
        }
        Self::new(data, indices.len(), self.height, self.width, self.fps)
    }

    pub fn with_fps(mut self, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        self.fps = fps;
        Ok(self)
    }
}

/// A latent video `(frames, channels, height, width)` in float64.
#[derive(Debug, Clone)]
pub struct LatentVideo {
    data: Tensor,
    scale_factor: usize,
}

impl LatentVideo {
    pub fn new(data: Tensor, scale_factor: usize) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::Structural(format!(
                "latent video must be rank 4, got shape {:?}",
                data.dims()
            )));
        }
        if scale_factor == 0 {
            return Err(Error::Config("scale_factor must be positive".into()));
        }
        let data = data.to_dtype(DType::F64)?;
        Ok(Self { data, scale_factor })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize, scale_factor: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros((frames, channels, height, width), DType::F64, &Device::Cpu)?,
            scale_factor,
        )
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn scale_factor(&self) -> usize {
        self.scale_factor
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("rank checked at construction")
    }

    pub fn frames(&self) -> usize {
        self.dims().0
    }

    /// Same metadata, new data.
    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        if data.dims() != self.data.dims() {
            return Err(Error::Structural(format!(
                "replacement latent has shape {:?}, expected {:?}",
                data.dims(),
                self.data.dims()
            )));
        }
        Self::new(data, self.scale_factor)
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.data.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn check_finite(&self, step: Option<usize>) -> Result<()> {
        if self.to_vec()?.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::numeric(step, "latent contains non-finite entries"))
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &LatentVideo) -> Result<f64> {
        if self.data.dims() != other.data.dims() {
            return Err(Error::Structural("latent shapes differ".into()));
        }
        Ok((&self.data - &other.data)?
            .abs()?
            .flatten_all()?
            .max(0)?
            .to_scalar::<f64>()?)
    }

    /// Frames `[start, start + len)` as a new latent.
    pub fn narrow_frames(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.data.narrow(0, start, len)?, self.scale_factor)
    }

    pub fn concat_frames(parts: &[LatentVideo]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Structural("no latents to concatenate".into()))?;
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.data).collect();
        Self::new(Tensor::cat(&tensors, 0)?, first.scale_factor)
    }
}

impl PartialEq for LatentVideo {
    /// Bitwise equality of shape, metadata and every entry.
    fn eq(&self, other: &Self) -> bool {
        self.scale_factor == other.scale_factor
            && self.data.dims() == other.data.dims()
            && match (self.to_vec(), other.to_vec()) {
                (Ok(a), Ok(b)) => a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
                _ => false,
            }
    }
}

/// An encoder/decoder pair between pixel and latent space.
pub trait Codec: Send + Sync {
    fn scale_factor(&self) -> usize;
    fn channels(&self) -> usize;
    fn encode(&self, video: &VideoFrames) -> Result<LatentVideo>;
    fn decode(&self, latent: &LatentVideo, fps: f64) -> Result<VideoFrames>;
}

/// Strided average-pool encoder with nearest-neighbor decoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyCodec;

fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn denormalize(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl Codec for ToyCodec {
    fn scale_factor(&self) -> usize {
        TOY_SCALE_FACTOR
    }

    fn channels(&self) -> usize {
        LATENT_CHANNELS
    }

    fn encode(&self, video: &VideoFrames) -> Result<LatentVideo> {
        let f = TOY_SCALE_FACTOR;
        for (axis, size) in [("height", video.height()), ("width", video.width())] {
            if size % f != 0 {
                return Err(Error::Config(format!(
                    "video {axis} {size} is not divisible by the codec factor {f}"
                )));
            }
        }
        let (l, hl, wl) = (video.frames(), video.height() / f, video.width() / f);
        let mut out = vec![0.0f64; l * LATENT_CHANNELS * hl * wl];
        let plane = hl * wl;
        for i in 0..l {
            for by in 0..hl {
                for bx in 0..wl {
                    let mut sums = [0u32; 3];
                    for y in by * f..(by + 1) * f {
                        for x in bx * f..(bx + 1) * f {
                            let p = video.pixel(i, y, x);
                            for c in 0..3 {
                                sums[c] += p[c] as u32;
                            }
                        }
                    }
                    let mut mean_norm = 0.0;
                    for c in 0..3 {
                        let snapped = (sums[c] as f64 / (f * f) as f64).round() as u8;
                        let v = normalize(snapped);
                        out[(i * LATENT_CHANNELS + c) * plane + by * wl + bx] = v;
                        mean_norm += v;
                    }
                    out[(i * LATENT_CHANNELS + 3) * plane + by * wl + bx] = mean_norm / 3.0;
                }
            }
        }
        LatentVideo::new(Tensor::from_vec(out, (l, LATENT_CHANNELS, hl, wl), &Device::Cpu)?, f)
    }

    fn decode(&self, latent: &LatentVideo, fps: f64) -> Result<VideoFrames> {
        let f = TOY_SCALE_FACTOR;
        if latent.scale_factor() != f {
            return Err(Error::Structural(format!(
                "latent scale_factor {} does not match codec factor {f}",
                latent.scale_factor()
            )));
        }
        let (l, c, hl, wl) = latent.dims();
        if c < 3 {
            return Err(Error::Structural(format!("latent has {c} channels, need at least 3")));
        }
        latent.check_finite(None)?;
        let values = latent.to_vec()?;
        let plane = hl * wl;
        VideoFrames::from_fn(l, hl * f, wl * f, fps, |i, y, x| {
            let o = y / f * wl + x / f;
            let mut px = [0u8; 3];
            for (ch, p) in px.iter_mut().enumerate() {
                *p = denormalize(values[(i * c + ch) * plane + o]);
            }
            px
        })
    }
}

/// Writes every frame as `frame_%05d.png` (0-based) into `dir`.
pub fn write_frames(dir: &Path, video: &VideoFrames) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..video.frames() {
        let path = dir.join(format!("frame_{i:05}.png"));
        video.frame_image(i).save(&path)?;
    }
    Ok(())
}

/// Reads `frame_%05d.png` files from `dir` in index order.
pub fn read_frames(dir: &Path, fps: f64) -> Result<VideoFrames> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::NotFound(format!("no frame_*.png files in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut size = None;
    for path in &paths {
        let img = image::open(path)?.to_rgb8();
        let dims = img.dimensions();
        match size {
            None => size = Some(dims),
            Some(s) if s != dims => {
                return Err(Error::Structural(format!(
                    "{} is {}x{}, expected {}x{}",
                    path.display(),
                    dims.0,
                    dims.1,
                    s.0,
                    s.1
                )))
            }
            _ => {}
        }
        data.extend_from_slice(img.as_raw());
    }
    let (w, h) = size.expect("at least one frame");
    VideoFrames::new(data, paths.len(), h as usize, w as usize, fps)
}

#[derive(Debug, Serialize, Deserialize)]
struct LatentSidecar {
    shape: [usize; 4],
    scale_factor: usize,
    dtype: String,
}

/// Persists a latent as `<stem>.bin` (little-endian f32) plus `<stem>.json`.
pub fn save_latent(stem: &Path, latent: &LatentVideo) -> Result<()> {
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (l, c, h, w) = latent.dims();
    let bytes: Vec<u8> = latent
        .to_vec()?
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    let bin = stem.with_extension("bin");
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let sidecar = LatentSidecar {
        shape: [l, c, h, w],
        scale_factor: latent.scale_factor(),
        dtype: "f32le".into(),
    };
    let json = stem.with_extension("json");
    fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn load_latent(stem: &Path) -> Result<LatentVideo> {
    let json = stem.with_extension("json");
    let sidecar: LatentSidecar = serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    if sidecar.dtype != "f32le" {
        return Err(Error::Structural(format!("unsupported latent dtype {}", sidecar.dtype)));
    }
    let bin = stem.with_extension("bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Structural(format!(
            "{} holds {} bytes, sidecar shape needs {}",
            bin.display(),
            bytes.len(),
            n * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let [l, c, h, w] = sidecar.shape;
    LatentVideo::new(
        Tensor::from_vec(values, (l, c, h, w), &Device::Cpu)?,
        sidecar.scale_factor,
    )
}

/// Rounds every entry through f32, matching what [`save_latent`] stores.
pub fn quantize_like_storage(latent: &LatentVideo) -> Result<LatentVideo> {
    latent.with_data(latent.tensor().to_dtype(DType::F32)?.to_dtype(DType::F64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_video(seed: u64, l: usize, h: usize, w: usize) -> VideoFrames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoFrames::from_fn(l, h, w, 8.0, |_, _, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn encode_shape() {
        let v = random_video(0, 12, 64, 64);
        let z = ToyCodec.encode(&v).unwrap();
        assert_eq!(z.dims(), (12, 4, 8, 8));
        assert_eq!(z.scale_factor(), 8);
    }

    #[test]
    fn constant_gray_gives_constant_latent() {
        let v = VideoFrames::from_fn(2, 16, 24, 8.0, |_, _, _| [90, 90, 90]).unwrap();
        let z = ToyCodec.encode(&v).unwrap();
        let expected = 90.0 / 127.5 - 1.0;
        for x in z.to_vec().unwrap() {
            assert!((x - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_decode_encode_is_encode() {
        for seed in 0..5 {
            let v = random_video(seed, 3, 32, 48);
            let z = ToyCodec.encode(&v).unwrap();
            let z2 = ToyCodec.encode(&ToyCodec.decode(&z, 8.0).unwrap()).unwrap();
            assert_eq!(z, z2, "seed {seed}");
        }
    }

    #[test]
    fn block_constant_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let blocks: Vec<[u8; 3]> = (0..2 * 4 * 4)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let v = VideoFrames::from_fn(2, 32, 32, 8.0, |i, y, x| blocks[(i * 4 + y / 8) * 4 + x / 8]).unwrap();
        let back = ToyCodec.decode(&ToyCodec.encode(&v).unwrap(), 8.0).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn random_roundtrip_within_block_spread() {
        let v = random_video(3, 2, 16, 16);
        let back = ToyCodec.decode(&ToyCodec.encode(&v).unwrap(), 8.0).unwrap();
        for i in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    for c in 0..3 {
                        let vals: Vec<i32> = (0..64)
                            .map(|k| v.pixel(i, by * 8 + k / 8, bx * 8 + k % 8)[c] as i32)
                            .collect();
                        let spread = vals.iter().max().unwrap() - vals.iter().min().unwrap();
                        for k in 0..64 {
                            let got = back.pixel(i, by * 8 + k / 8, bx * 8 + k % 8)[c] as i32;
                            assert!((got - vals[k]).abs() <= spread);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_latent_is_mid_gray() {
        let z = LatentVideo::zeros(2, 4, 1, 1, 8).unwrap();
        let v = ToyCodec.decode(&z, 8.0).unwrap();
        assert!(v.data().iter().all(|&p| p == 128));
    }

    #[test]
    fn decode_rejects_wrong_scale_factor_and_nan() {
        let z = LatentVideo::zeros(2, 4, 1, 1, 4).unwrap();
        assert!(matches!(ToyCodec.decode(&z, 8.0), Err(Error::Structural(_))));
        let nan = LatentVideo::new(Tensor::full(f64::NAN, (2, 4, 1, 1), &Device::Cpu).unwrap(), 8).unwrap();
        assert!(matches!(ToyCodec.decode(&nan, 8.0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn indivisible_dimension_names_axis() {
        let v = random_video(0, 2, 20, 16);
        let err = ToyCodec.encode(&v).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn encode_is_framewise() {
        let v = random_video(11, 4, 16, 16);
        let perm = [2, 0, 3, 1];
        let z = ToyCodec.encode(&v).unwrap();
        let zp = ToyCodec.encode(&v.select(&perm).unwrap()).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            let a = zp.narrow_frames(k, 1).unwrap();
            let b = z.narrow_frames(src, 1).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn latent_blob_roundtrip_and_frames_io() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_video(5, 3, 16, 16);
        let z = ToyCodec.encode(&v).unwrap();
        save_latent(&dir.path().join("z0"), &z).unwrap();
        let back = load_latent(&dir.path().join("z0")).unwrap();
        assert_eq!(back, quantize_like_storage(&z).unwrap());
        let raw = std::fs::read(dir.path().join("z0.bin")).unwrap();
        assert_eq!(raw.len(), 3 * 4 * 2 * 2 * 4);
        assert_eq!(&raw[..4], &(z.to_vec().unwrap()[0] as f32).to_le_bytes());

        write_frames(&dir.path().join("frames"), &v).unwrap();
        assert!(dir.path().join("frames/frame_00002.png").exists());
        assert_eq!(read_frames(&dir.path().join("frames"), 8.0).unwrap(), v);
    }
}
