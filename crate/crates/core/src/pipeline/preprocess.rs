//! Source loading, frame-rate resampling and resizing to codec-friendly sizes.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};

use crate::codec::VideoFrames;
use crate::error::{Error, Result};

/// Reads every `*.png` in `dir` (sorted by name) as one video at `fps`.
pub fn read_png_dir(dir: &Path, fps: f64) -> Result<VideoFrames> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Domain(format!("{} holds no png frames", dir.display())));
    }
    let mut data = Vec::new();
    let mut size = None;
    for path in &paths {
        let img = image::open(path)?.to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(Error::Structural(format!(
                "{} differs in size from the first frame",
                path.display()
            )));
        }
        data.extend_from_slice(img.as_raw());
    }
    let (w, h) = size.expect("at least one frame");
    VideoFrames::new(data, paths.len(), h as usize, w as usize, fps)
}

/// Keeps `floor(n · kps / fps)` frames, taking source frame `floor(k · fps / kps)` for output `k`.
pub fn resample(video: &VideoFrames, kps: f64) -> Result<VideoFrames> {
    let fps = video.fps();
    if !(kps.is_finite() && kps > 0.0) {
        return Err(Error::Config(format!("kps must be positive, got {kps}")));
    }
    if kps > fps {
        return Err(Error::Config(format!("kps {kps} exceeds the source frame rate {fps}")));
    }
    let n = (video.frames() as f64 * kps / fps + 1e-9).floor() as usize;
    if n == 0 {
        return Err(Error::Domain("resampling leaves zero frames".into()));
    }
    let indices: Vec<usize> = (0..n)
        .map(|k| ((k as f64 * fps / kps + 1e-9).floor() as usize).min(video.frames() - 1))
        .collect();
    video.select(&indices)?.with_fps(kps)
}

/// Scales so the longer side is at most `max_side` (if given), then rounds each
/// side down to a multiple of `multiple`. Frames already at that size are untouched.
pub fn resize_divisible(video: &VideoFrames, multiple: usize, max_side: Option<usize>) -> Result<VideoFrames> {
    let (h, w) = (video.height(), video.width());
    let scale = match max_side {
        Some(m) if h.max(w) > m => m as f64 / h.max(w) as f64,
        _ => 1.0,
    };
    let round = |v: usize| ((v as f64 * scale).floor() as usize / multiple) * multiple;
    let (th, tw) = (round(h), round(w));
    if th == 0 || tw == 0 {
        return Err(Error::Config(format!(
            "{w}x{h} frames are too small for a multiple of {multiple}"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(video.clone());
    }
    let mut data = Vec::with_capacity(video.frames() * th * tw * 3);
    for i in 0..video.frames() {
        let img = imageops::resize(&video.frame_image(i), tw as u32, th as u32, FilterType::Triangle);
        data.extend_from_slice(img.as_raw());
    }
    VideoFrames::new(data, video.frames(), th, tw, video.fps())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counter(frames: usize, fps: f64) -> VideoFrames {
        VideoFrames::from_fn(frames, 16, 16, fps, |f, _, _| [f as u8, 0, 0]).unwrap()
    }

    #[test]
    fn two_seconds_at_six_kps() {
        let v = resample(&counter(48, 24.0), 6.0).unwrap();
        assert_eq!(v.frames(), 12);
        assert_eq!(v.fps(), 6.0);
        assert_eq!(v.pixel(1, 0, 0)[0], 4);
        assert_eq!(v.pixel(11, 0, 0)[0], 44);
    }

    #[test]
    fn kps_above_source_rate_fails() {
        assert!(matches!(resample(&counter(10, 8.0), 9.0), Err(Error::Config(_))));
        assert!(matches!(resample(&counter(1, 24.0), 6.0), Err(Error::Domain(_))));
    }

    #[test]
    fn resize_rounds_down() {
        let v = VideoFrames::from_fn(2, 70, 100, 8.0, |_, y, x| [x as u8, y as u8, 0]).unwrap();
        let r = resize_divisible(&v, 16, None).unwrap();
        assert_eq!((r.height(), r.width()), (64, 96));
        let r = resize_divisible(&v, 16, Some(50)).unwrap();
        assert_eq!((r.height(), r.width()), (32, 48));
        let same = resize_divisible(&r, 16, None).unwrap();
        assert_eq!(same.data(), r.data());
    }
}
