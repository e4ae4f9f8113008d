//! Binary masks, the flood-fill segmenter, and the mask morphology used by propagation.

use std::collections::VecDeque;

use candle_core::{Device, Tensor};

use super::Point;
use crate::codec::VideoFrames;
use crate::error::{Error, Result};

/// A binary mask over an `h × w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Pixel of a subpixel point (nearest pixel center), if it lies on the grid.
    pub fn pixel_of(&self, p: Point) -> Option<(usize, usize)> {
        let (x, y) = (p.x.round(), p.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    /// Whether the pixel nearest to `p` is set.
    pub fn contains(&self, p: Point) -> bool {
        self.pixel_of(p).is_some_and(|(y, x)| self.get(y, x))
    }

    pub fn union(&self, other: &Mask) -> Mask {
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
        out
    }

    /// `self` shifted by integer `(dx, dy)`; pixels leaving the grid are dropped.
    pub fn translate(&self, dx: i64, dy: i64) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
        out
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }
}

/// Morphological dilation by the Euclidean disc `{δ : ‖δ‖₂ ≤ radius}`.
pub fn extend_mask(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = Mask::empty(mask.height, mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(y, x) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < mask.width && (ny as usize) < mask.height {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
    }
    out
}

/// Sweeps `mask` along the drag vector so that `target` ends up inside it.
///
/// The result is the union of the mask translated by `s · (target − handle)` for
/// `s` in `[0, 1]` (sampled every half pixel), plus the segment of pixels from
/// handle to target. A target already inside, or a zero-length drag, leaves the
/// mask unchanged.
pub fn dilate_along_drag(mask: &Mask, handle: Point, target: Point) -> Mask {
    let (vx, vy) = (target.x - handle.x, target.y - handle.y);
    let len = (vx * vx + vy * vy).sqrt();
    if len == 0.0 || mask.contains(target) {
        return mask.clone();
    }
    let samples = (len / 0.5).ceil() as usize;
    let mut out = mask.clone();
    let mut last = None;
    for k in 0..=samples {
        let s = k as f64 / samples as f64;
        let shift = ((s * vx).round() as i64, (s * vy).round() as i64);
        if last == Some(shift) {
            continue;
        }
        last = Some(shift);
        out = out.union(&mask.translate(shift.0, shift.1));
    }
    for k in 0..=samples {
        let s = k as f64 / samples as f64;
        let p = Point::new(handle.x + s * vx, handle.y + s * vy);
        if let Some((y, x)) = out.pixel_of(p) {
            out.set(y, x, true);
        }
    }
    out
}

/// Max-pool downsample: a latent cell is set when any pixel of its block is.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Mask> {
    if factor == 0 || !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(Error::Config(format!(
            "mask {}x{} cannot be pooled by {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut out = Mask::empty(h, w);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                out.set(y / factor, x / factor, true);
            }
        }
    }
    Ok(out)
}

/// Per-frame pixel masks and their latent-resolution max-pooled counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVideo {
    pub masks: Vec<Mask>,
    pub latent: Vec<Mask>,
    pub scale_factor: usize,
}

impl MaskVideo {
    pub fn new(masks: Vec<Mask>, scale_factor: usize) -> Result<Self> {
        let latent = masks
            .iter()
            .map(|m| downsample_mask(m, scale_factor))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            masks,
            latent,
            scale_factor,
        })
    }

    pub fn frames(&self) -> usize {
        self.masks.len()
    }

    /// Latent masks as a `(frames, 1, h_latent, w_latent)` tensor of 0/1.
    pub fn latent_tensor(&self) -> Result<Tensor> {
        let first = self
            .latent
            .first()
            .ok_or_else(|| Error::Structural("mask video has no frames".into()))?;
        let (h, w) = (first.height, first.width);
        let values: Vec<f64> = self
            .latent
            .iter()
            .flat_map(|m| m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect();
        Ok(Tensor::from_vec(values, (self.latent.len(), 1, h, w), &Device::Cpu)?)
    }
}

/// Promptable single-frame segmentation.
pub trait Segmenter: Send + Sync {
    fn segment(&self, video: &VideoFrames, frame: usize, positive: &[Point], negative: &[Point]) -> Result<Mask>;
}

/// Region growing on color similarity, seeded at each prompt point.
///
/// Pixels reachable (4-connected) from a seed through colors within `tolerance`
/// (max channel difference) of the seed color form that seed's region. Where a
/// positive and a negative region overlap, each pixel goes to the nearest seed.
#[derive(Debug, Clone, Copy)]
pub struct FloodFillSegmenter {
    pub tolerance: u8,
}

impl Default for FloodFillSegmenter {
    fn default() -> Self {
        Self { tolerance: 24 }
    }
}

fn flood(video: &VideoFrames, frame: usize, seed: (usize, usize), tolerance: u8) -> Mask {
    let (h, w) = (video.height(), video.width());
    let color = video.pixel(frame, seed.0, seed.1);
    let similar = |y: usize, x: usize| {
        let p = video.pixel(frame, y, x);
        (0..3).all(|c| p[c].abs_diff(color[c]) <= tolerance)
    };
    let mut m = Mask::empty(h, w);
    let mut queue = VecDeque::from([seed]);
    m.set(seed.0, seed.1, true);
    while let Some((y, x)) = queue.pop_front() {
        let neighbors = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (ny, nx) in neighbors {
            if ny < h && nx < w && !m.get(ny, nx) && similar(ny, nx) {
                m.set(ny, nx, true);
                queue.push_back((ny, nx));
            }
        }
    }
    m
}

impl Segmenter for FloodFillSegmenter {
    fn segment(&self, video: &VideoFrames, frame: usize, positive: &[Point], negative: &[Point]) -> Result<Mask> {
        let (h, w) = (video.height(), video.width());
        let probe = Mask::empty(h, w);
        let to_pixel = |p: &Point| {
            probe
                .pixel_of(*p)
                .ok_or_else(|| Error::Instruction(format!("prompt point ({}, {}) is outside the frame", p.x, p.y)))
        };
        let pos: Vec<(usize, usize)> = positive.iter().map(to_pixel).collect::<Result<_>>()?;
        let neg: Vec<(usize, usize)> = negative.iter().map(to_pixel).collect::<Result<_>>()?;
        if pos.is_empty() {
            return Err(Error::Instruction(
                "segmentation needs at least one positive point".into(),
            ));
        }
        if let Some(p) = pos.iter().find(|p| neg.contains(p)) {
            return Err(Error::Instruction(format!(
                "pixel ({}, {}) is prompted both positive and negative",
                p.1, p.0
            )));
        }
        let pos_region = pos
            .iter()
            .map(|&s| flood(video, frame, s, self.tolerance))
            .fold(Mask::empty(h, w), |a, b| a.union(&b));
        let neg_region = neg
            .iter()
            .map(|&s| flood(video, frame, s, self.tolerance))
            .fold(Mask::empty(h, w), |a, b| a.union(&b));
        let d2 = |a: (usize, usize), y: usize, x: usize| {
            let (dy, dx) = (a.0 as f64 - y as f64, a.1 as f64 - x as f64);
            dy * dy + dx * dx
        };
        let mut out = pos_region.clone();
        for y in 0..h {
            for x in 0..w {
                if pos_region.get(y, x) && neg_region.get(y, x) {
                    let dp = pos.iter().map(|&s| d2(s, y, x)).fold(f64::INFINITY, f64::min);
                    let dn = neg.iter().map(|&s| d2(s, y, x)).fold(f64::INFINITY, f64::min);
                    out.set(y, x, dp < dn);
                }
            }
        }
        for &(y, x) in &pos {
            out.set(y, x, true);
        }
        for &(y, x) in &neg {
            out.set(y, x, false);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_regions() -> VideoFrames {
        // left half red, right half blue
        VideoFrames::from_fn(
            1,
            16,
            16,
            8.0,
            |_, _, x| if x < 8 { [200, 20, 20] } else { [20, 20, 200] },
        )
        .unwrap()
    }

    #[test]
    fn flood_fill_selects_region() {
        let v = two_regions();
        let m = FloodFillSegmenter::default()
            .segment(&v, 0, &[Point::new(3.0, 5.0)], &[])
            .unwrap();
        assert_eq!(m, Mask::from_fn(16, 16, |_, x| x < 8));
    }

    #[test]
    fn negative_point_excludes_its_part() {
        let v = two_regions();
        let seg = FloodFillSegmenter::default();
        let both = seg
            .segment(&v, 0, &[Point::new(1.0, 8.0), Point::new(12.0, 8.0)], &[])
            .unwrap();
        assert!(both.is_full());
        // negative point in the right region removes it
        let m = seg
            .segment(&v, 0, &[Point::new(1.0, 8.0)], &[Point::new(12.0, 8.0)])
            .unwrap();
        assert_eq!(m, Mask::from_fn(16, 16, |_, x| x < 8));
        // negative point inside the positive region carves out the pixels nearer to it
        let m = seg
            .segment(&v, 0, &[Point::new(1.0, 8.0)], &[Point::new(6.0, 8.0)])
            .unwrap();
        assert!(m.contains(Point::new(1.0, 8.0)) && !m.contains(Point::new(6.0, 8.0)));
        assert!(!m.contains(Point::new(7.0, 8.0)));
    }

    #[test]
    fn contradictory_prompt_is_rejected() {
        let v = two_regions();
        let err = FloodFillSegmenter::default()
            .segment(&v, 0, &[Point::new(2.0, 2.0)], &[Point::new(2.2, 1.9)])
            .unwrap_err();
        assert!(matches!(err, Error::Instruction(_)));
    }

    #[test]
    fn extension_radius_one_is_plus() {
        let mut m = Mask::empty(5, 5);
        m.set(2, 2, true);
        let e = extend_mask(&m, 1);
        assert_eq!(e.count(), 5);
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3), (2, 2)] {
            assert!(e.get(y, x));
        }
        assert_eq!(extend_mask(&m, 0), m);
        assert_eq!(extend_mask(&Mask::full(4, 4), 3), Mask::full(4, 4));
    }

    #[test]
    fn drag_dilation_makes_capsule() {
        let r = 3.0;
        let disc = Mask::from_fn(24, 32, |y, x| {
            let (dx, dy) = (x as f64 - 8.0, y as f64 - 12.0);
            dx * dx + dy * dy <= r * r
        });
        let out = dilate_along_drag(&disc, Point::new(8.0, 12.0), Point::new(18.0, 12.0));
        let capsule = Mask::from_fn(24, 32, |y, x| {
            (8..=18).any(|cx: i64| {
                let (dx, dy) = (x as f64 - cx as f64, y as f64 - 12.0);
                dx * dx + dy * dy <= r * r
            })
        });
        assert_eq!(out, capsule);
        assert!(out.contains(Point::new(18.0, 12.0)));
    }

    #[test]
    fn drag_dilation_identities() {
        let m = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        assert_eq!(dilate_along_drag(&m, Point::new(1.0, 1.0), Point::new(2.0, 2.0)), m);
        assert_eq!(dilate_along_drag(&m, Point::new(6.0, 6.0), Point::new(6.0, 6.0)), m);
    }

    #[test]
    fn downsample_cases() {
        assert_eq!(downsample_mask(&Mask::full(16, 16), 8).unwrap(), Mask::full(2, 2));
        assert_eq!(downsample_mask(&Mask::empty(16, 16), 8).unwrap(), Mask::empty(2, 2));
        let mut one = Mask::empty(16, 24);
        one.set(9, 17, true);
        let d = downsample_mask(&one, 8).unwrap();
        assert_eq!(d.count(), 1);
        assert!(d.get(1, 2));
    }

    impl Mask {
        fn is_full(&self) -> bool {
            self.data.iter().all(|&b| b)
        }
    }
}
