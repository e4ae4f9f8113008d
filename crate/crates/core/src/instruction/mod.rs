//! Drag instructions: the keyframe JSON schema, and propagation of handles,
//! targets and masks from the keyframes to every frame.

mod mask;
mod track;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use mask::{dilate_along_drag, downsample_mask, extend_mask, FloodFillSegmenter, Mask, MaskVideo, Segmenter};
pub use track::{
    fill_invalid, interpolate_targets, propagate_handles, CorrelationTracker, HandlePropagation,
    HandleShiftMaskTracker, MaskTracker, PointTracker, ResegmentMaskTracker, Tracks,
};

use crate::codec::VideoFrames;
use crate::error::{Error, Result};

/// A subpixel position `(x, y)`; serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragPair {
    pub handle: Point,
    pub target: Point,
}

impl DragPair {
    pub fn displacement(&self) -> Point {
        Point::new(self.target.x - self.handle.x, self.target.y - self.handle.y)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    #[serde(default)]
    pub pairs: Vec<DragPair>,
    #[serde(default)]
    pub positive: Vec<Point>,
    #[serde(default)]
    pub negative: Vec<Point>,
}

impl Keyframe {
    pub fn handles(&self) -> Vec<Point> {
        self.pairs.iter().map(|p| p.handle).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Keyframes {
    pub first: Keyframe,
    /// Without last-frame pairs the first-frame drag vectors apply to the whole clip.
    #[serde(default)]
    pub last: Option<Keyframe>,
}

/// User input on the first (and optionally last) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragInstruction {
    pub frames: usize,
    #[serde(default)]
    pub extension_radius: usize,
    pub keyframes: Keyframes,
}

impl DragInstruction {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Last-frame pairs, defaulting to the first-frame pairs.
    pub fn last_pairs(&self) -> &[DragPair] {
        match &self.keyframes.last {
            Some(k) if !k.pairs.is_empty() => &k.pairs,
            _ => &self.keyframes.first.pairs,
        }
    }

    pub fn has_last_keyframe(&self) -> bool {
        self.keyframes.last.as_ref().is_some_and(|k| !k.pairs.is_empty())
    }

    /// Checks frame count, point bounds and pair counts against a video.
    pub fn validate(&self, video: &VideoFrames) -> Result<()> {
        if self.frames != video.frames() {
            return Err(Error::Instruction(format!(
                "instruction is for {} frames, video has {}",
                self.frames,
                video.frames()
            )));
        }
        let first = &self.keyframes.first;
        if first.pairs.is_empty() {
            return Err(Error::Instruction(
                "the first keyframe needs at least one drag pair".into(),
            ));
        }
        if self.has_last_keyframe() && self.last_pairs().len() != first.pairs.len() {
            return Err(Error::Instruction(format!(
                "{} drag pairs on the first keyframe but {} on the last",
                first.pairs.len(),
                self.last_pairs().len()
            )));
        }
        let (w, h) = ((video.width() - 1) as f64, (video.height() - 1) as f64);
        let keyframes = std::iter::once(first).chain(self.keyframes.last.as_ref());
        for k in keyframes {
            let points = k
                .pairs
                .iter()
                .flat_map(|p| [p.handle, p.target])
                .chain(k.positive.iter().copied())
                .chain(k.negative.iter().copied());
            for p in points {
                if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h {
                    return Err(Error::Instruction(format!(
                        "point ({}, {}) lies outside the {}x{} frame",
                        p.x,
                        p.y,
                        video.width(),
                        video.height()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-frame handles, targets and masks, all in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedInstruction {
    pub handles: Vec<Vec<Point>>,
    pub targets: Vec<Vec<Point>>,
    pub mask: MaskVideo,
}

#[derive(Serialize, Deserialize)]
struct PropagatedFile {
    handles: Vec<Vec<Point>>,
    targets: Vec<Vec<Point>>,
    height: usize,
    width: usize,
    scale_factor: usize,
    /// One row-major string of `0`/`1` per frame.
    masks: Vec<String>,
}

impl PropagatedInstruction {
    pub fn frames(&self) -> usize {
        self.handles.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let first = &self.mask.masks[0];
        let file = PropagatedFile {
            handles: self.handles.clone(),
            targets: self.targets.clone(),
            height: first.height(),
            width: first.width(),
            scale_factor: self.mask.scale_factor,
            masks: self
                .mask
                .masks
                .iter()
                .map(|m| {
                    (0..m.height())
                        .flat_map(|y| (0..m.width()).map(move |x| if m.get(y, x) { '1' } else { '0' }))
                        .collect()
                })
                .collect(),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PropagatedFile = serde_json::from_str(&text)?;
        let masks = file
            .masks
            .iter()
            .map(|s| {
                let bits: Vec<bool> = s.bytes().map(|b| b == b'1').collect();
                if bits.len() != file.height * file.width {
                    return Err(Error::Structural("stored mask has the wrong size".into()));
                }
                Ok(Mask::from_fn(file.height, file.width, |y, x| bits[y * file.width + x]))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            handles: file.handles,
            targets: file.targets,
            mask: MaskVideo::new(masks, file.scale_factor)?,
        })
    }
}

/// The models used to propagate an instruction.
#[derive(Clone, Copy)]
pub struct PropagationModels<'a> {
    pub segmenter: &'a dyn Segmenter,
    pub point_tracker: &'a dyn PointTracker,
    pub mask_tracker: &'a dyn MaskTracker,
    /// Pin tracked handles to the last keyframe when one is given.
    pub keyframe_blend: bool,
}

/// Segments the first frame, extends and propagates the mask, propagates handles
/// and targets, and sweeps each frame's mask along its drag vectors.
pub fn propagate_instruction(
    video: &VideoFrames,
    instruction: &DragInstruction,
    models: PropagationModels,
    scale_factor: usize,
) -> Result<PropagatedInstruction> {
    instruction.validate(video)?;
    let first = &instruction.keyframes.first;
    let l = video.frames();
    let mut positive = first.handles();
    positive.extend(&first.positive);
    let mask1 = models.segmenter.segment(video, 0, &positive, &first.negative)?;
    let mask1 = extend_mask(&mask1, instruction.extension_radius);

    let last_handles: Vec<Point> = instruction.last_pairs().iter().map(|p| p.handle).collect();
    let mode = if instruction.has_last_keyframe() && models.keyframe_blend {
        HandlePropagation::TrackToKeyframe(models.point_tracker)
    } else {
        HandlePropagation::Track(models.point_tracker)
    };
    let handles = propagate_handles(video, &first.handles(), &last_handles, mode)?;
    let targets = if l == 1 {
        vec![first.pairs.iter().map(|p| p.target).collect()]
    } else {
        interpolate_targets(&handles, &first.pairs, instruction.last_pairs())?
    };

    let mut masks = models.mask_tracker.propagate(video, &mask1, &handles)?;
    if masks.len() != l {
        return Err(Error::Propagation {
            frame: masks.len(),
            message: format!("mask tracker returned {} masks for {l} frames", masks.len()),
        });
    }
    if let Some(last) = instruction.keyframes.last.as_ref().filter(|_| l > 1) {
        let mut positive = last.handles();
        positive.extend(&last.positive);
        if !positive.is_empty() {
            let extra = models.segmenter.segment(video, l - 1, &positive, &last.negative)?;
            masks[l - 1] = masks[l - 1].union(&extend_mask(&extra, instruction.extension_radius));
        }
    }
    for (i, m) in masks.iter_mut().enumerate() {
        for (h, t) in handles[i].iter().zip(&targets[i]) {
            *m = dilate_along_drag(m, *h, *t);
        }
        if m.is_empty() {
            return Err(Error::Propagation {
                frame: i,
                message: "mask is empty".into(),
            });
        }
    }
    Ok(PropagatedInstruction {
        handles,
        targets,
        mask: MaskVideo::new(masks, scale_factor)?,
    })
}

/// Preview frames: masked area tinted, handles red, targets blue.
pub fn render_overlay(video: &VideoFrames, instruction: &PropagatedInstruction) -> Result<VideoFrames> {
    let (l, h, w) = (video.frames(), video.height(), video.width());
    let mut data = video.data().to_vec();
    let idx = |f: usize, y: usize, x: usize| ((f * h + y) * w + x) * 3;
    for f in 0..l.min(instruction.frames()) {
        let m = &instruction.mask.masks[f];
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) {
                    let i = idx(f, y, x);
                    data[i] = ((data[i] as u16 + 255) / 2) as u8;
                }
            }
        }
        let mut dot = |p: Point, color: [u8; 3]| {
            let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
            for y in cy - 1..=cy + 1 {
                for x in cx - 1..=cx + 1 {
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        let i = idx(f, y as usize, x as usize);
                        data[i..i + 3].copy_from_slice(&color);
                    }
                }
            }
        };
        for p in &instruction.targets[f] {
            dot(*p, [0, 0, 255]);
        }
        for p in &instruction.handles[f] {
            dot(*p, [255, 0, 0]);
        }
    }
    VideoFrames::new(data, l, h, w, video.fps())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_round_trip() {
        let json = r#"{
            "frames": 3,
            "extension_radius": 2,
            "keyframes": {
                "first": {"pairs": [{"handle": [4, 5], "target": [9.5, 5]}], "positive": [[1, 1]], "negative": []},
                "last": {"pairs": [{"handle": [6, 5], "target": [11, 5]}]}
            }
        }"#;
        let instr: DragInstruction = serde_json::from_str(json).unwrap();
        assert_eq!(instr.keyframes.first.pairs[0].target, Point::new(9.5, 5.0));
        assert!(instr.has_last_keyframe());
        let back: DragInstruction = serde_json::from_str(&serde_json::to_string(&instr).unwrap()).unwrap();
        assert_eq!(back, instr);
    }

    #[test]
    fn validation_rejects_bad_input() {
        let video = VideoFrames::from_fn(2, 16, 16, 8.0, |_, _, _| [0, 0, 0]).unwrap();
        let pair = DragPair {
            handle: Point::new(2.0, 2.0),
            target: Point::new(20.0, 2.0),
        };
        let mut instr = DragInstruction {
            frames: 2,
            extension_radius: 0,
            keyframes: Keyframes {
                first: Keyframe {
                    pairs: vec![pair],
                    ..Keyframe::default()
                },
                last: None,
            },
        };
        assert!(matches!(instr.validate(&video), Err(Error::Instruction(_))));
        instr.keyframes.first.pairs[0].target = Point::new(10.0, 2.0);
        instr.validate(&video).unwrap();
        instr.frames = 3;
        assert!(matches!(instr.validate(&video), Err(Error::Instruction(_))));
    }

    #[test]
    fn propagated_instruction_persists() {
        let mask = Mask::from_fn(16, 16, |y, x| (y + x) % 3 == 0);
        let p = PropagatedInstruction {
            handles: vec![vec![Point::new(1.25, 2.0)]],
            targets: vec![vec![Point::new(3.0, 2.5)]],
            mask: MaskVideo::new(vec![mask], 8).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(PropagatedInstruction::load(&path).unwrap(), p);
    }
}
