//! Procedural videos and instructions for demos and tests.

use crate::codec::VideoFrames;
use crate::error::Result;
use crate::instruction::{DragInstruction, DragPair, Keyframe, Keyframes, Point};

const BACKGROUND: [f64; 3] = [40.0, 48.0, 72.0];
const BLOB: [f64; 3] = [250.0, 170.0, 60.0];

/// A Gaussian blob of std-dev `sigma` pixels whose center starts at `center`
/// and moves by `velocity` pixels per frame.
pub fn gaussian_blob_video(
    frames: usize,
    height: usize,
    width: usize,
    center: Point,
    sigma: f64,
    velocity: (f64, f64),
) -> Result<VideoFrames> {
    VideoFrames::from_fn(frames, height, width, 8.0, |f, y, x| {
        let (cx, cy) = (center.x + velocity.0 * f as f64, center.y + velocity.1 * f as f64);
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        let g = (-d2 / (2.0 * sigma * sigma)).exp();
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = (BACKGROUND[c] + (BLOB[c] - BACKGROUND[c]) * g).round() as u8;
        }
        px
    })
}

fn texture(x: i64, y: i64) -> [u8; 3] {
    let v = (x * 37 + y * 91 + x * y * 13).rem_euclid(251) as u8;
    [v, v.wrapping_mul(3), 255 - v]
}

/// A flat background with a `size × size` textured square whose top-left corner
/// starts at `origin` and moves by `velocity` whole pixels per frame.
pub fn textured_patch_video(
    frames: usize,
    height: usize,
    width: usize,
    origin: (i64, i64),
    size: i64,
    velocity: (i64, i64),
) -> Result<VideoFrames> {
    VideoFrames::from_fn(frames, height, width, 8.0, |f, y, x| {
        let (ox, oy) = (origin.0 + velocity.0 * f as i64, origin.1 + velocity.1 * f as i64);
        let (lx, ly) = (x as i64 - ox, y as i64 - oy);
        if (0..size).contains(&lx) && (0..size).contains(&ly) {
            texture(lx, ly)
        } else {
            [30, 30, 30]
        }
    })
}

/// A full-frame texture shifted by `shift` pixels per frame with wraparound.
pub fn wrapping_shift_video(frames: usize, height: usize, width: usize, shift: (usize, usize)) -> Result<VideoFrames> {
    VideoFrames::from_fn(frames, height, width, 8.0, |f, y, x| {
        let sx = (x as i64 - (f * shift.0) as i64).rem_euclid(width as i64);
        let sy = (y as i64 - (f * shift.1) as i64).rem_euclid(height as i64);
        texture(sx, sy)
    })
}

/// One handle at `handle` dragged by `drag` on every frame, positive point on the handle.
pub fn single_drag_instruction(
    frames: usize,
    handle: Point,
    drag: (f64, f64),
    extension_radius: usize,
) -> DragInstruction {
    DragInstruction {
        frames,
        extension_radius,
        keyframes: Keyframes {
            first: Keyframe {
                pairs: vec![DragPair {
                    handle,
                    target: Point::new(handle.x + drag.0, handle.y + drag.1),
                }],
                positive: vec![handle],
                negative: Vec::new(),
            },
            last: None,
        },
    }
}
