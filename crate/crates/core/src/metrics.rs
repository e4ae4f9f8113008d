//! Temporal consistency as mean optical-flow magnitude.
//!
//! `score = Σ_{i,u,v} ‖(Δx, Δy)‖₂ / ((l − 1) · h · w)` over consecutive frame
//! pairs; lower is more consistent.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::VideoFrames;
use crate::error::{Error, Result};

/// Per-pixel displacement from one frame to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl FlowField {
    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height
            || self.width != width
            || self.dx.len() != height * width
            || self.dy.len() != height * width
        {
            return Err(Error::Metric(format!(
                "flow field is {}x{}, frames are {height}x{width}",
                self.height, self.width
            )));
        }
        if self.dx.iter().chain(&self.dy).any(|v| !v.is_finite()) {
            return Err(Error::Metric("flow field has non-finite entries".into()));
        }
        Ok(())
    }

    /// Sum of per-pixel flow magnitudes.
    pub fn magnitude_sum(&self) -> f64 {
        self.dx.iter().zip(&self.dy).map(|(x, y)| x.hypot(*y)).sum()
    }
}

/// Flow between frame `i` and frame `i + 1` of a video.
pub trait FlowEstimator: Send + Sync {
    fn estimate(&self, video: &VideoFrames, i: usize) -> Result<FlowField>;
}

/// Recovers an exact global wraparound translation between frames.
///
/// Fails when no integer shift maps one frame exactly onto the next; among
/// several exact shifts the shortest wins.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalShiftOracle;

impl FlowEstimator for GlobalShiftOracle {
    fn estimate(&self, video: &VideoFrames, i: usize) -> Result<FlowField> {
        let (h, w) = (video.height(), video.width());
        let (a, b) = (video.frame(i), video.frame(i + 1));
        let signed = |v: usize, n: usize| if v > n / 2 { v as i64 - n as i64 } else { v as i64 };
        let mut best: Option<(i64, i64)> = None;
        for sy in 0..h {
            for sx in 0..w {
                let exact = (0..h).all(|y| {
                    (0..w).all(|x| {
                        let (ty, tx) = ((y + sy) % h, (x + sx) % w);
                        a[(y * w + x) * 3..][..3] == b[(ty * w + tx) * 3..][..3]
                    })
                });
                if exact {
                    let s = (signed(sx, w), signed(sy, h));
                    if best.is_none_or(|b| s.0 * s.0 + s.1 * s.1 < b.0 * b.0 + b.1 * b.1) {
                        best = Some(s);
                    }
                }
            }
        }
        let (dx, dy) =
            best.ok_or_else(|| Error::Metric(format!("frames {i} and {} differ by more than a global shift", i + 1)))?;
        Ok(FlowField::constant(h, w, dx as f64, dy as f64))
    }
}

/// Returns precomputed fields, one per frame pair.
#[derive(Debug, Clone)]
pub struct FixedFlow {
    pub fields: Vec<FlowField>,
}

impl FlowEstimator for FixedFlow {
    fn estimate(&self, _video: &VideoFrames, i: usize) -> Result<FlowField> {
        self.fields
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Metric(format!("no flow field for frame pair {i}")))
    }
}

/// Exhaustive block matching on gray levels, upsampled to pixels.
///
/// Each `block × block` tile of frame `i` is compared (sum of absolute
/// differences) against every in-bounds position of frame `i + 1` within
/// `±search`; ties go to the shortest displacement. Pixels of partial tiles at
/// the border take the flow of the tile they fall in.
#[derive(Debug, Clone, Copy)]
pub struct BlockMatchingFlow {
    pub block: usize,
    pub search: usize,
}

impl Default for BlockMatchingFlow {
    fn default() -> Self {
        Self { block: 8, search: 8 }
    }
}

impl FlowEstimator for BlockMatchingFlow {
    fn estimate(&self, video: &VideoFrames, i: usize) -> Result<FlowField> {
        let (h, w) = (video.height(), video.width());
        let bs = self.block.max(1);
        let s = self.search as i64;
        let mut field = FlowField::constant(h, w, 0.0, 0.0);
        for by in (0..h).step_by(bs) {
            for bx in (0..w).step_by(bs) {
                let (bh, bw) = (bs.min(h - by), bs.min(w - bx));
                let mut best = (f64::INFINITY, 0i64, 0i64);
                for oy in -s..=s {
                    for ox in -s..=s {
                        let (ty, tx) = (by as i64 + oy, bx as i64 + ox);
                        if ty < 0 || tx < 0 || ty as usize + bh > h || tx as usize + bw > w {
                            continue;
                        }
                        let mut sad = 0.0;
                        for y in 0..bh {
                            for x in 0..bw {
                                sad += (video.gray(i, by + y, bx + x)
                                    - video.gray(i + 1, ty as usize + y, tx as usize + x))
                                .abs();
                            }
                        }
                        let better =
                            sad < best.0 || (sad == best.0 && ox * ox + oy * oy < best.1 * best.1 + best.2 * best.2);
                        if better {
                            best = (sad, ox, oy);
                        }
                    }
                }
                for y in by..by + bh {
                    for x in bx..bx + bw {
                        field.dx[y * w + x] = best.1 as f64;
                        field.dy[y * w + x] = best.2 as f64;
                    }
                }
            }
        }
        Ok(field)
    }
}

/// Mean flow magnitude over all consecutive frame pairs.
pub fn consistency_score(video: &VideoFrames, estimator: &dyn FlowEstimator) -> Result<f64> {
    let l = video.frames();
    if l < 2 {
        return Err(Error::Domain(format!("consistency needs at least two frames, got {l}")));
    }
    let (h, w) = (video.height(), video.width());
    let sums = (0..l - 1)
        .into_par_iter()
        .map(|i| {
            let f = estimator.estimate(video, i)?;
            f.validate(h, w)?;
            Ok(f.magnitude_sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / ((l - 1) * h * w) as f64)
}

/// One row of the comparison report. A missing score is written as an empty cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sample: String,
    pub baseline_score: Option<f64>,
    pub dragvideo_score: Option<f64>,
}

/// Full-scale scores measured with RAFT flow, `(sample, baseline, dragvideo)`.
/// Kept for documentation; desk-scale runs are not compared against them.
pub const FULL_SCALE_REFERENCE: &[(&str, f64, f64)] = &[
    ("squeeze-bus", 0.71768, 0.66328),
    ("shorten-ears", 0.81162, 0.47923),
    ("show-forehead", 1.62124, 1.61182),
    ("shorten-hair", 0.13472, 0.09027),
    ("close-neckline", 0.1519, 0.1458),
    ("close-mouth-of-lion", 1.3626, 1.2864),
    ("squeeze-sofa", 0.2939, 0.1392),
    ("remove-sleeve", 2.5903, 2.0229),
    ("shorten-suv", 4.0517, 2.1817),
    ("lengthen-plant", 0.4911, 0.4340),
    ("move-sun", 0.4772, 0.4266),
    ("connect-island", 0.7861, 0.7779),
    ("generate-band", 0.2950, 0.2218),
    ("extend-cliff", 0.5270, 0.5153),
];

pub fn reference_rows() -> Vec<ReportRow> {
    FULL_SCALE_REFERENCE
        .iter()
        .map(|&(s, b, d)| ReportRow {
            sample: s.to_string(),
            baseline_score: Some(b),
            dragvideo_score: Some(d),
        })
        .collect()
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
    for r in rows {
        out.serialize(r).map_err(|e| Error::Metric(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
    rd.deserialize()
        .map(|r| r.map_err(|e| Error::Metric(e.to_string())))
        .collect()
}

pub fn write_report_json(path: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(rows)?).map_err(|e| Error::io(path, e))
}
