//! Point tracking, target interpolation and mask propagation across frames.

use super::mask::{Mask, Segmenter};
use super::{DragPair, Point};
use crate::codec::VideoFrames;
use crate::error::{Error, Result};

/// Per-frame positions of a set of points, with a validity flag per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracks {
    pub positions: Vec<Vec<Point>>,
    pub valid: Vec<Vec<bool>>,
}

/// Tracks points given on frame 0 through the whole video.
pub trait PointTracker: Send + Sync {
    fn track(&self, video: &VideoFrames, points: &[Point]) -> Result<Tracks>;
}

/// Template matching of a gray patch cut from frame 0.
///
/// Each frame is searched within `search_radius` of the previous position; the
/// lowest sum of squared differences wins, ties going to the smallest move.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationTracker {
    pub patch_radius: usize,
    pub search_radius: usize,
}

impl Default for CorrelationTracker {
    fn default() -> Self {
        Self {
            patch_radius: 4,
            search_radius: 6,
        }
    }
}

fn gray_clamped(video: &VideoFrames, frame: usize, y: i64, x: i64) -> f64 {
    let y = y.clamp(0, video.height() as i64 - 1) as usize;
    let x = x.clamp(0, video.width() as i64 - 1) as usize;
    video.gray(frame, y, x)
}

impl PointTracker for CorrelationTracker {
    fn track(&self, video: &VideoFrames, points: &[Point]) -> Result<Tracks> {
        let pr = self.patch_radius as i64;
        let sr = self.search_radius as i64;
        let (h, w) = (video.height() as i64, video.width() as i64);
        let mut positions = vec![points.to_vec()];
        let mut valid = vec![vec![true; points.len()]];
        let mut current: Vec<(i64, i64)> = points
            .iter()
            .map(|p| (p.x.round() as i64, p.y.round() as i64))
            .collect();
        let templates: Vec<Vec<f64>> = current
            .iter()
            .map(|&(x, y)| {
                (-pr..=pr)
                    .flat_map(|dy| (-pr..=pr).map(move |dx| (dx, dy)))
                    .map(|(dx, dy)| gray_clamped(video, 0, y + dy, x + dx))
                    .collect()
            })
            .collect();
        for f in 1..video.frames() {
            let mut row = Vec::with_capacity(points.len());
            let mut ok = Vec::with_capacity(points.len());
            for (j, p) in points.iter().enumerate() {
                let (cx, cy) = current[j];
                let mut best: Option<(f64, i64, i64, i64)> = None;
                for oy in -sr..=sr {
                    for ox in -sr..=sr {
                        let (x, y) = (cx + ox, cy + oy);
                        if x < 0 || y < 0 || x >= w || y >= h {
                            continue;
                        }
                        let mut ssd = 0.0;
                        let mut k = 0;
                        for dy in -pr..=pr {
                            for dx in -pr..=pr {
                                let d = gray_clamped(video, f, y + dy, x + dx) - templates[j][k];
                                ssd += d * d;
                                k += 1;
                            }
                        }
                        let key = (ssd, ox * ox + oy * oy, x, y);
                        let better = match best {
                            None => true,
                            Some(b) => (key.0, key.1) < (b.0, b.1),
                        };
                        if better {
                            best = Some(key);
                        }
                    }
                }
                match best {
                    Some((_, _, x, y)) => {
                        current[j] = (x, y);
                        let (x0, y0) = (p.x.round(), p.y.round());
                        row.push(Point::new(p.x + (x as f64 - x0), p.y + (y as f64 - y0)));
                        ok.push(true);
                    }
                    None => {
                        row.push(*p);
                        ok.push(false);
                    }
                }
            }
            positions.push(row);
            valid.push(ok);
        }
        Ok(Tracks { positions, valid })
    }
}

/// Replaces invalid entries by linear interpolation between the nearest valid
/// frames, or by the nearest valid frame at the ends of the clip.
pub fn fill_invalid(tracks: &Tracks) -> Result<Vec<Vec<Point>>> {
    let l = tracks.positions.len();
    let n = tracks.positions.first().map_or(0, |r| r.len());
    let mut out = tracks.positions.clone();
    for j in 0..n {
        let valid: Vec<usize> = (0..l).filter(|&i| tracks.valid[i][j]).collect();
        if valid.is_empty() {
            return Err(Error::Propagation {
                frame: 0,
                message: format!("point {j} was never tracked"),
            });
        }
        for i in 0..l {
            if tracks.valid[i][j] {
                continue;
            }
            let before = valid.iter().rev().find(|&&v| v < i).copied();
            let after = valid.iter().find(|&&v| v > i).copied();
            out[i][j] = match (before, after) {
                (Some(a), Some(b)) => {
                    let s = (i - a) as f64 / (b - a) as f64;
                    let (pa, pb) = (tracks.positions[a][j], tracks.positions[b][j]);
                    Point::new(pa.x + s * (pb.x - pa.x), pa.y + s * (pb.y - pa.y))
                }
                (Some(a), None) => tracks.positions[a][j],
                (None, Some(b)) => tracks.positions[b][j],
                (None, None) => unreachable!(),
            };
        }
    }
    Ok(out)
}

/// How handles reach frames after the first.
#[derive(Clone, Copy)]
pub enum HandlePropagation<'a> {
    /// Follow the tracker.
    Track(&'a dyn PointTracker),
    /// Follow the tracker, then spread the correction needed to hit the last-frame
    /// handles linearly over the clip.
    TrackToKeyframe(&'a dyn PointTracker),
    /// Interpolate linearly between the first- and last-frame handles.
    Keyframes,
}

fn clamp_to_frame(p: Point, h: usize, w: usize) -> Point {
    Point::new(p.x.clamp(0.0, (w - 1) as f64), p.y.clamp(0.0, (h - 1) as f64))
}

/// Handle positions `[frame][point]`, with row 0 equal to `first` exactly.
pub fn propagate_handles(
    video: &VideoFrames,
    first: &[Point],
    last: &[Point],
    mode: HandlePropagation,
) -> Result<Vec<Vec<Point>>> {
    let l = video.frames();
    let needs_last = !matches!(mode, HandlePropagation::Track(_));
    if needs_last && last.len() != first.len() {
        return Err(Error::Instruction(format!(
            "{} handles on the first keyframe but {} on the last",
            first.len(),
            last.len()
        )));
    }
    let mut rows = match mode {
        HandlePropagation::Track(t) | HandlePropagation::TrackToKeyframe(t) => fill_invalid(&t.track(video, first)?)?,
        HandlePropagation::Keyframes => {
            let mut rows = Vec::with_capacity(l);
            for i in 0..l {
                let s = if l > 1 { i as f64 / (l - 1) as f64 } else { 0.0 };
                rows.push(
                    first
                        .iter()
                        .zip(last)
                        .map(|(a, b)| Point::new(a.x + s * (b.x - a.x), a.y + s * (b.y - a.y)))
                        .collect(),
                );
            }
            rows
        }
    };
    if let HandlePropagation::TrackToKeyframe(_) = mode {
        if l > 1 {
            let tracked_last = rows[l - 1].clone();
            for (i, row) in rows.iter_mut().enumerate().skip(1) {
                let s = i as f64 / (l - 1) as f64;
                for (j, p) in row.iter_mut().enumerate() {
                    *p = Point::new(
                        p.x + s * (last[j].x - tracked_last[j].x),
                        p.y + s * (last[j].y - tracked_last[j].y),
                    );
                }
            }
        }
    }
    if needs_last && l > 1 {
        rows[l - 1] = last.to_vec();
    }
    rows[0] = first.to_vec();
    for row in rows.iter_mut().skip(1) {
        for p in row.iter_mut() {
            *p = clamp_to_frame(*p, video.height(), video.width());
        }
    }
    Ok(rows)
}

/// Per-frame targets: the drag vector is interpolated linearly between the two
/// keyframes and re-anchored on each frame's handle.
///
/// Where a frame's handle equals the keyframe handle, the keyframe target is
/// returned unchanged.
pub fn interpolate_targets(handles: &[Vec<Point>], first: &[DragPair], last: &[DragPair]) -> Result<Vec<Vec<Point>>> {
    let l = handles.len();
    if l < 2 {
        return Err(Error::Domain(format!(
            "target interpolation needs two keyframes, clip has {l} frame(s)"
        )));
    }
    if first.len() != last.len() {
        return Err(Error::Instruction(format!(
            "{} drag pairs on the first keyframe but {} on the last",
            first.len(),
            last.len()
        )));
    }
    let mut out = Vec::with_capacity(l);
    for (i, row) in handles.iter().enumerate() {
        if row.len() != first.len() {
            return Err(Error::Structural(format!(
                "frame {i} has {} handles, expected {}",
                row.len(),
                first.len()
            )));
        }
        let s = i as f64 / (l - 1) as f64;
        out.push(
            row.iter()
                .enumerate()
                .map(|(j, p)| {
                    if i == 0 && *p == first[j].handle {
                        return first[j].target;
                    }
                    if i == l - 1 && *p == last[j].handle {
                        return last[j].target;
                    }
                    let (a, b) = (first[j].displacement(), last[j].displacement());
                    Point::new(p.x + a.x + s * (b.x - a.x), p.y + a.y + s * (b.y - a.y))
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Carries the first-frame mask to every frame.
pub trait MaskTracker: Send + Sync {
    fn propagate(&self, video: &VideoFrames, first: &Mask, handles: &[Vec<Point>]) -> Result<Vec<Mask>>;
}

/// Translates the first-frame mask by the mean handle displacement (rounded).
#[derive(Debug, Clone, Copy, Default)]
pub struct HandleShiftMaskTracker;

impl MaskTracker for HandleShiftMaskTracker {
    fn propagate(&self, _video: &VideoFrames, first: &Mask, handles: &[Vec<Point>]) -> Result<Vec<Mask>> {
        let base = handles.first().map(|r| r.as_slice()).unwrap_or(&[]);
        handles
            .iter()
            .map(|row| {
                if row.is_empty() {
                    return Ok(first.clone());
                }
                let n = row.len() as f64;
                let dx = row.iter().zip(base).map(|(p, b)| p.x - b.x).sum::<f64>() / n;
                let dy = row.iter().zip(base).map(|(p, b)| p.y - b.y).sum::<f64>() / n;
                Ok(first.translate(dx.round() as i64, dy.round() as i64))
            })
            .collect()
    }
}

/// Re-segments every frame with that frame's handles as positive prompts.
pub struct ResegmentMaskTracker<'a> {
    pub segmenter: &'a dyn Segmenter,
}

impl MaskTracker for ResegmentMaskTracker<'_> {
    fn propagate(&self, video: &VideoFrames, first: &Mask, handles: &[Vec<Point>]) -> Result<Vec<Mask>> {
        let mut out = vec![first.clone()];
        for (i, row) in handles.iter().enumerate().skip(1) {
            out.push(self.segmenter.segment(video, i, row, &[])?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_video(frames: usize, step: (i64, i64)) -> VideoFrames {
        VideoFrames::from_fn(frames, 48, 48, 8.0, |f, y, x| {
            let (cx, cy) = (16 + step.0 * f as i64, 16 + step.1 * f as i64);
            let inside = (x as i64 - cx).abs() <= 4 && (y as i64 - cy).abs() <= 4;
            let corner = x as i64 == cx - 4 && y as i64 == cy - 4;
            if corner {
                [255, 255, 0]
            } else if inside {
                [220, 40, 40]
            } else {
                [30, 30, 30]
            }
        })
        .unwrap()
    }

    fn pair(h: (f64, f64), t: (f64, f64)) -> DragPair {
        DragPair {
            handle: Point::new(h.0, h.1),
            target: Point::new(t.0, t.1),
        }
    }

    #[test]
    fn correlation_tracker_follows_translation() {
        let v = square_video(5, (1, 0));
        let tr = CorrelationTracker::default()
            .track(&v, &[Point::new(16.25, 16.0)])
            .unwrap();
        for i in 0..5 {
            assert_eq!(tr.positions[i][0], Point::new(16.25 + i as f64, 16.0));
        }
    }

    #[test]
    fn static_video_tracks_stay_put() {
        let v = square_video(4, (0, 0));
        let tr = CorrelationTracker::default()
            .track(&v, &[Point::new(3.0, 40.0), Point::new(16.0, 16.0)])
            .unwrap();
        for row in &tr.positions {
            assert_eq!(row, &vec![Point::new(3.0, 40.0), Point::new(16.0, 16.0)]);
        }
    }

    #[test]
    fn invalid_entries_are_interpolated() {
        let p = |x: f64| Point::new(x, 0.0);
        let tracks = Tracks {
            positions: vec![vec![p(0.0)], vec![p(99.0)], vec![p(4.0)], vec![p(99.0)]],
            valid: vec![vec![true], vec![false], vec![true], vec![false]],
        };
        assert_eq!(
            fill_invalid(&tracks).unwrap(),
            vec![vec![p(0.0)], vec![p(2.0)], vec![p(4.0)], vec![p(4.0)]]
        );
    }

    #[test]
    fn two_frame_keyframes_reproduce_inputs() {
        let v = square_video(2, (0, 0));
        let a = [Point::new(1.5, 2.5)];
        let b = [Point::new(7.25, 3.0)];
        let rows = propagate_handles(&v, &a, &b, HandlePropagation::Keyframes).unwrap();
        assert_eq!(rows, vec![a.to_vec(), b.to_vec()]);
        let rows = propagate_handles(
            &v,
            &a,
            &b,
            HandlePropagation::TrackToKeyframe(&CorrelationTracker::default()),
        )
        .unwrap();
        assert_eq!(rows, vec![a.to_vec(), b.to_vec()]);
    }

    #[test]
    fn midpoint_displacement() {
        let h = Point::new(10.0, 10.0);
        let handles = vec![vec![h]; 5];
        let t = interpolate_targets(
            &handles,
            &[pair((10.0, 10.0), (10.0, 10.0))],
            &[pair((10.0, 10.0), (14.0, 10.0))],
        )
        .unwrap();
        assert_eq!(t[2][0], Point::new(12.0, 10.0));
        assert_eq!(t[4][0], Point::new(14.0, 10.0));
    }

    #[test]
    fn targets_ride_on_moving_handles() {
        let handles: Vec<Vec<Point>> = (0..4).map(|i| vec![Point::new(5.0 + i as f64, 8.0)]).collect();
        let t = interpolate_targets(
            &handles,
            &[pair((5.0, 8.0), (5.0, 11.0))],
            &[pair((8.0, 8.0), (8.0, 11.0))],
        )
        .unwrap();
        for (i, row) in t.iter().enumerate() {
            assert_eq!(row[0], Point::new(5.0 + i as f64, 11.0));
        }
    }

    #[test]
    fn handle_shift_tracker_translates() {
        let first = Mask::from_fn(16, 16, |y, x| y < 3 && x < 3);
        let handles = vec![vec![Point::new(1.0, 1.0)], vec![Point::new(3.2, 1.0)]];
        let m = HandleShiftMaskTracker
            .propagate(&square_video(2, (0, 0)), &first, &handles)
            .unwrap();
        assert_eq!(m[1], first.translate(2, 0));
    }
}
