//! Drag optimization on the noisy video latent.
//!
//! Each iteration extracts the feature map of the current edited latent once,
//! relocates every handle by nearest-neighbor search around its previous
//! position (against the handle's feature in the unedited latent), and takes
//! one plain gradient step on the motion-supervision loss:
//!
//! ```text
//! L(ẑ_t) = Σ_i Σ_j Σ_{q ∈ B_r(p_ij)} ‖F_{q + d_ij}(ẑ_t) − sg(F_q(ẑ_t))‖₁
//!        + λ ‖(ẑ_{t−1} − sg(z_{t−1})) ⊙ (1 − M)‖₁
//! ```
//!
//! where `d_ij` is the unit vector from handle to target, `ẑ_{t−1}` is one
//! differentiable DDIM step from `ẑ_t`, and `z_{t−1}` is the same step taken
//! from the unedited `z_t`, so the second term is zero until the latent moves.
//!
//! Handles and targets are kept in feature-grid coordinates (pixel coordinates
//! divided by two) inside the loop; the audit trail reports pixel coordinates.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::LatentVideo;
use crate::ddim::{Ddim, InversionTrajectory};
use crate::error::{Error, Result};
use crate::instruction::{Point, PropagatedInstruction};
use crate::unet::{extract_features, FeatureVolume, ForwardOptions};

/// Pixel distance per feature-grid unit.
pub const FEATURE_STRIDE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    /// Latent learning rate.
    pub eta: f64,
    /// Weight of the outside-mask regularizer.
    pub lambda: f64,
    pub max_steps: usize,
    /// Supervision disc radius, in feature-grid units.
    pub radius: usize,
    /// Tracking patch half-width, in feature-grid units.
    pub track_radius: usize,
    /// Sampling step at which the latent is optimized.
    pub t_opt: usize,
    /// A handle closer than this to its target (pixels) counts as converged.
    pub stop_epsilon: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            lambda: 0.1,
            max_steps: 40,
            radius: 1,
            track_radius: 3,
            t_opt: 40,
            stop_epsilon: 2.0,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be a non-negative number, got {}",
                self.eta
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.track_radius < 1 {
            return Err(Error::Config("track_radius must be at least 1".into()));
        }
        if self.t_opt == 0 {
            return Err(Error::Config("t_opt must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sum of absolute values whose gradient is `sign(x)` with `sign(0) = 0`.
pub fn l1_norm(x: &Tensor) -> Result<Tensor> {
    let zero = x.zeros_like()?;
    let sign = (x.gt(&zero)?.to_dtype(DType::F64)? - x.lt(&zero)?.to_dtype(DType::F64)?)?;
    Ok((x * sign.detach())?.sum_all()?)
}

fn check_bounds(p: Point, h: usize, w: usize) -> Result<()> {
    if p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "sample point ({}, {}) outside feature grid {w}x{h}",
            p.x, p.y
        )))
    }
}

/// Bilinear samples `(frame, point)` from the feature volume: `(n, channels)`, differentiable in `F`.
pub fn bilinear_sample_many(features: &FeatureVolume, points: &[(usize, Point)]) -> Result<Tensor> {
    let (l, c, h, w) = features.dims();
    let mut idx = Vec::with_capacity(points.len() * 4);
    let mut wts = Vec::with_capacity(points.len() * 4);
    for &(frame, p) in points {
        if frame >= l {
            return Err(Error::Domain(format!("frame {frame} outside {l} feature frames")));
        }
        check_bounds(p, h, w)?;
        let x0 = (p.x.floor() as usize).min(w - 1);
        let y0 = (p.y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        let base = frame * h * w;
        for (yy, xx, wt) in [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ] {
            idx.push((base + yy * w + xx) as u32);
            wts.push(wt);
        }
    }
    let n = points.len();
    let rows = features
        .tensor()
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .reshape((l * h * w, c))?;
    let idx = Tensor::from_vec(idx, n * 4, &Device::Cpu)?;
    let wts = Tensor::from_vec(wts, (n, 4, 1), &Device::Cpu)?;
    let gathered = rows.index_select(&idx, 0)?.reshape((n, 4, c))?;
    Ok(gathered.broadcast_mul(&wts)?.sum(1)?)
}

/// Feature vector of one frame at one subpixel point.
pub fn bilinear_sample(features: &FeatureVolume, frame: usize, q: Point) -> Result<Tensor> {
    Ok(bilinear_sample_many(features, &[(frame, q)])?.squeeze(0)?)
}

/// Integer offsets `δ` with `‖δ‖₂ ≤ r`, row-major.
pub fn disc_offsets(r: usize) -> Vec<(i64, i64)> {
    let r = r as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn clamp_point(p: Point, h: usize, w: usize) -> Point {
    Point::new(p.x.clamp(0.0, (w - 1) as f64), p.y.clamp(0.0, (h - 1) as f64))
}

/// Handle state of the drag loop, in feature-grid coordinates.
#[derive(Debug, Clone)]
pub struct TrackState {
    pub handles: Vec<Vec<Point>>,
    original: Vec<Vec<Point>>,
    /// Feature of each original handle in the unedited latent: `(frames * points, channels)`.
    reference: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl TrackState {
    /// Samples the reference feature of every handle once from the unedited feature map.
    pub fn new(original_features: &FeatureVolume, handles: Vec<Vec<Point>>) -> Result<Self> {
        let (l, _, h, w) = original_features.dims();
        if handles.len() != l {
            return Err(Error::Structural(format!(
                "{} handle rows for {l} feature frames",
                handles.len()
            )));
        }
        let handles: Vec<Vec<Point>> = handles
            .into_iter()
            .map(|row| row.into_iter().map(|p| clamp_point(p, h, w)).collect())
            .collect();
        let pts: Vec<(usize, Point)> = handles
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&p| (i, p)))
            .collect();
        let reference = if pts.is_empty() {
            Vec::new()
        } else {
            bilinear_sample_many(&original_features.detach(), &pts)?.to_vec2::<f64>()?
        };
        Ok(Self {
            original: handles.clone(),
            handles,
            reference,
            iteration: 0,
        })
    }

    pub fn original(&self) -> &[Vec<Point>] {
        &self.original
    }

    fn reference(&self, frame: usize, j: usize) -> &[f64] {
        let n = self.original[0].len();
        &self.reference[frame * n + j]
    }
}

/// Nearest-neighbor relocation of every handle inside its `(2r'+1)²` patch.
///
/// Candidates are integer grid points; ties go to the smallest row, then column.
pub fn track_handles(features: &FeatureVolume, track: &TrackState, track_radius: usize) -> Result<Vec<Vec<Point>>> {
    let (l, c, h, w) = features.dims();
    let data = features.tensor().detach().flatten_all()?.to_vec1::<f64>()?;
    let rp = track_radius as f64;
    let mut out = Vec::with_capacity(l);
    for (i, row) in track.handles.iter().enumerate() {
        let mut new_row = Vec::with_capacity(row.len());
        for (j, p) in row.iter().enumerate() {
            let x_lo = (p.x - rp).ceil().max(0.0);
            let x_hi = (p.x + rp).floor().min((w - 1) as f64);
            let y_lo = (p.y - rp).ceil().max(0.0);
            let y_hi = (p.y + rp).floor().min((h - 1) as f64);
            if x_lo > x_hi || y_lo > y_hi {
                return Err(Error::Tracking(format!(
                    "patch around ({}, {}) on frame {i} lies outside the feature grid",
                    p.x, p.y
                )));
            }
            let reference = track.reference(i, j);
            let mut best: Option<(f64, usize, usize)> = None;
            for y in y_lo as usize..=y_hi as usize {
                for x in x_lo as usize..=x_hi as usize {
                    let mut d = 0.0;
                    for (ch, r) in reference.iter().enumerate().take(c) {
                        d += (data[((i * c + ch) * h + y) * w + x] - r).abs();
                    }
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, y, x));
                    }
                }
            }
            let (_, y, x) = best.expect("non-empty patch");
            new_row.push(Point::new(x as f64, y as f64));
        }
        out.push(new_row);
    }
    Ok(out)
}

/// Value of the motion-supervision loss and its two terms.
#[derive(Debug, Clone)]
pub struct MotionLoss {
    pub total: Tensor,
    pub supervision: f64,
    pub regularizer: f64,
}

/// Everything the loss needs besides the edited latent.
pub struct MotionTargets<'a> {
    pub handles: &'a [Vec<Point>],
    pub targets: &'a [Vec<Point>],
    /// Points excluded from supervision (already at their target).
    pub converged: &'a [Vec<bool>],
    /// Latent-resolution editable mask, `(frames, 1, h_latent, w_latent)` of 0/1.
    pub mask: &'a Tensor,
    /// Unedited `z_{t−1}` the regularizer compares against.
    pub previous: &'a LatentVideo,
}

/// Unit vector from `p` to `t`, or zero when they coincide.
pub fn drag_direction(p: Point, t: Point) -> Point {
    let (dx, dy) = (t.x - p.x, t.y - p.y);
    let n = (dx * dx + dy * dy).sqrt();
    if n == 0.0 {
        Point::new(0.0, 0.0)
    } else {
        Point::new(dx / n, dy / n)
    }
}

/// Supervision term over live features, with the stop-gradient operand read from `reference`.
pub fn supervision_term(
    live: &FeatureVolume,
    reference: &FeatureVolume,
    targets: &MotionTargets,
    radius: usize,
) -> Result<Option<Tensor>> {
    let (_, _, h, w) = live.dims();
    let offsets = disc_offsets(radius);
    let mut moved = Vec::new();
    let mut anchored = Vec::new();
    for (i, row) in targets.handles.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if targets.converged[i][j] {
                continue;
            }
            let d = drag_direction(p, targets.targets[i][j]);
            for &(dx, dy) in &offsets {
                let q = clamp_point(Point::new(p.x + dx as f64, p.y + dy as f64), h, w);
                let qd = clamp_point(Point::new(q.x + d.x, q.y + d.y), h, w);
                moved.push((i, qd));
                anchored.push((i, q));
            }
        }
    }
    if moved.is_empty() {
        return Ok(None);
    }
    let a = bilinear_sample_many(live, &moved)?;
    let b = bilinear_sample_many(&reference.detach(), &anchored)?;
    Ok(Some(l1_norm(&(a - b)?)?))
}

/// Masked L1 distance between the one-step-denoised edited latent and `z_{t−1}`.
pub fn regularizer_term(predicted_prev: &LatentVideo, previous: &LatentVideo, mask: &Tensor) -> Result<Tensor> {
    let outside = (1.0 - mask)?;
    let diff = (predicted_prev.tensor() - previous.tensor().detach())?;
    l1_norm(&diff.broadcast_mul(&outside)?)
}

/// Everything the drag loop is bound to.
pub struct DragContext<'a> {
    pub ddim: Ddim<'a>,
    pub opts: ForwardOptions<'a>,
    pub feature_layer: usize,
    pub cfg: &'a OptimizationConfig,
}

impl<'a> DragContext<'a> {
    pub fn features(&self, z: &LatentVideo) -> Result<FeatureVolume> {
        extract_features(
            self.ddim.backbone,
            z,
            self.ddim.schedule.timestep(self.cfg.t_opt),
            self.ddim.cond,
            self.feature_layer,
            &self.opts,
        )
    }

    /// Motion-supervision loss at `z_hat`, whose features `live` were extracted from it.
    ///
    /// `reference` supplies the stop-gradient feature operand; the drag loop passes
    /// `live` itself.
    pub fn motion_loss(
        &self,
        z_hat: &LatentVideo,
        live: &FeatureVolume,
        reference: &FeatureVolume,
        targets: &MotionTargets,
    ) -> Result<MotionLoss> {
        let sup = supervision_term(live, reference, targets, self.cfg.radius)?;
        let prev_hat = self.ddim.step(z_hat, self.cfg.t_opt, &self.opts)?;
        let reg = regularizer_term(&prev_hat, targets.previous, targets.mask)?;
        let supervision = match &sup {
            Some(s) => s.to_scalar::<f64>()?,
            None => 0.0,
        };
        let regularizer = reg.to_scalar::<f64>()?;
        let weighted = (reg * self.cfg.lambda)?;
        let total = match sup {
            Some(s) => (s + weighted)?,
            None => weighted,
        };
        Ok(MotionLoss {
            total,
            supervision,
            regularizer,
        })
    }

    /// Gradient of the motion loss with respect to the edited latent.
    pub fn loss_and_gradient(&self, z_hat: &LatentVideo, targets: &MotionTargets) -> Result<(MotionLoss, Tensor)> {
        let var = Var::from_tensor(&z_hat.tensor().detach())?;
        let z = z_hat.with_data(var.as_tensor().clone())?;
        let live = self.features(&z)?;
        let loss = self.motion_loss(&z, &live, &live, targets)?;
        let grads = loss.total.backward()?;
        let grad = match grads.get(var.as_tensor()) {
            Some(g) => g.clone(),
            None => var.as_tensor().zeros_like()?,
        };
        Ok((loss, grad))
    }
}

/// Plain gradient step `ẑ − η ∂L/∂ẑ`.
pub fn latent_step(z_hat: &LatentVideo, gradient: &Tensor, eta: f64, iteration: usize) -> Result<LatentVideo> {
    let g = gradient.flatten_all()?.to_vec1::<f64>()?;
    if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Optimization {
            iteration,
            message: format!(
                "gradient entry {pos} is {} ({} of {} entries non-finite)",
                g[pos],
                g.iter().filter(|v| !v.is_finite()).count(),
                g.len()
            ),
        });
    }
    z_hat.with_data((z_hat.tensor().detach() - (gradient * eta)?)?)
}

/// One line of the drag audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub iteration: usize,
    pub loss: f64,
    pub supervision: f64,
    pub regularizer: f64,
    /// Handle positions `[frame][point] = [x, y]` in pixels, before this iteration's step.
    pub handles: Vec<Vec<[f64; 2]>>,
    pub converged: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct DragOutcome {
    pub latent: LatentVideo,
    /// Number of gradient steps taken.
    pub iterations: usize,
    pub audit: Vec<AuditRecord>,
    /// Handles tracked on the final latent, in pixels.
    pub final_handles: Vec<Vec<Point>>,
}

fn to_pixels(rows: &[Vec<Point>]) -> Vec<Vec<Point>> {
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|p| Point::new(p.x * FEATURE_STRIDE, p.y * FEATURE_STRIDE))
                .collect()
        })
        .collect()
}

fn to_feature(rows: &[Vec<Point>]) -> Vec<Vec<Point>> {
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|p| Point::new(p.x / FEATURE_STRIDE, p.y / FEATURE_STRIDE))
                .collect()
        })
        .collect()
}

impl<'a> DragContext<'a> {
    fn converged(&self, handles: &[Vec<Point>], targets: &[Vec<Point>]) -> Vec<Vec<bool>> {
        handles
            .iter()
            .zip(targets)
            .map(|(hr, tr)| {
                hr.iter()
                    .zip(tr)
                    .map(|(p, t)| p.distance(*t) * FEATURE_STRIDE < self.cfg.stop_epsilon)
                    .collect()
            })
            .collect()
    }

    /// Runs the drag loop at `t_opt` and returns the edited noisy latent with its audit trail.
    pub fn run_drag(
        &self,
        trajectory: &InversionTrajectory,
        instruction: &PropagatedInstruction,
    ) -> Result<DragOutcome> {
        self.cfg.validate()?;
        let t = self.cfg.t_opt;
        let z_t = trajectory.get(t)?;
        let previous = &self.ddim.step(z_t, t, &self.opts)?;
        let previous = &LatentVideo::new(previous.tensor().detach(), previous.scale_factor())?;
        if instruction.frames() != z_t.frames() {
            return Err(Error::Structural(format!(
                "instruction covers {} frames, latent has {}",
                instruction.frames(),
                z_t.frames()
            )));
        }
        let mask = instruction.mask.latent_tensor()?;
        let original = self.features(z_t)?.detach();
        let (_, _, fh, fw) = original.dims();
        let targets: Vec<Vec<Point>> = to_feature(&instruction.targets)
            .into_iter()
            .map(|r| r.into_iter().map(|p| clamp_point(p, fh, fw)).collect())
            .collect();
        let mut track = TrackState::new(&original, to_feature(&instruction.handles))?;
        let mut z_hat = LatentVideo::new(z_t.tensor().detach(), z_t.scale_factor())?;
        let mut audit = Vec::new();
        let mut iterations = 0;
        for k in 0..self.cfg.max_steps {
            let var = Var::from_tensor(&z_hat.tensor().detach())?;
            let z = z_hat.with_data(var.as_tensor().clone())?;
            let live = self.features(&z)?;
            if k > 0 {
                track.handles = track_handles(&live, &track, self.cfg.track_radius)?;
                track.iteration = k;
            }
            let converged = self.converged(&track.handles, &targets);
            if converged.iter().flatten().all(|&c| c) {
                break;
            }
            let mt = MotionTargets {
                handles: &track.handles,
                targets: &targets,
                converged: &converged,
                mask: &mask,
                previous,
            };
            let loss = self.motion_loss(&z, &live, &live, &mt)?;
            let value = loss.total.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Optimization {
                    iteration: k,
                    message: format!("loss is {value}"),
                });
            }
            let grads = loss.total.backward()?;
            let grad = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            audit.push(AuditRecord {
                iteration: k,
                loss: value,
                supervision: loss.supervision,
                regularizer: loss.regularizer,
                handles: to_pixels(&track.handles)
                    .iter()
                    .map(|r| r.iter().map(|p| [p.x, p.y]).collect())
                    .collect(),
                converged,
            });
            z_hat = latent_step(&z_hat, &grad, self.cfg.eta, k)?;
            iterations += 1;
        }
        let final_features = self.features(&z_hat)?;
        if iterations > 0 {
            track.handles = track_handles(&final_features, &track, self.cfg.track_radius)?;
        }
        Ok(DragOutcome {
            latent: z_hat,
            iterations,
            audit,
            final_handles: to_pixels(&track.handles),
        })
    }
}

/// Writes the audit trail as JSON lines.
pub fn write_audit(path: &Path, records: &[AuditRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(l: usize, c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> FeatureVolume {
        let mut v = Vec::with_capacity(l * c * h * w);
        for i in 0..l {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        v.push(f(i, ch, y, x));
                    }
                }
            }
        }
        FeatureVolume::new(Tensor::from_vec(v, (l, c, h, w), &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn bilinear_exact_at_grid_and_mean_at_center() {
        let f = volume(1, 2, 4, 5, |_, c, y, x| (c * 100 + y * 10 + x) as f64 * 0.7);
        let v = bilinear_sample(&f, 0, Point::new(3.0, 2.0))
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(v, vec![23.0 * 0.7, 123.0 * 0.7]);
        let m = bilinear_sample(&f, 0, Point::new(1.5, 0.5))
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let corners = [1.0, 2.0, 11.0, 12.0].map(|k: f64| k * 0.7);
        assert!((m[0] - corners.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert!(matches!(
            bilinear_sample(&f, 0, Point::new(4.5, 0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn disc_of_radius_one_is_a_plus() {
        assert_eq!(disc_offsets(0), vec![(0, 0)]);
        assert_eq!(disc_offsets(1), vec![(0, -1), (-1, 0), (0, 0), (1, 0), (0, 1)]);
    }

    #[test]
    fn direction_is_unit_or_zero() {
        let d = drag_direction(Point::new(1.0, 1.0), Point::new(4.0, 5.0));
        assert!(((d.x * d.x + d.y * d.y).sqrt() - 1.0).abs() < 1e-15);
        assert_eq!(
            drag_direction(Point::new(2.0, 2.0), Point::new(2.0, 2.0)),
            Point::new(0.0, 0.0)
        );
    }

    #[test]
    fn latent_step_rejects_nan_and_respects_zero_rate() {
        let z = LatentVideo::zeros(1, 1, 2, 2, 8).unwrap();
        let z = z.with_data((z.tensor() + 1.5).unwrap()).unwrap();
        let g = Tensor::new(&[[[[1.0f64, f64::NAN], [0.0, 2.0]]]], &Device::Cpu).unwrap();
        assert!(matches!(
            latent_step(&z, &g, 0.1, 3),
            Err(Error::Optimization { iteration: 3, .. })
        ));
        let g = Tensor::new(&[[[[1.0f64, -1.0], [0.0, 2.0]]]], &Device::Cpu).unwrap();
        assert_eq!(latent_step(&z, &g, 0.0, 0).unwrap(), z);
        let zero = g.zeros_like().unwrap();
        assert_eq!(latent_step(&z, &zero, 0.5, 0).unwrap(), z);
    }

    #[test]
    fn l1_subgradient_is_zero_at_zero() {
        let v = Var::new(&[0.0f64, 2.0, -3.0], &Device::Cpu).unwrap();
        let loss = l1_norm(v.as_tensor()).unwrap();
        assert_eq!(loss.to_scalar::<f64>().unwrap(), 5.0);
        let g = loss.backward().unwrap();
        assert_eq!(
            g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap(),
            vec![0.0, 1.0, -1.0]
        );
    }

    #[test]
    fn tracking_ties_prefer_smallest_row_then_column() {
        // constant features: every candidate ties
        let f = volume(1, 1, 8, 8, |_, _, _, _| 1.0);
        let track = TrackState::new(&f, vec![vec![Point::new(4.0, 4.0)]]).unwrap();
        let out = track_handles(&f, &track, 2).unwrap();
        assert_eq!(out[0][0], Point::new(2.0, 2.0));
    }

    #[test]
    fn audit_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = AuditRecord {
            iteration: 0,
            loss: 1.5,
            supervision: 1.0,
            regularizer: 5.0,
            handles: vec![vec![[1.0, 2.0]]],
            converged: vec![vec![false]],
        };
        write_audit(&dir.path().join("audit.jsonl"), &[rec.clone(), rec.clone()]).unwrap();
        assert_eq!(
            read_audit(&dir.path().join("audit.jsonl")).unwrap(),
            vec![rec.clone(), rec]
        );
    }
}
