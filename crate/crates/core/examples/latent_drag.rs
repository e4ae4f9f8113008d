//! Drag a blob ten pixels to the right through a transparent backbone.
//!
//! The transparent backbone exposes the latent itself as the feature map, so
//! the handle should land on the target within a few dozen steps.

use dragvideo::codec::{Codec, ToyCodec};
use dragvideo::ddim::Ddim;
use dragvideo::dove::{DragContext, OptimizationConfig};
use dragvideo::instruction::{
    propagate_instruction, CorrelationTracker, FloodFillSegmenter, HandleShiftMaskTracker, Point, PropagationModels,
};
use dragvideo::pipeline::synthetic::{gaussian_blob_video, single_drag_instruction};
use dragvideo::schedule::NoiseSchedule;
use dragvideo::unet::{ConditioningEmbedding, ForwardOptions, TransparentBackbone};

fn main() -> dragvideo::Result<()> {
    let handle = Point::new(50.0, 60.0);
    let video = gaussian_blob_video(2, 128, 128, handle, 12.0, (0.0, 0.0))?;
    let z0 = ToyCodec.encode(&video)?;

    let segmenter = FloodFillSegmenter::default();
    let tracker = CorrelationTracker::default();
    let instruction = propagate_instruction(
        &video,
        &single_drag_instruction(video.frames(), handle, (10.0, 0.0), 2),
        PropagationModels {
            segmenter: &segmenter,
            point_tracker: &tracker,
            mask_tracker: &HandleShiftMaskTracker,
            keyframe_blend: true,
        },
        z0.scale_factor(),
    )?;

    let backbone = TransparentBackbone::new(4);
    let schedule = NoiseSchedule::default();
    let cond = ConditioningEmbedding::null();
    let cfg = OptimizationConfig {
        max_steps: 80,
        ..OptimizationConfig::default()
    };
    let ddim = Ddim::new(&backbone, &schedule, &cond);
    let trajectory = ddim.invert(&z0, cfg.t_opt, &ForwardOptions::default())?;
    let ctx = DragContext {
        ddim,
        opts: ForwardOptions::default(),
        feature_layer: 0,
        cfg: &cfg,
    };
    let out = ctx.run_drag(&trajectory, &instruction)?;
    for record in out.audit.iter().step_by(5) {
        println!("{}", serde_json::to_string(record)?);
    }
    let last = out.final_handles[0][0];
    println!(
        "{} iterations, handle now at ({:.1}, {:.1})",
        out.iterations, last.x, last.y
    );
    Ok(())
}
