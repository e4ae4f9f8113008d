//! Propagate a first-frame drag to every frame of a moving clip.

use dragvideo::instruction::{
    propagate_instruction, CorrelationTracker, FloodFillSegmenter, HandleShiftMaskTracker, Point, PropagationModels,
};
use dragvideo::pipeline::synthetic::{gaussian_blob_video, single_drag_instruction};

fn main() -> dragvideo::Result<()> {
    let handle = Point::new(20.0, 32.0);
    let video = gaussian_blob_video(6, 64, 64, handle, 7.0, (2.0, 0.0))?;
    let instruction = single_drag_instruction(video.frames(), handle, (10.0, -4.0), 2);
    println!("{}", serde_json::to_string_pretty(&instruction)?);

    let segmenter = FloodFillSegmenter::default();
    let tracker = CorrelationTracker::default();
    let models = PropagationModels {
        segmenter: &segmenter,
        point_tracker: &tracker,
        mask_tracker: &HandleShiftMaskTracker,
        keyframe_blend: true,
    };
    let propagated = propagate_instruction(&video, &instruction, models, 8)?;
    for f in 0..propagated.frames() {
        let (h, t) = (propagated.handles[f][0], propagated.targets[f][0]);
        println!(
            "frame {f}: handle ({:.1}, {:.1}) -> target ({:.1}, {:.1}), mask {} px",
            h.x,
            h.y,
            t.x,
            t.y,
            propagated.mask.masks[f].count()
        );
    }
    Ok(())
}
