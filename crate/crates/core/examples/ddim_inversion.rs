//! Invert a latent clip with DDIM and denoise it back, with and without refinement.

use dragvideo::codec::{Codec, ToyCodec};
use dragvideo::ddim::Ddim;
use dragvideo::instruction::Point;
use dragvideo::pipeline::synthetic::gaussian_blob_video;
use dragvideo::schedule::NoiseSchedule;
use dragvideo::unet::{BackboneConfig, ConditioningEmbedding, ForwardOptions, ToyVideoUnet};

fn main() -> dragvideo::Result<()> {
    let video = gaussian_blob_video(4, 32, 32, Point::new(14.0, 16.0), 5.0, (0.5, 0.0))?;
    let z0 = ToyCodec.encode(&video)?;
    let backbone = ToyVideoUnet::new(BackboneConfig::default())?;
    let schedule = NoiseSchedule::default();
    let cond = ConditioningEmbedding::null();
    let opts = ForwardOptions::default();
    let steps = 30;

    for passes in [0, 1, 2] {
        let ddim = Ddim::new(&backbone, &schedule, &cond).with_inversion_refinement(passes);
        let trajectory = ddim.invert(&z0, steps, &opts)?;
        let back = ddim.denoise(trajectory.get(steps)?, steps, &opts)?;
        println!(
            "refinement passes {passes}: roundtrip max error {:.3e}",
            back.max_abs_diff(&z0)?
        );
    }
    Ok(())
}
