//! Encode a synthetic clip with the toy codec, decode it, and report the pixel error.

use dragvideo::codec::{Codec, ToyCodec};
use dragvideo::instruction::Point;
use dragvideo::pipeline::synthetic::gaussian_blob_video;

fn main() -> dragvideo::Result<()> {
    let video = gaussian_blob_video(4, 64, 64, Point::new(24.0, 32.0), 8.0, (1.0, 0.0))?;
    let latent = ToyCodec.encode(&video)?;
    let (l, c, h, w) = latent.dims();
    println!(
        "{} frames of {}x{} -> latent {l}x{c}x{h}x{w} (scale {})",
        video.frames(),
        video.width(),
        video.height(),
        latent.scale_factor()
    );

    let decoded = ToyCodec.decode(&latent, video.fps())?;
    let worst = video
        .data()
        .iter()
        .zip(decoded.data())
        .map(|(a, b)| a.abs_diff(*b))
        .max()
        .unwrap_or(0);
    let mean = video
        .data()
        .iter()
        .zip(decoded.data())
        .map(|(a, b)| a.abs_diff(*b) as f64)
        .sum::<f64>()
        / video.data().len() as f64;
    println!("pixel error after roundtrip: max {worst}, mean {mean:.2}");
    let again = ToyCodec.encode(&decoded)?;
    println!(
        "re-encoding the decoded clip moves the latent by {:.2e}",
        again.max_abs_diff(&latent)?
    );
    Ok(())
}
