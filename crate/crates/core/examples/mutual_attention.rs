//! Denoise an original and an edited latent side by side with mutual self-attention.

use dragvideo::codec::{Codec, ToyCodec};
use dragvideo::ddim::Ddim;
use dragvideo::instruction::Point;
use dragvideo::msa::{denoise_pair, msa_attention, MsaPlan, StepLatent};
use dragvideo::pipeline::synthetic::gaussian_blob_video;
use dragvideo::schedule::NoiseSchedule;
use dragvideo::unet::{BackboneConfig, ConditioningEmbedding, ForwardOptions, ToyVideoUnet};

fn main() -> dragvideo::Result<()> {
    let q = candle_core::Tensor::new(&[[[1.0f64, 0.0]]], &candle_core::Device::Cpu)?;
    let k = candle_core::Tensor::new(&[[[1.0f64, 0.0], [0.0, 1.0]]], &candle_core::Device::Cpu)?;
    let v = candle_core::Tensor::new(&[[[2.0f64], [4.0]]], &candle_core::Device::Cpu)?;
    println!(
        "attention on a 2-token toy: {:?}",
        msa_attention(&q, &k, &v, 2.0)?.flatten_all()?.to_vec1::<f64>()?
    );

    let backbone = ToyVideoUnet::new(BackboneConfig::default())?;
    let schedule = NoiseSchedule::default();
    let cond = ConditioningEmbedding::null();
    let ddim = Ddim::new(&backbone, &schedule, &cond);
    let original = ToyCodec.encode(&gaussian_blob_video(
        3,
        32,
        32,
        Point::new(12.0, 16.0),
        5.0,
        (0.0, 0.0),
    )?)?;
    let edited = ToyCodec.encode(&gaussian_blob_video(
        3,
        32,
        32,
        Point::new(18.0, 16.0),
        5.0,
        (0.0, 0.0),
    )?)?;

    let start = |latent| StepLatent { step: 10, latent };
    let plans = [("off", MsaPlan::disabled()), ("spatial", MsaPlan::default())];
    for (name, plan) in plans {
        let pair = denoise_pair(
            &ddim,
            &start(original.clone()),
            &start(edited.clone()),
            &plan,
            &ForwardOptions::default(),
        )?;
        println!(
            "msa {name:<8} edited vs original after denoising: {:.4e}",
            pair.edited.max_abs_diff(&pair.original)?
        );
    }
    Ok(())
}
