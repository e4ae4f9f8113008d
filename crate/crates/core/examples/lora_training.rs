//! Fine-tune a sample-specific LoRA on one short clip and compare a fixed held-out noise loss before and after.

use candle_core::{Device, Tensor};
use dragvideo::codec::{Codec, ToyCodec};
use dragvideo::instruction::Point;
use dragvideo::lora::{denoising_loss, train_lora, LoraTrainConfig, LoraWeights};
use dragvideo::pipeline::synthetic::gaussian_blob_video;
use dragvideo::schedule::NoiseSchedule;
use dragvideo::unet::{Backbone, BackboneConfig, ConditioningEmbedding, ToyVideoUnet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> dragvideo::Result<()> {
    let video = gaussian_blob_video(4, 32, 32, Point::new(14.0, 16.0), 5.0, (0.5, 0.0))?;
    let z0 = ToyCodec.encode(&video)?;
    let backbone = ToyVideoUnet::new(BackboneConfig::default())?;
    let cfg = LoraTrainConfig {
        epochs: 20,
        rank: 4,
        ..LoraTrainConfig::default()
    };
    let lora = LoraWeights::inject(&backbone.lora_targets(), cfg.rank, cfg.seed)?;
    let schedule = NoiseSchedule::default();
    let cond = ConditioningEmbedding::null();

    let timesteps: Vec<usize> = (1..=8).map(|k| k * 110).collect();
    let (l, c, h, w) = z0.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = timesteps.len() * l * c * h * w;
    let held_out: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let held_out = Tensor::from_vec(held_out, (timesteps.len(), l, c, h, w), &Device::Cpu)?;
    let eval = |lora| -> dragvideo::Result<f64> {
        let loss = denoising_loss(&backbone, &z0, lora, &schedule, &timesteps, &held_out, &cond, false)?;
        Ok(loss.to_scalar::<f64>()?)
    };
    let before = eval(Some(&lora))?;

    let trace = train_lora(&backbone, &z0, &schedule, &cfg, &cond, &lora, false)?;
    for (epoch, loss) in trace.epoch_loss.iter().enumerate() {
        println!("epoch {epoch:>2}  batch loss {loss:.5}");
    }
    println!(
        "held-out noise loss: {before:.5} before, {:.5} after",
        eval(Some(&lora))?
    );
    Ok(())
}
