//! Times training steps at a chosen scale.
//!
//! ```text
//! cargo run --release --example step_timing -- 32 8,16,32,64 64 256 5
//! ```
//! Arguments: volume size, critic channels, generator base width, code
//! hidden width, steps.

use std::sync::Arc;

use volgen::batch::BatchIterator;
use volgen::config::{Config, ModelConfig, TrainConfig};
use volgen::phantom::phantom_dataset;
use volgen::rng::{stream, Stream};
use volgen::trainer::{train_step, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let v: usize = arg(0, "32").parse()?;
    let channels: Vec<usize> = arg(1, "8,16,32,64").split(',').map(str::parse).collect::<Result<_, _>>()?;
    let base: usize = arg(2, "64").parse()?;
    let hidden: usize = arg(3, "256").parse()?;
    let steps: usize = arg(4, "5").parse()?;
    let latent: usize = arg(5, "1000").parse()?;

    let config = Config {
        train: TrainConfig {
            volume_size: v,
            latent_size: latent,
            ..TrainConfig::default()
        },
        model: ModelConfig {
            channels,
            generator_base_channels: base,
            code_hidden: hidden,
            ..ModelConfig::default()
        },
    };
    let data = Arc::new(phantom_dataset(0, 200, v)?);
    let mut batches = BatchIterator::new(data, config.train.batch_size, stream(0, Stream::Data), true)?;
    let mut state = TrainState::new(config)?;
    let total: usize = state.params.generator.num_params()
        + state.params.discriminator.num_params()
        + state.params.encoder.num_params()
        + state.params.code_discriminator.num_params();
    println!("parameters: {total}");
    let every = (steps / 20).max(1);
    let (mut secs, mut recon) = (0.0, 0.0);
    for i in 1..=steps {
        let r = train_step(&mut state, &batches.next_batch())?;
        secs += r.wall_time;
        recon += r.losses.recon_l1;
        if i % every == 0 {
            println!(
                "step {:>5}  {:.3}s/step  l_eg {:.4}  l_d {:.4}  l_c {:.4}  mean recon {:.4}",
                r.step,
                secs / every as f64,
                r.losses.l_eg,
                r.losses.l_d,
                r.losses.l_c,
                recon / every as f64
            );
            (secs, recon) = (0.0, 0.0);
        }
    }
    Ok(())
}
