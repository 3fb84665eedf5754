//! Trains a very small model on phantoms and prints the loss curve.
//!
//! `cargo run --release --example train_small -- [steps]`

use std::sync::Arc;

use volgen::config::{Config, ModelConfig, TrainConfig};
use volgen::phantom::phantom_dataset;
use volgen::trainer::train;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(200);
    let config = Config {
        train: TrainConfig {
            latent_size: 32,
            volume_size: 16,
            batch_size: 4,
            total_steps: steps,
            checkpoint_interval: steps.max(1),
            ..TrainConfig::default()
        },
        model: ModelConfig {
            channels: vec![4, 8, 8, 16],
            generator_base_channels: 16,
            code_hidden: 32,
            ..ModelConfig::default()
        },
    };
    let data = Arc::new(phantom_dataset(1, 64, 16)?);
    let out = tempfile::tempdir()?;
    let every = (steps / 10).max(1);
    let outcome = train(config, data, out.path(), |r| {
        if r.step % every == 0 {
            let l = &r.losses;
            println!(
                "step {:5}  l_eg {:+8.3}  l_d {:+8.3}  l_c {:+8.3}  recon {:.4}",
                r.step, l.l_eg, l.l_d, l.l_c, l.recon_l1
            );
        }
    })?;
    println!("finished at step {}", outcome.state.global_step);
    Ok(())
}
