//! Interrupts a run, saves a checkpoint, reloads it and finishes the run,
//! then checks the result against an uninterrupted run.

use std::sync::Arc;

use volgen::checkpoint::load_checkpoint;
use volgen::config::{Config, ModelConfig, TrainConfig};
use volgen::networks::NetKind;
use volgen::phantom::phantom_dataset;
use volgen::trainer::{train, train_from};

fn config(total_steps: u64) -> Config {
    Config {
        train: TrainConfig {
            latent_size: 16,
            volume_size: 16,
            batch_size: 2,
            total_steps,
            checkpoint_interval: 5,
            ..TrainConfig::default()
        },
        model: ModelConfig {
            channels: vec![2, 4, 4, 8],
            generator_base_channels: 8,
            code_hidden: 16,
            ..ModelConfig::default()
        },
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Arc::new(phantom_dataset(3, 12, 16)?);
    let dir = tempfile::tempdir()?;

    let straight = train(config(10), data.clone(), dir.path().join("straight"), |_| {})?;

    let first = train(config(5), data.clone(), dir.path().join("split"), |_| {})?;
    println!("stopped at step {}, checkpoint {}", first.state.global_step, first.final_checkpoint.display());
    let mut resumed = load_checkpoint(&first.final_checkpoint)?;
    resumed.config.train.total_steps = 10;
    let finished = train_from(resumed, data, dir.path().join("split"), |_| {})?;

    for kind in NetKind::ALL {
        let same = straight.state.params.get(kind).params() == finished.state.params.get(kind).params();
        println!("{:20} identical to uninterrupted run: {same}", kind.name());
    }
    Ok(())
}
