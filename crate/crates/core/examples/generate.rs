//! Samples volumes from a checkpoint and writes them as NIfTI files.
//!
//! `cargo run --release --example generate -- <checkpoint_dir> [count] [out_dir]`
//!
//! Without a checkpoint argument a freshly initialised model is used, which
//! is enough to see the output format.

use volgen::checkpoint::load_checkpoint;
use volgen::config::{Config, ModelConfig, TrainConfig};
use volgen::nifti_io::save_volume;
use volgen::rng::{stream, Stream};
use volgen::trainer::{generate_samples, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let state = match args.next() {
        Some(dir) if dir != "-" => load_checkpoint(dir)?,
        _ => TrainState::new(Config {
            train: TrainConfig {
                latent_size: 32,
                volume_size: 16,
                ..TrainConfig::default()
            },
            model: ModelConfig {
                channels: vec![4, 8, 8, 16],
                generator_base_channels: 16,
                code_hidden: 32,
                ..ModelConfig::default()
            },
        })?,
    };
    let count: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(3);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "samples".into()));
    std::fs::create_dir_all(&out)?;

    let mut rng = stream(state.config.train.seed, Stream::Latent);
    for (i, v) in generate_samples(&state, count, &mut rng).iter().enumerate() {
        let path = out.join(format!("sample_{i:05}.nii.gz"));
        save_volume(&path, v)?;
        let (lo, hi) = v.min_max();
        println!("{}  {}^3  range [{lo:+.3e}, {hi:+.3e}]", path.display(), v.size());
    }
    Ok(())
}
