//! Command-line interface behind the `volgen` binary.
//!
//! Exit codes: 0 on success (and for `--help`), 1 for usage, configuration
//! and data errors, 2 for failures once the work itself has started.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;

use crate::checkpoint::load_checkpoint;
use crate::config::{load_config, Config, Mode};
use crate::error::VolgenError;
use crate::metrics::{
    evaluate_sampler, pca_csv, pca_project, EvalProtocol, GeneratorSampler, MetricSelection, PcaFit,
    DEFAULT_METRIC_BATCH, DEFAULT_PAIRS, DEFAULT_TRIALS,
};
use crate::nifti_io::save_volume;
use crate::phantom::{phantom_dataset, write_dataset};
use crate::preprocess::load_dataset_dir;
use crate::rng::{stream, Stream};
use crate::trainer::{generate_samples, train_from, TrainState};
use crate::volume::{Dataset, Provenance};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Samples drawn for the PCA export when `--num` is not given.
pub const DEFAULT_PCA_SAMPLES: usize = 512;

#[derive(Debug, Parser)]
#[command(name = "volgen", version, about = "Generate and evaluate 3D brain volumes with an auto-encoding WGAN-GP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic brain-like phantom volumes as NIfTI files.
    Phantom(PhantomArgs),
    /// Train the networks on a directory of NIfTI volumes.
    Train(TrainArgs),
    /// Write generator samples from a checkpoint as NIfTI files.
    Generate(GenerateArgs),
    /// Compute MMD and MS-SSIM diversity for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Export principal-component coordinates of real and generated volumes.
    Pca(PcaArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of volumes to write.
    #[arg(long)]
    pub num: usize,
    /// Edge length of each cubic volume.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the phantom stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    AlphaWganGp,
    AlphaGanVanilla,
    WganGpOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AlphaWganGp => Mode::AlphaWganGp,
            ModeArg::AlphaGanVanilla => Mode::AlphaGanVanilla,
            ModeArg::WganGpOnly => Mode::WganGpOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of .nii / .nii.gz training volumes.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured training mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Override the configured number of steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of volumes to generate.
    #[arg(long, default_value_t = 1)]
    pub num: usize,
    /// Seed of the latent stream used for sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Mmd,
    Msssim,
    Both,
}

impl From<MetricArg> for MetricSelection {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Mmd => MetricSelection::Mmd,
            MetricArg::Msssim => MetricSelection::MsSsim,
            MetricArg::Both => MetricSelection::Both,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of real .nii / .nii.gz volumes.
    #[arg(long)]
    pub data: PathBuf,
    /// Which metrics to compute.
    #[arg(long, value_enum, default_value_t = MetricArg::Both)]
    pub metric: MetricArg,
    /// MMD trials, each on a fresh batch.
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    /// Volumes per MMD batch.
    #[arg(long, default_value_t = DEFAULT_METRIC_BATCH)]
    pub batch: usize,
    /// Sample pairs averaged for MS-SSIM.
    #[arg(long, default_value_t = DEFAULT_PAIRS)]
    pub pairs: usize,
    /// Seed of the evaluation stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for metrics.csv and metrics.json [default: the checkpoint directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of real .nii / .nii.gz volumes.
    #[arg(long)]
    pub data: PathBuf,
    /// Generated samples, and the maximum number of real volumes drawn.
    #[arg(long, default_value_t = DEFAULT_PCA_SAMPLES)]
    pub num: usize,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
    /// Fit the components on real and generated volumes together.
    #[arg(long)]
    pub combined_fit: bool,
    /// Seed for sampling generated and real volumes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: VolgenError,
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    /// Failure while reading inputs: exit 1.
    fn input(self) -> CliResult<T>;
    /// Failure while doing the work: exit 2.
    fn runtime(self) -> CliResult<T>;
}

impl<T> Stage<T> for crate::error::Result<T> {
    fn input(self) -> CliResult<T> {
        self.map_err(|error| CliError {
            code: EXIT_USAGE,
            error,
        })
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|error| CliError {
            code: EXIT_RUNTIME,
            error,
        })
    }
}

/// Parses `args` (program name first) and runs the command, writing
/// progress to `out` and errors to `err`. Returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.error);
            e.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Phantom(a) => cmd_phantom(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Pca(a) => cmd_pca(&a, out),
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) {
    let _ = writeln!(out, "{line}");
}

pub fn cmd_phantom(a: &PhantomArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.num == 0 {
        std::fs::create_dir_all(&a.out).map_err(|e| VolgenError::io(&a.out, e)).runtime()?;
        say(out, format_args!("wrote 0 phantoms to {}", a.out.display()));
        return Ok(());
    }
    let data = phantom_dataset(a.seed, a.num, a.size).input()?;
    let files = write_dataset(&a.out, &data).runtime()?;
    say(
        out,
        format_args!("wrote {} phantoms ({}³) to {}", files.len(), a.size, a.out.display()),
    );
    Ok(())
}

fn load_train_config(a: &TrainArgs) -> crate::error::Result<Config> {
    let mut config = load_config(&a.config)?;
    if let Some(m) = a.mode {
        config.train.mode = m.into();
    }
    if let Some(s) = a.steps {
        config.train.total_steps = s;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let state = match &a.resume {
        Some(ckpt) => {
            let mut state = load_checkpoint(ckpt).input()?;
            let requested = load_train_config(a).input()?;
            state.config.train.total_steps = requested.train.total_steps;
            state
        }
        None => TrainState::new(load_train_config(a).input()?).input()?,
    };
    let size = state.config.train.volume_size;
    let data = Arc::new(load_dataset_dir(&a.data, size).input()?);
    say(
        out,
        format_args!(
            "training {} on {} volumes ({}³) for {} steps",
            state.config.train.mode,
            data.len(),
            size,
            state.config.train.total_steps
        ),
    );
    let outcome = train_from(state, data, &a.out, |r| {
        if r.step % 100 == 0 {
            let l = &r.losses;
            say(
                out,
                format_args!(
                    "step {:>6}  l_eg {:>10.4}  l_d {:>10.4}  l_c {:>10.4}  recon_l1 {:.4}",
                    r.step, l.l_eg, l.l_d, l.l_c, l.recon_l1
                ),
            );
        }
    })
    .runtime()?;
    say(out, format_args!("final checkpoint: {}", outcome.final_checkpoint.display()));
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint).runtime()?;
    let mut rng = stream(a.seed, Stream::Latent);
    let vols = generate_samples(&state, a.num, &mut rng);
    std::fs::create_dir_all(&a.out).map_err(|e| VolgenError::io(&a.out, e)).runtime()?;
    for (i, v) in vols.iter().enumerate() {
        save_volume(a.out.join(format!("sample_{i:05}.nii.gz")), v).runtime()?;
    }
    say(out, format_args!("wrote {} samples to {}", vols.len(), a.out.display()));
    Ok(())
}

fn load_real(dir: &Path, size: usize) -> CliResult<Dataset> {
    load_dataset_dir(dir, size).input()
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint).runtime()?;
    let real = load_real(&a.data, state.config.train.volume_size)?;
    let metrics: MetricSelection = a.metric.into();
    if metrics.mmd() && real.len() < a.batch {
        return Err(VolgenError::Data(format!(
            "{} real volumes, mmd needs at least {}",
            real.len(),
            a.batch
        )))
        .input();
    }
    let protocol = EvalProtocol {
        trials: a.trials,
        batch: a.batch,
        pairs: a.pairs,
        seed: a.seed,
        metrics,
    };
    if protocol.trials == 0 || protocol.pairs == 0 || protocol.batch == 0 {
        return Err(VolgenError::Data("trials, batch and pairs must be positive".into())).input();
    }
    let mut sampler = GeneratorSampler {
        generator: &state.params.generator,
        latent_size: state.config.train.latent_size,
    };
    let report = evaluate_sampler(&mut sampler, &real, &protocol).runtime()?;
    let dir = a.out.clone().unwrap_or_else(|| a.checkpoint.clone());
    report.write(&dir, "metrics").runtime()?;
    let _ = write!(out, "{}", report.to_csv());
    say(out, format_args!("report written to {}", dir.join("metrics.csv").display()));
    Ok(())
}

pub fn cmd_pca(a: &PcaArgs, out: &mut dyn Write) -> CliResult<()> {
    let state = load_checkpoint(&a.checkpoint).runtime()?;
    let real = load_real(&a.data, state.config.train.volume_size)?;
    let mut rng = stream(a.seed, Stream::Eval);
    let real = if real.len() > a.num {
        let mut idx = sample(&mut rng, real.len(), a.num).into_vec();
        idx.sort_unstable();
        let picked = idx.iter().map(|&i| real.volumes()[i].clone()).collect();
        Dataset::new(picked, Provenance::Nifti).input()?
    } else {
        real
    };
    let generated = generate_samples(&state, a.num, &mut rng);
    let fit = if a.combined_fit {
        PcaFit::Combined
    } else {
        PcaFit::RealOnly
    };
    let rows = pca_project(&real, &generated, 2, fit).runtime()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| VolgenError::io(parent, e)).runtime()?;
    }
    std::fs::write(&a.out, pca_csv(&rows)).map_err(|e| VolgenError::io(&a.out, e)).runtime()?;
    say(
        out,
        format_args!(
            "wrote {} real and {} generated rows to {}",
            real.len(),
            generated.len(),
            a.out.display()
        ),
    );
    Ok(())
}
