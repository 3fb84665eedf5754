//! The training procedure: per step, joint encoder-generator updates, then
//! critic updates, then code-critic updates, all with Adam.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use volgen_tensor::{Gradients, Graph, Tensor, Var};

use crate::batch::{BatchIterator, BatchState};
use crate::checkpoint::save_checkpoint;
use crate::config::{Config, EgRepeat, Mode};
use crate::error::{Result, VolgenError};
use crate::losses::{
    adversarial_generator, gradient_penalty, loss_code_discriminator, loss_critic_wasserstein, loss_discriminator,
    loss_encoder, loss_generator, loss_vanilla_gan, loss_vanilla_generator, recon_l1, LossBundle, NetCritic,
};
use crate::networks::{init_params, ModelParams, NetKind, Network, Phase};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{stream, Stream, StreamRng};
use crate::volume::{batch_tensor, volumes_from_tensor, Dataset, Volume3D};

pub const LOG_HEADER: &str = "step,l_eg,l_d,l_c,recon_l1,gp_d,gp_c,wall_time";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// How many optimiser updates each network group has received.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UpdateCounters {
    pub eg: u64,
    pub d: u64,
    pub c: u64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub params: ModelParams<f32>,
    /// Indexed by [`NetKind::index`].
    pub adam: [AdamState<f32>; 4],
    pub global_step: u64,
    /// Source of latent draws and interpolation weights.
    pub rng: StreamRng,
    /// Position of the batch stream, recorded when a checkpoint is written.
    pub batches: Option<BatchState>,
    pub counters: UpdateCounters,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBundle,
    /// Seconds spent in the step.
    pub wall_time: f64,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{:.4}",
            self.step, l.l_eg, l.l_d, l.l_c, l.recon_l1, l.gp_d, l.gp_c, self.wall_time
        )
    }
}

impl TrainState {
    /// Fresh parameters and optimiser state for `config`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let params = init_params::<f32, _>(&config.model, &config.train, &mut stream(config.train.seed, Stream::Init))?;
        let adam = NetKind::ALL.map(|k| AdamState::for_network(params.get(k)));
        let rng = stream(config.train.seed, Stream::Latent);
        Ok(Self {
            config,
            params,
            adam,
            global_step: 0,
            rng,
            batches: None,
            counters: UpdateCounters::default(),
        })
    }

    fn adam_config(&self) -> AdamConfig {
        let t = &self.config.train;
        AdamConfig {
            lr: t.learning_rate,
            beta1: t.adam_beta1,
            beta2: t.adam_beta2,
            eps: 1e-8,
        }
    }
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

fn finite(step: u64, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(VolgenError::Divergence {
            step,
            term: term.to_string(),
        })
    }
}

fn apply_update(
    adam: &mut AdamState<f32>,
    cfg: &AdamConfig,
    net: &mut Network<f32>,
    grads: &mut Gradients<f32>,
    vars: &[Var],
) -> Result<()> {
    let gs: Vec<Tensor<f32>> = vars
        .iter()
        .zip(net.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    adam.update(cfg, net.params_mut(), &gs)
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// Encoder-generator update. Returns `(l_g, l_e, recon_l1)`.
fn eg_update(s: &mut TrainState, x_real: &Tensor<f32>, rep: usize) -> Result<(f64, f64, f64)> {
    let step = s.global_step + 1;
    let cfg = s.adam_config();
    let tc = s.config.train.clone();
    let n = x_real.shape()[0];
    let ModelParams {
        generator,
        discriminator,
        encoder,
        code_discriminator,
    } = &mut s.params;
    let mut g = Graph::new();
    let gv = generator.bind(&mut g, true);
    let dv = discriminator.bind(&mut g, false);
    let xr = g.constant(x_real.clone());

    if tc.mode == Mode::WganGpOnly {
        let z = g.constant(normal_tensor(&mut s.rng, &[n, tc.latent_size]));
        let x_rand = generator.forward(&mut g, &gv, z, Phase::Train);
        let d_rand = discriminator.forward(&mut g, &dv, x_rand, Phase::Train);
        let l_g = adversarial_generator(&mut g, &[d_rand]);
        let lg = finite(step, "l_eg", scalar(&g, l_g))?;
        let mut grads = g.backward_wrt(l_g, &gv);
        apply_update(&mut s.adam[NetKind::Generator.index()], &cfg, generator, &mut grads, &gv)?;
        return Ok((lg, 0.0, 0.0));
    }

    let train_e = rep == 0 || tc.eg_repeat == EgRepeat::Joint;
    let ev = encoder.bind(&mut g, train_e);
    let cv = code_discriminator.bind(&mut g, false);
    let z_e = encoder.forward(&mut g, &ev, xr, Phase::Train);
    let x_rec = generator.forward(&mut g, &gv, z_e, Phase::Train);
    let z_r = g.constant(normal_tensor(&mut s.rng, &[n, tc.latent_size]));
    let x_rand = generator.forward(&mut g, &gv, z_r, Phase::Train);
    let d_rec = discriminator.forward(&mut g, &dv, x_rec, Phase::Train);
    let d_rand = discriminator.forward(&mut g, &dv, x_rand, Phase::Train);
    let c_e = code_discriminator.forward(&mut g, &cv, z_e, Phase::Train);

    let (l_g, l_e, rec) = if tc.mode == Mode::AlphaGanVanilla {
        let p_rec = g.sigmoid(d_rec);
        let p_rand = g.sigmoid(d_rand);
        let p_e = g.sigmoid(c_e);
        let a = loss_vanilla_generator(&mut g, p_rec);
        let b = loss_vanilla_generator(&mut g, p_rand);
        let adv = g.add(a, b);
        let rec = recon_l1(&mut g, xr, x_rec);
        let w = g.scale(rec, tc.lambda2 as f32);
        let l_g = g.add(adv, w);
        (l_g, loss_vanilla_generator(&mut g, p_e), rec)
    } else {
        let (l_g, rec) = loss_generator(&mut g, d_rand, d_rec, xr, x_rec, tc.lambda2);
        (l_g, loss_encoder(&mut g, c_e), rec)
    };
    let l_eg = g.add(l_g, l_e);
    finite(step, "l_eg", scalar(&g, l_eg))?;
    let out = (scalar(&g, l_g), scalar(&g, l_e), finite(step, "recon_l1", scalar(&g, rec))?);

    let mut wrt = gv.clone();
    if train_e {
        wrt.extend(&ev);
    }
    let mut grads = g.backward_wrt(l_eg, &wrt);
    apply_update(&mut s.adam[NetKind::Generator.index()], &cfg, generator, &mut grads, &gv)?;
    if train_e {
        apply_update(&mut s.adam[NetKind::Encoder.index()], &cfg, encoder, &mut grads, &ev)?;
    }
    Ok(out)
}

/// Critic update. Returns `(l_d, gp_d)` and the batch's encoder codes for
/// the code-critic phase.
fn d_update(s: &mut TrainState, x_real: &Tensor<f32>) -> Result<(f64, f64, Option<Tensor<f32>>)> {
    let step = s.global_step + 1;
    let cfg = s.adam_config();
    let tc = s.config.train.clone();
    let n = x_real.shape()[0];
    let ModelParams {
        generator,
        discriminator,
        encoder,
        ..
    } = &mut s.params;

    // Fakes from the current generator, as constants.
    let mut fg = Graph::new();
    let gv = generator.bind(&mut fg, false);
    let z_r = fg.constant(normal_tensor(&mut s.rng, &[n, tc.latent_size]));
    let x_rand = generator.forward(&mut fg, &gv, z_r, Phase::Train);
    let x_rand = fg.value(x_rand).clone();
    let (x_rec, z_e) = if tc.mode.uses_encoder() {
        let ev = encoder.bind(&mut fg, false);
        let xr = fg.constant(x_real.clone());
        let z_e = encoder.forward(&mut fg, &ev, xr, Phase::Train);
        let x_rec = generator.forward(&mut fg, &gv, z_e, Phase::Train);
        (Some(fg.value(x_rec).clone()), Some(fg.value(z_e).clone()))
    } else {
        (None, None)
    };
    drop(fg);

    let mut g = Graph::new();
    let dv = discriminator.bind(&mut g, true);
    let xr = g.constant(x_real.clone());
    let xf = g.constant(x_rand.clone());
    let d_real = discriminator.forward(&mut g, &dv, xr, Phase::Train);
    let d_rand = discriminator.forward(&mut g, &dv, xf, Phase::Train);
    let d_rec = x_rec.as_ref().map(|x| {
        let v = g.constant(x.clone());
        discriminator.forward(&mut g, &dv, v, Phase::Train)
    });

    let (l_d, gp_val) = if tc.mode == Mode::AlphaGanVanilla {
        let p_real = g.sigmoid(d_real);
        let p_rand = g.sigmoid(d_rand);
        let p_rec = g.sigmoid(d_rec.expect("vanilla mode uses the encoder"));
        let (a, _) = loss_vanilla_gan(&mut g, p_real, p_rand);
        let (b, _) = loss_vanilla_gan(&mut g, p_real, p_rec);
        (g.add(a, b), 0.0)
    } else {
        let mut critic = NetCritic {
            net: discriminator,
            params: &dv,
            phase: Phase::Train,
        };
        let mut gp = gradient_penalty(&mut g, &mut critic, x_real, &x_rand, &mut s.rng)?;
        if tc.gp_both_fakes {
            if let Some(x_rec) = &x_rec {
                let gp2 = gradient_penalty(&mut g, &mut critic, x_real, x_rec, &mut s.rng)?;
                gp = g.add(gp, gp2);
            }
        }
        let gp_val = finite(step, "gp_d", scalar(&g, gp))?;
        let l = match d_rec {
            Some(d_rec) => loss_discriminator(&mut g, d_real, d_rand, d_rec, gp, tc.lambda1),
            None => loss_critic_wasserstein(&mut g, d_real, &[d_rand], Some(gp), tc.lambda1),
        };
        (l, gp_val)
    };
    let ld = finite(step, "l_d", scalar(&g, l_d))?;
    let mut grads = g.backward_wrt(l_d, &dv);
    apply_update(&mut s.adam[NetKind::Discriminator.index()], &cfg, discriminator, &mut grads, &dv)?;
    Ok((ld, gp_val, z_e))
}

/// Code-critic update on the encoder codes `z_e`. Returns `(l_c, gp_c)`.
fn c_update(s: &mut TrainState, z_e: &Tensor<f32>) -> Result<(f64, f64)> {
    let step = s.global_step + 1;
    let cfg = s.adam_config();
    let tc = s.config.train.clone();
    let n = z_e.shape()[0];
    let net = &mut s.params.code_discriminator;
    let z_r = normal_tensor(&mut s.rng, &[n, tc.latent_size]);
    let mut g = Graph::new();
    let cv = net.bind(&mut g, true);
    let ze = g.constant(z_e.clone());
    let zr = g.constant(z_r.clone());
    let c_e = net.forward(&mut g, &cv, ze, Phase::Train);
    let c_r = net.forward(&mut g, &cv, zr, Phase::Train);
    let (l_c, gp_val) = if tc.mode == Mode::AlphaGanVanilla {
        let p_r = g.sigmoid(c_r);
        let p_e = g.sigmoid(c_e);
        (loss_vanilla_gan(&mut g, p_r, p_e).0, 0.0)
    } else {
        let mut critic = NetCritic {
            net,
            params: &cv,
            phase: Phase::Train,
        };
        let gp = gradient_penalty(&mut g, &mut critic, &z_r, z_e, &mut s.rng)?;
        let gp_val = finite(step, "gp_c", scalar(&g, gp))?;
        (loss_code_discriminator(&mut g, c_e, c_r, gp, tc.lambda1), gp_val)
    };
    let lc = finite(step, "l_c", scalar(&g, l_c))?;
    let mut grads = g.backward_wrt(l_c, &cv);
    apply_update(&mut s.adam[NetKind::CodeDiscriminator.index()], &cfg, net, &mut grads, &cv)?;
    Ok((lc, gp_val))
}

/// The three kinds of optimiser update inside a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdatePhase {
    EncoderGenerator,
    Discriminator,
    CodeDiscriminator,
}

/// One training step on `batch`: `eg_updates_per_step` encoder-generator
/// updates (fresh prior codes each), then the critic, then the code critic.
/// The encoder and code critic are skipped in `wgan-gp-only` mode.
pub fn train_step(s: &mut TrainState, batch: &[Volume3D]) -> Result<StepReport> {
    train_step_observed(s, batch, |_, _| {})
}

/// [`train_step`], calling `observe` after every individual update.
pub fn train_step_observed(
    s: &mut TrainState,
    batch: &[Volume3D],
    mut observe: impl FnMut(UpdatePhase, &TrainState),
) -> Result<StepReport> {
    let started = Instant::now();
    let tc = s.config.train.clone();
    if batch.len() != tc.batch_size {
        return Err(VolgenError::Shape(format!("batch of {} volumes, configured {}", batch.len(), tc.batch_size)));
    }
    if batch[0].size() != tc.volume_size {
        return Err(VolgenError::Shape(format!(
            "volumes of edge {}, configured volume_size {}",
            batch[0].size(),
            tc.volume_size
        )));
    }
    let x_real = batch_tensor::<f32>(batch)?;
    let mut losses = LossBundle::default();

    for rep in 0..tc.eg_updates_per_step {
        let (l_g, l_e, rec) = eg_update(s, &x_real, rep)?;
        losses.l_g = l_g;
        losses.l_e = l_e;
        losses.l_eg = l_g + l_e;
        losses.recon_l1 = rec;
        s.counters.eg += 1;
        observe(UpdatePhase::EncoderGenerator, s);
    }
    let mut codes = None;
    for _ in 0..tc.d_updates_per_step {
        let (l_d, gp_d, z_e) = d_update(s, &x_real)?;
        losses.l_d = l_d;
        losses.gp_d = gp_d;
        codes = z_e;
        s.counters.d += 1;
        observe(UpdatePhase::Discriminator, s);
    }
    if let Some(z_e) = codes {
        for _ in 0..tc.c_updates_per_step {
            let (l_c, gp_c) = c_update(s, &z_e)?;
            losses.l_c = l_c;
            losses.gp_c = gp_c;
            s.counters.c += 1;
            observe(UpdatePhase::CodeDiscriminator, s);
        }
    }
    s.global_step += 1;
    if let Some(term) = losses.non_finite_term() {
        return Err(VolgenError::Divergence {
            step: s.global_step,
            term: term.into(),
        });
    }
    Ok(StepReport {
        step: s.global_step,
        losses,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Where a run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.out_dir.join(LOG_FILE)
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}"))
    }
}

/// Result of [`train`]: the final state and where its checkpoint lives.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub reports: Vec<StepReport>,
}

/// Trains from scratch. See [`train_from`].
pub fn train(config: Config, dataset: Arc<Dataset>, out_dir: impl AsRef<Path>, on_step: impl FnMut(&StepReport)) -> Result<TrainOutcome> {
    let state = TrainState::new(config)?;
    train_from(state, dataset, out_dir, on_step)
}

/// Runs steps until `total_steps`, appending one log row per step and
/// writing a checkpoint every `checkpoint_interval` steps and at the end.
/// A state loaded from a checkpoint continues its batch stream.
pub fn train_from(
    mut state: TrainState,
    dataset: Arc<Dataset>,
    out_dir: impl AsRef<Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    let paths = RunPaths::new(out_dir.as_ref());
    let tc = state.config.train.clone();
    if dataset.volume_size() != tc.volume_size {
        return Err(VolgenError::Data(format!(
            "dataset volumes have edge {}, configured volume_size {}",
            dataset.volume_size(),
            tc.volume_size
        )));
    }
    let mut batches = match &state.batches {
        Some(b) => BatchIterator::restore(dataset, tc.batch_size, tc.augment, b)?,
        None => BatchIterator::new(dataset, tc.batch_size, stream(tc.seed, Stream::Data), tc.augment)?,
    };
    std::fs::create_dir_all(&paths.out_dir).map_err(|e| VolgenError::io(&paths.out_dir, e))?;
    let mut log = open_log(&paths.log())?;

    let mut reports = Vec::new();
    let mut last_saved = None;
    while state.global_step < tc.total_steps {
        let batch = batches.next_batch();
        let report = train_step(&mut state, &batch)?;
        writeln!(log, "{}", report.csv_row()).map_err(|e| VolgenError::io(paths.log(), e))?;
        on_step(&report);
        reports.push(report);
        if state.global_step.is_multiple_of(tc.checkpoint_interval) {
            log.flush().map_err(|e| VolgenError::io(paths.log(), e))?;
            state.batches = Some(batches.state());
            save_checkpoint(&state, paths.checkpoint(state.global_step))?;
            last_saved = Some(state.global_step);
        }
    }
    log.flush().map_err(|e| VolgenError::io(paths.log(), e))?;
    let final_checkpoint = paths.checkpoint(state.global_step);
    state.batches = Some(batches.state());
    if last_saved != Some(state.global_step) {
        save_checkpoint(&state, &final_checkpoint)?;
    }
    Ok(TrainOutcome {
        state,
        final_checkpoint,
        reports,
    })
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| VolgenError::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{LOG_HEADER}").map_err(|e| VolgenError::io(path, e))?;
    }
    Ok(w)
}

/// `n` generator samples from prior codes, in evaluation mode.
pub fn generate_samples<R: Rng + ?Sized>(state: &TrainState, n: usize, rng: &mut R) -> Vec<Volume3D> {
    sample_generator(&state.params.generator, state.config.train.latent_size, n, rng)
}

/// Chunked evaluation-mode sampling from a generator.
pub fn sample_generator<R: Rng + ?Sized>(generator: &Network<f32>, latent: usize, n: usize, rng: &mut R) -> Vec<Volume3D> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = CHUNK.min(n - out.len());
        let z = normal_tensor(rng, &[k, latent]);
        let mut g = Graph::new();
        let gv = generator.bind(&mut g, false);
        let zv = g.constant(z);
        let x = generator.forward_eval(&mut g, &gv, zv);
        out.extend(volumes_from_tensor(g.value(x)).expect("generator emits [B,1,V,V,V]"));
    }
    out
}

/// Encodes volumes and decodes them again, in evaluation mode.
pub fn reconstruct(state: &TrainState, volumes: &[Volume3D]) -> Result<Vec<Volume3D>> {
    let x = batch_tensor::<f32>(volumes)?;
    let mut g = Graph::new();
    let ev = state.params.encoder.bind(&mut g, false);
    let gv = state.params.generator.bind(&mut g, false);
    let xv = g.constant(x);
    let z = state.params.encoder.forward_eval(&mut g, &ev, xv);
    let y = state.params.generator.forward_eval(&mut g, &gv, z);
    volumes_from_tensor(g.value(y))
}
