//! Experiment configuration.
//!
//! A config file is a flat TOML document; every key is optional and falls
//! back to the default below. Recognised keys:
//!
//! ```toml
//! latent_size = 1000
//! volume_size = 64            # power of two, >= 16
//! batch_size = 4
//! learning_rate = 0.0002
//! adam_beta1 = 0.5
//! adam_beta2 = 0.999
//! lambda1 = 10.0              # gradient-penalty weight
//! lambda2 = 10.0              # reconstruction weight
//! eg_updates_per_step = 2
//! d_updates_per_step = 1
//! c_updates_per_step = 1
//! total_steps = 1000
//! mode = "alpha-wgan-gp"      # | "alpha-gan-vanilla" | "wgan-gp-only"
//! seed = 0
//! checkpoint_interval = 500
//! gp_both_fakes = false       # penalise D on x_rand and x_rec
//! eg_repeat = "joint"         # | "generator-only"
//! augment = true
//! channels = [64, 128, 256, 512]
//! generator_base_channels = 512
//! code_hidden = 4096
//! leaky_slope = 0.2
//! ```
//!
//! `VOLGEN_SEED`, when set, overrides `seed`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VolgenError};

pub const SEED_ENV: &str = "VOLGEN_SEED";

/// Which objective family the trainer optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Encoder, generator, discriminator and code discriminator with
    /// Wasserstein losses and gradient penalties.
    #[default]
    AlphaWganGp,
    /// Same four networks with the cross-entropy GAN loss and no penalties.
    AlphaGanVanilla,
    /// Generator and discriminator only.
    WganGpOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::AlphaWganGp => "alpha-wgan-gp",
            Mode::AlphaGanVanilla => "alpha-gan-vanilla",
            Mode::WganGpOnly => "wgan-gp-only",
        }
    }

    pub fn uses_encoder(self) -> bool {
        !matches!(self, Mode::WganGpOnly)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = VolgenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha-wgan-gp" => Ok(Mode::AlphaWganGp),
            "alpha-gan-vanilla" => Ok(Mode::AlphaGanVanilla),
            "wgan-gp-only" => Ok(Mode::WganGpOnly),
            other => Err(VolgenError::config(
                "mode",
                format!("unknown mode `{other}` (expected alpha-wgan-gp, alpha-gan-vanilla or wgan-gp-only)"),
            )),
        }
    }
}

/// What the repeated encoder-generator updates within one step optimise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EgRepeat {
    /// Every repeat updates encoder and generator on `L_E + L_G`.
    #[default]
    Joint,
    /// Only the first repeat touches the encoder; later repeats update the
    /// generator alone.
    GeneratorOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_size: usize,
    pub volume_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eg_updates_per_step: usize,
    pub d_updates_per_step: usize,
    pub c_updates_per_step: usize,
    pub total_steps: u64,
    pub mode: Mode,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub gp_both_fakes: bool,
    pub eg_repeat: EgRepeat,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_size: 1000,
            volume_size: 64,
            batch_size: 4,
            learning_rate: 0.0002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lambda1: 10.0,
            lambda2: 10.0,
            eg_updates_per_step: 2,
            d_updates_per_step: 1,
            c_updates_per_step: 1,
            total_steps: 1000,
            mode: Mode::AlphaWganGp,
            seed: 0,
            checkpoint_interval: 500,
            gp_both_fakes: false,
            eg_repeat: EgRepeat::Joint,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("latent_size", self.latent_size)?;
        positive("batch_size", self.batch_size)?;
        positive("eg_updates_per_step", self.eg_updates_per_step)?;
        positive("d_updates_per_step", self.d_updates_per_step)?;
        positive("c_updates_per_step", self.c_updates_per_step)?;
        if self.checkpoint_interval == 0 {
            return Err(VolgenError::config("checkpoint_interval", "must be positive"));
        }
        if !self.volume_size.is_power_of_two() || self.volume_size < 16 {
            return Err(VolgenError::config(
                "volume_size",
                "volume_size must be a power of two ≥ 16",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(VolgenError::config("learning_rate", "must be a finite positive number"));
        }
        for (key, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(beta.is_finite() && (0.0..1.0).contains(&beta)) {
                return Err(VolgenError::config(key, "must lie in [0, 1)"));
            }
        }
        for (key, lambda) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(VolgenError::config(key, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of critic/encoder layers 1-4.
    pub channels: Vec<usize>,
    pub generator_base_channels: usize,
    pub code_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            generator_base_channels: 512,
            code_hidden: 4096,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 4 {
            return Err(VolgenError::config(
                "channels",
                format!("expected exactly 4 entries, found {}", self.channels.len()),
            ));
        }
        if self.channels.contains(&0) {
            return Err(VolgenError::config("channels", "entries must be positive"));
        }
        positive("generator_base_channels", self.generator_base_channels)?;
        positive("code_hidden", self.code_hidden)?;
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(VolgenError::config("leaky_slope", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Generator stage widths: base, base/2, base/4, base/8 (at least 1).
    pub fn generator_channels(&self) -> [usize; 4] {
        let b = self.generator_base_channels;
        [b, (b / 2).max(1), (b / 4).max(1), (b / 8).max(1)]
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(VolgenError::config(key, "must be a positive integer"));
    }
    Ok(())
}

/// Both halves of an experiment configuration.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// On-disk form: one flat table, every key optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatConfig {
    latent_size: Option<usize>,
    volume_size: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    eg_updates_per_step: Option<usize>,
    d_updates_per_step: Option<usize>,
    c_updates_per_step: Option<usize>,
    total_steps: Option<u64>,
    mode: Option<String>,
    seed: Option<SeedValue>,
    checkpoint_interval: Option<u64>,
    gp_both_fakes: Option<bool>,
    eg_repeat: Option<EgRepeat>,
    augment: Option<bool>,
    channels: Option<Vec<usize>>,
    generator_base_channels: Option<usize>,
    code_hidden: Option<usize>,
    leaky_slope: Option<f64>,
}

/// TOML integers are signed 64-bit, so seeds above `i64::MAX` are written
/// as decimal strings.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum SeedValue {
    Int(i64),
    Text(String),
}

impl SeedValue {
    fn resolve(self) -> Result<u64> {
        match self {
            SeedValue::Int(v) => u64::try_from(v).map_err(|_| VolgenError::config("seed", "must be non-negative")),
            SeedValue::Text(s) => s
                .parse()
                .map_err(|_| VolgenError::config("seed", format!("{s:?} is not an unsigned integer"))),
        }
    }
}

impl From<u64> for SeedValue {
    fn from(v: u64) -> Self {
        match i64::try_from(v) {
            Ok(i) => SeedValue::Int(i),
            Err(_) => SeedValue::Text(v.to_string()),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }

    /// Parses a flat TOML document, filling defaults and validating.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let flat: FlatConfig = toml::from_str(text).map_err(|e| VolgenError::ConfigSyntax(e.to_string()))?;
        let d = Config::default();
        let train = TrainConfig {
            latent_size: flat.latent_size.unwrap_or(d.train.latent_size),
            volume_size: flat.volume_size.unwrap_or(d.train.volume_size),
            batch_size: flat.batch_size.unwrap_or(d.train.batch_size),
            learning_rate: flat.learning_rate.unwrap_or(d.train.learning_rate),
            adam_beta1: flat.adam_beta1.unwrap_or(d.train.adam_beta1),
            adam_beta2: flat.adam_beta2.unwrap_or(d.train.adam_beta2),
            lambda1: flat.lambda1.unwrap_or(d.train.lambda1),
            lambda2: flat.lambda2.unwrap_or(d.train.lambda2),
            eg_updates_per_step: flat.eg_updates_per_step.unwrap_or(d.train.eg_updates_per_step),
            d_updates_per_step: flat.d_updates_per_step.unwrap_or(d.train.d_updates_per_step),
            c_updates_per_step: flat.c_updates_per_step.unwrap_or(d.train.c_updates_per_step),
            total_steps: flat.total_steps.unwrap_or(d.train.total_steps),
            mode: match flat.mode {
                Some(m) => m.parse()?,
                None => d.train.mode,
            },
            seed: match flat.seed {
                Some(s) => s.resolve()?,
                None => d.train.seed,
            },
            checkpoint_interval: flat.checkpoint_interval.unwrap_or(d.train.checkpoint_interval),
            gp_both_fakes: flat.gp_both_fakes.unwrap_or(d.train.gp_both_fakes),
            eg_repeat: flat.eg_repeat.unwrap_or(d.train.eg_repeat),
            augment: flat.augment.unwrap_or(d.train.augment),
        };
        let model = ModelConfig {
            channels: flat.channels.unwrap_or(d.model.channels),
            generator_base_channels: flat.generator_base_channels.unwrap_or(d.model.generator_base_channels),
            code_hidden: flat.code_hidden.unwrap_or(d.model.code_hidden),
            leaky_slope: flat.leaky_slope.unwrap_or(d.model.leaky_slope),
        };
        let cfg = Config { train, model };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialises every key, so the output reloads to an equal config.
    pub fn to_toml_string(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let flat = FlatConfig {
            latent_size: Some(t.latent_size),
            volume_size: Some(t.volume_size),
            batch_size: Some(t.batch_size),
            learning_rate: Some(t.learning_rate),
            adam_beta1: Some(t.adam_beta1),
            adam_beta2: Some(t.adam_beta2),
            lambda1: Some(t.lambda1),
            lambda2: Some(t.lambda2),
            eg_updates_per_step: Some(t.eg_updates_per_step),
            d_updates_per_step: Some(t.d_updates_per_step),
            c_updates_per_step: Some(t.c_updates_per_step),
            total_steps: Some(t.total_steps),
            mode: Some(t.mode.as_str().to_string()),
            seed: Some(SeedValue::from(t.seed)),
            checkpoint_interval: Some(t.checkpoint_interval),
            gp_both_fakes: Some(t.gp_both_fakes),
            eg_repeat: Some(t.eg_repeat),
            augment: Some(t.augment),
            channels: Some(m.channels.clone()),
            generator_base_channels: Some(m.generator_base_channels),
            code_hidden: Some(m.code_hidden),
            leaky_slope: Some(m.leaky_slope),
        };
        toml::to_string(&flat).expect("flat config serialises")
    }

    /// Applies the seed override from an environment lookup.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(raw) = lookup(SEED_ENV) {
            self.train.seed = raw
                .trim()
                .parse()
                .map_err(|_| VolgenError::config("seed", format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// Reads, validates and env-overrides a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| VolgenError::io(path, e))?;
    let mut cfg = Config::from_toml_str(&text)?;
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml_str("").unwrap();
        assert_eq!(cfg.train.latent_size, 1000);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.learning_rate, 0.0002);
        assert_eq!(cfg.train.lambda1, 10.0);
        assert_eq!(cfg.train.lambda2, 10.0);
        assert_eq!(cfg.train.eg_updates_per_step, 2);
        assert_eq!((cfg.train.adam_beta1, cfg.train.adam_beta2), (0.5, 0.999));
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn single_override() {
        let cfg = Config::from_toml_str("volume_size = 32").unwrap();
        let mut expect = Config::default();
        expect.train.volume_size = 32;
        assert_eq!(cfg, expect);
    }

    #[test]
    fn volume_size_must_be_power_of_two() {
        let err = Config::from_toml_str("volume_size = 24").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("volume_size must be a power of two ≥ 16"), "{msg}");
        assert!(Config::from_toml_str("volume_size = 8").is_err());
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("learning_rate = -1.0", "learning_rate"),
            ("adam_beta1 = 1.0", "adam_beta1"),
            ("lambda2 = -0.5", "lambda2"),
            ("batch_size = 0", "batch_size"),
            ("channels = [1, 2, 3]", "channels"),
            ("mode = \"vae-gan\"", "mode"),
        ] {
            let msg = Config::from_toml_str(text).unwrap_err().to_string();
            assert!(msg.contains(key), "{text}: {msg}");
        }
        let msg = Config::from_toml_str("learning_rat = 0.1").unwrap_err().to_string();
        assert!(msg.contains("learning_rat"), "{msg}");
        let msg = Config::from_toml_str("batch_size = \"four\"").unwrap_err().to_string();
        assert!(msg.contains("batch_size"), "{msg}");
    }

    #[test]
    fn malformed_syntax_is_rejected() {
        assert!(matches!(
            Config::from_toml_str("latent_size = = 3"),
            Err(VolgenError::ConfigSyntax(_))
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_config("/definitely/not/here.toml"),
            Err(VolgenError::Io { .. })
        ));
    }

    #[test]
    fn env_overrides_seed_only() {
        let mut cfg = Config::default();
        cfg.apply_env(|k| (k == SEED_ENV).then(|| "42".to_string())).unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert!(cfg.apply_env(|_| Some("nope".into())).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(
            latent in 1usize..3000,
            vexp in 4u32..8,
            batch in 1usize..16,
            lr in 1e-6f64..1.0,
            b1 in 0.0f64..0.99,
            l1 in 0.0f64..100.0,
            steps in 0u64..100_000,
            mode in prop_oneof![Just(Mode::AlphaWganGp), Just(Mode::AlphaGanVanilla), Just(Mode::WganGpOnly)],
            seed in any::<u64>(),
            chans in proptest::collection::vec(1usize..600, 4),
        ) {
            let mut cfg = Config::default();
            cfg.train.latent_size = latent;
            cfg.train.volume_size = 1 << vexp;
            cfg.train.batch_size = batch;
            cfg.train.learning_rate = lr;
            cfg.train.adam_beta1 = b1;
            cfg.train.lambda1 = l1;
            cfg.train.total_steps = steps;
            cfg.train.mode = mode;
            cfg.train.seed = seed;
            cfg.model.channels = chans;
            let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
