use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::conditioning::{FafimConfig, SlicConfig};
use crate::diffusion::{DenoiserConfig, LossConfig, MaskPolarity, NoiseSchedule, WeightingFn};
use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

/// Every tunable of a run. Serialized as flat `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub slic: SlicConfig,
    pub fafim: FafimConfig,
    pub unet_width: usize,
    pub time_features: usize,
    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub loss: LossConfig,
    pub train_steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Write a step checkpoint every this many stage-2 steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            slic: SlicConfig::default(),
            fafim: FafimConfig::default(),
            unet_width: 32,
            time_features: 32,
            diffusion_steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            loss: LossConfig::default(),
            train_steps: 2000,
            batch: 4,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
        }
    }
}

/// Documented keys, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed"),
    (
        "data.dir",
        "dataset directory of <name>.png / <name>_mask.png pairs",
    ),
    ("out.dir", "output directory for checkpoints and logs"),
    ("image.size", "model input size H = W in pixels"),
    (
        "codec.downsample_stages",
        "n in the latent downsample factor f = 2^n",
    ),
    ("codec.codebook_size", "codebook entries K"),
    ("codec.base_width", "first encoder stage width"),
    ("codec.steps", "stage-1 optimizer steps"),
    ("codec.batch", "stage-1 batch size"),
    ("codec.lr", "stage-1 learning rate"),
    ("codec.beta", "commitment weight"),
    (
        "codec.dead_after",
        "steps unused before a codebook entry is re-seeded",
    ),
    ("slic.superpixels", "superpixel count S"),
    ("slic.compactness", "SLIC compactness"),
    ("slic.iterations", "SLIC iterations"),
    ("fafim.patch", "patch size P"),
    ("fafim.width", "token width C"),
    ("fafim.heads", "attention heads H"),
    ("unet.base_width", "denoiser base width"),
    ("unet.time_features", "sinusoidal timestep feature width"),
    ("diffusion.steps", "diffusion steps T"),
    ("diffusion.beta_min", "first beta"),
    ("diffusion.beta_max", "last beta"),
    ("loss.alpha", "weight regularizer alpha"),
    ("loss.lambda", "denoising loss balance lambda"),
    (
        "loss.weighting",
        "paper | linear | log | reciprocal | uniform",
    ),
    ("loss.polarity", "intent | printed"),
    ("train.steps", "stage-2 optimizer steps"),
    ("train.batch", "stage-2 batch size"),
    ("train.lr", "stage-2 learning rate"),
    ("train.beta1", "Adam beta1"),
    ("train.beta2", "Adam beta2"),
    ("train.eps", "Adam epsilon"),
    (
        "train.checkpoint_every",
        "stage-2 checkpoint interval (0 = end only)",
    ),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Parses `key = value` text; `#` starts a comment. Unknown and
    /// duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative `data.dir` / `out.dir` resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.data_dir.is_relative() {
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "out.dir" => self.out_dir = PathBuf::from(value),
            "image.size" => self.codec.image_size = parse(key, value)?,
            "codec.downsample_stages" => self.codec.downsample_stages = parse(key, value)?,
            "codec.codebook_size" => self.codec.codebook_size = parse(key, value)?,
            "codec.base_width" => self.codec.base_width = parse(key, value)?,
            "codec.steps" => self.codec_train.steps = parse(key, value)?,
            "codec.batch" => self.codec_train.batch = parse(key, value)?,
            "codec.lr" => self.codec_train.lr = parse(key, value)?,
            "codec.beta" => self.codec_train.beta = parse(key, value)?,
            "codec.dead_after" => self.codec_train.dead_after = parse(key, value)?,
            "slic.superpixels" => self.slic.superpixels = parse(key, value)?,
            "slic.compactness" => self.slic.compactness = parse(key, value)?,
            "slic.iterations" => self.slic.iterations = parse(key, value)?,
            "fafim.patch" => self.fafim.patch = parse(key, value)?,
            "fafim.width" => self.fafim.width = parse(key, value)?,
            "fafim.heads" => self.fafim.heads = parse(key, value)?,
            "unet.base_width" => self.unet_width = parse(key, value)?,
            "unet.time_features" => self.time_features = parse(key, value)?,
            "diffusion.steps" => self.diffusion_steps = parse(key, value)?,
            "diffusion.beta_min" => self.beta_min = parse(key, value)?,
            "diffusion.beta_max" => self.beta_max = parse(key, value)?,
            "loss.alpha" => self.loss.alpha = parse(key, value)?,
            "loss.lambda" => self.loss.lambda = parse(key, value)?,
            "loss.weighting" => self.loss.weighting = value.parse::<WeightingFn>()?,
            "loss.polarity" => self.loss.polarity = value.parse::<MaskPolarity>()?,
            "train.steps" => self.train_steps = parse(key, value)?,
            "train.batch" => self.batch = parse(key, value)?,
            "train.lr" => self.adam.lr = parse(key, value)?,
            "train.beta1" => self.adam.beta1 = parse(key, value)?,
            "train.beta2" => self.adam.beta2 = parse(key, value)?,
            "train.eps" => self.adam.eps = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.loss.validate()?;
        self.schedule()?;
        if self.batch == 0 || self.codec_train.batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.slic.superpixels == 0 {
            return Err(Error::Config("slic.superpixels must be >= 1".into()));
        }
        if !(self.slic.compactness >= 0.0) {
            return Err(Error::Config("slic.compactness must be >= 0".into()));
        }
        let latent = self.codec.latent_size();
        if self.fafim.patch == 0 || latent % self.fafim.patch != 0 {
            return Err(Error::Config(format!(
                "fafim.patch = {} does not tile the {latent}x{latent} latent",
                self.fafim.patch
            )));
        }
        if self.fafim.width == 0 || self.fafim.width % 4 != 0 {
            return Err(Error::Config(
                "fafim.width must be a positive multiple of 4".into(),
            ));
        }
        if self.fafim.heads == 0 || self.fafim.width % self.fafim.heads != 0 {
            return Err(Error::Config(format!(
                "fafim.width = {} is not divisible into fafim.heads = {}",
                self.fafim.width, self.fafim.heads
            )));
        }
        if latent % 2 != 0 {
            return Err(Error::Config(format!(
                "latent size {latent} must be even for the denoiser"
            )));
        }
        if self.unet_width == 0 || self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::Config(
                "unet widths must be positive, time features even".into(),
            ));
        }
        if !(self.adam.lr > 0.0 && self.codec_train.lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_min, self.beta_max)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 7,
            out_channels: 3,
            base_width: self.unet_width,
            time_features: self.time_features,
        }
    }

    fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "data.dir" => self.data_dir.display().to_string(),
            "out.dir" => self.out_dir.display().to_string(),
            "image.size" => self.codec.image_size.to_string(),
            "codec.downsample_stages" => self.codec.downsample_stages.to_string(),
            "codec.codebook_size" => self.codec.codebook_size.to_string(),
            "codec.base_width" => self.codec.base_width.to_string(),
            "codec.steps" => self.codec_train.steps.to_string(),
            "codec.batch" => self.codec_train.batch.to_string(),
            "codec.lr" => self.codec_train.lr.to_string(),
            "codec.beta" => self.codec_train.beta.to_string(),
            "codec.dead_after" => self.codec_train.dead_after.to_string(),
            "slic.superpixels" => self.slic.superpixels.to_string(),
            "slic.compactness" => self.slic.compactness.to_string(),
            "slic.iterations" => self.slic.iterations.to_string(),
            "fafim.patch" => self.fafim.patch.to_string(),
            "fafim.width" => self.fafim.width.to_string(),
            "fafim.heads" => self.fafim.heads.to_string(),
            "unet.base_width" => self.unet_width.to_string(),
            "unet.time_features" => self.time_features.to_string(),
            "diffusion.steps" => self.diffusion_steps.to_string(),
            "diffusion.beta_min" => self.beta_min.to_string(),
            "diffusion.beta_max" => self.beta_max.to_string(),
            "loss.alpha" => self.loss.alpha.to_string(),
            "loss.lambda" => self.loss.lambda.to_string(),
            "loss.weighting" => self.loss.weighting.to_string(),
            "loss.polarity" => self.loss.polarity.to_string(),
            "train.steps" => self.train_steps.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.lr" => self.adam.lr.to_string(),
            "train.beta1" => self.adam.beta1.to_string(),
            "train.beta2" => self.adam.beta2.to_string(),
            "train.eps" => self.adam.eps.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            _ => unreachable!("key list and serializer disagree on {key}"),
        }
    }

    /// Full serialization with one documented line per key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(s, "# {doc}");
            let _ = writeln!(s, "{key} = {}", self.value(key));
        }
        s
    }

    /// Keys whose values differ, ignoring the run-length and I/O keys that a
    /// resumed run may change.
    pub fn resume_mismatches(&self, other: &RunConfig) -> Vec<&'static str> {
        const FREE: [&str; 4] = [
            "train.steps",
            "train.checkpoint_every",
            "data.dir",
            "out.dir",
        ];
        KEYS.iter()
            .map(|(k, _)| *k)
            .filter(|k| !FREE.contains(k) && self.value(k) != other.value(k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_every_key() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.loss.alpha = 0.0625;
        cfg.loss.weighting = WeightingFn::Log;
        cfg.loss.polarity = MaskPolarity::Printed;
        cfg.fafim.patch = 2;
        cfg.adam.lr = 3.5e-4;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("seed = 1\nloss.gamma = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("loss.gamma"), "{err}");
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = RunConfig::parse("# header\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn bad_values_and_duplicates() {
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("fafim.patch = 3").is_err());
        assert!(RunConfig::parse("loss.weighting = cubic").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = RunConfig::default();
        for (key, _) in KEYS {
            let v = cfg.value(key);
            cfg.set(key, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }
}
