//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown or repeated keys are rejected. Every key has a
//! default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::encoder::{EncoderConfig, Variant};
use crate::error::{Error, Result};
use crate::fusion_warp::FusionConfig;
use crate::loss_optim::{AdamConfig, LossConfig};
use crate::model::ModelConfig;
use crate::problatent::{PriorConfig, SampleMode};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    pub train_sampling: SampleMode,
    pub inference_sampling: SampleMode,
    /// Directory of `pair_NNN_{x,y}.vxr` files; synthetic pairs are generated when absent.
    pub data_dir: Option<PathBuf>,
    /// Training pairs generated when no data directory is given.
    pub pairs: usize,
    /// Held-out pairs generated for evaluation and ablation.
    pub eval_pairs: usize,
    pub synth: SynthConfig,
    pub out: PathBuf,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: AdamConfig::default(),
            epochs: 100,
            seed: 0,
            train_sampling: SampleMode::Stochastic,
            inference_sampling: SampleMode::Mean,
            data_dir: None,
            pairs: 20,
            eval_pairs: 5,
            synth: SynthConfig::default(),
            out: PathBuf::from("out"),
            checkpoint_every: 0,
            threads: 1,
        }
    }
}

/// Keys that change no computed value and are left out of the hash.
const UNHASHED: [&str; 2] = ["out", "threads"];

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: cannot parse '{}'", key, v)))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{}: expected true or false, got '{}'", key, v))),
    }
}

impl RunConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let o = &self.optim;
        let s = &self.synth;
        vec![
            ("mode", m.encoder.variant.to_string()),
            ("levels", m.encoder.levels.to_string()),
            ("channels", list(&m.encoder.channels)),
            ("kernel", m.encoder.kernel.to_string()),
            ("slope", m.encoder.slope.to_string()),
            ("tied", m.encoder.tied.to_string()),
            ("head_init_std", m.encoder.head_init_std.to_string()),
            ("initial_sigma", m.encoder.initial_sigma.to_string()),
            ("semantics", m.fusion.semantics.as_str().to_string()),
            ("steps", m.fusion.steps.to_string()),
            ("scale_by_resolution", m.fusion.scale_by_resolution.to_string()),
            ("sigma_z", m.prior.sigma_z.to_string()),
            ("sigma_image", m.loss.sigma_image.to_string()),
            ("sigma_features", list(&m.loss.sigma_features)),
            ("weights", list(&m.loss.weights)),
            ("normalization", m.loss.normalization.as_str().to_string()),
            ("lr", o.lr.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("eps", o.eps.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("milestones", list(&o.milestones)),
            ("gamma", o.gamma.to_string()),
            ("clip_norm", o.clip_norm.map_or("none".to_string(), |c| c.to_string())),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("train_sampling", self.train_sampling.as_str().to_string()),
            ("inference_sampling", self.inference_sampling.as_str().to_string()),
            (
                "data_dir",
                self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("pairs", self.pairs.to_string()),
            ("eval_pairs", self.eval_pairs.to_string()),
            ("extent", list(&s.extent)),
            ("structures", s.structures.to_string()),
            ("nested", s.nested.to_string()),
            ("amplitude", s.amplitude.to_string()),
            ("smoothness", s.smoothness.to_string()),
            ("noise_std", s.noise_std.to_string()),
            ("data_seed", s.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("out", self.out.display().to_string()),
            ("threads", self.threads.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        let s = &mut self.synth;
        match key {
            "mode" => m.encoder.variant = v.parse()?,
            "levels" => m.encoder.levels = parse_num(key, v)?,
            "channels" => m.encoder.channels = parse_list(key, v)?,
            "kernel" => m.encoder.kernel = parse_num(key, v)?,
            "slope" => m.encoder.slope = parse_num(key, v)?,
            "tied" => m.encoder.tied = parse_bool(key, v)?,
            "head_init_std" => m.encoder.head_init_std = parse_num(key, v)?,
            "initial_sigma" => m.encoder.initial_sigma = parse_num(key, v)?,
            "semantics" => m.fusion.semantics = v.parse()?,
            "steps" => m.fusion.steps = parse_num(key, v)?,
            "scale_by_resolution" => m.fusion.scale_by_resolution = parse_bool(key, v)?,
            "sigma_z" => m.prior.sigma_z = parse_num(key, v)?,
            "sigma_image" => m.loss.sigma_image = parse_num(key, v)?,
            "sigma_features" => m.loss.sigma_features = parse_list(key, v)?,
            "weights" => m.loss.weights = parse_list(key, v)?,
            "normalization" => m.loss.normalization = v.parse()?,
            "lr" => o.lr = parse_num(key, v)?,
            "beta1" => o.beta1 = parse_num(key, v)?,
            "beta2" => o.beta2 = parse_num(key, v)?,
            "eps" => o.eps = parse_num(key, v)?,
            "weight_decay" => o.weight_decay = parse_num(key, v)?,
            "milestones" => {
                o.milestones = if v.is_empty() { Vec::new() } else { parse_list(key, v)? }
            }
            "gamma" => o.gamma = parse_num(key, v)?,
            "clip_norm" => {
                o.clip_norm = if v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "train_sampling" => self.train_sampling = v.parse()?,
            "inference_sampling" => self.inference_sampling = v.parse()?,
            "data_dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "pairs" => self.pairs = parse_num(key, v)?,
            "eval_pairs" => self.eval_pairs = parse_num(key, v)?,
            "extent" => {
                let e: Vec<usize> = parse_list(key, v)?;
                s.extent = match e[..] {
                    [n] => [n, n, n],
                    [d, h, w] => [d, h, w],
                    _ => return Err(Error::Config("extent takes 1 or 3 values".into())),
                }
            }
            "structures" => s.structures = parse_num(key, v)?,
            "nested" => s.nested = parse_num(key, v)?,
            "amplitude" => s.amplitude = parse_num(key, v)?,
            "smoothness" => s.smoothness = parse_num(key, v)?,
            "noise_std" => s.noise_std = parse_num(key, v)?,
            "data_seed" => s.seed = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{}'", key))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key '{}'", i + 1, k)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_config(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.data_dir.is_none() && self.pairs == 0 {
            return Err(Error::Config("no training pairs: set pairs or data_dir".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        self.model.encoder.check_extent(self.synth.extent)?;
        Ok(())
    }

    /// Text form that parses back to an equal configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out
    }

    /// Canonical text of the keys that influence results.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                let _ = writeln!(out, "{}={}", k, v);
            }
        }
        out
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.model.encoder.variant = variant;
        c
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.model.encoder
    }

    pub fn fusion(&self) -> &FusionConfig {
        &self.model.fusion
    }

    pub fn loss(&self) -> &LossConfig {
        &self.model.loss
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.model.prior
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
