//! Twin strided convolutional encoders and the trainable parameter store.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which network is being built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Per-level posteriors at every level, fused.
    Full,
    /// Concatenated features of all levels feeding one deterministic
    /// full-resolution head; no posteriors, no KL terms.
    Baseline1,
    /// Posterior at the deepest level only.
    Baseline2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Baseline1, Variant::Baseline2];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline1 => "baseline1",
            Variant::Baseline2 => "baseline2",
        }
    }

    /// 1-based levels that carry a posterior head.
    pub fn posterior_levels(self, levels: usize) -> Vec<usize> {
        match self {
            Variant::Full => (1..=levels).collect(),
            Variant::Baseline1 => vec![],
            Variant::Baseline2 => vec![levels],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "baseline1" => Ok(Variant::Baseline1),
            "baseline2" => Ok(Variant::Baseline2),
            other => Err(Error::Config(format!("unknown mode '{}'", other))),
        }
    }
}

/// Which of the twin encoders to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Unaligned,
    Reference,
}

impl Stream {
    fn prefix(self) -> &'static str {
        match self {
            Stream::Unaligned => "enc.x",
            Stream::Reference => "enc.y",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub slope: f64,
    /// Share one set of weights between the two encoders.
    pub tied: bool,
    pub variant: Variant,
    /// Standard deviation of the posterior-head weights at initialization.
    pub head_init_std: f64,
    /// Initial posterior standard deviation (sets the log-variance bias).
    pub initial_sigma: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            channels: vec![16, 32, 32, 32],
            kernel: 3,
            stride: 2,
            slope: 0.2,
            tied: false,
            variant: Variant::Full,
            head_init_std: 1e-5,
            initial_sigma: 1e-2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("encoder needs at least one level".into()));
        }
        if self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "{} channel counts given for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.channels.contains(&0) || self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(
                "channel counts must be positive and the kernel size odd".into(),
            ));
        }
        if self.stride != 2 {
            return Err(Error::Config("encoder levels halve resolution: stride must be 2".into()));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::Config(format!("activation slope {} outside [0, 1)", self.slope)));
        }
        if self.initial_sigma <= 0.0 || self.head_init_std < 0.0 {
            return Err(Error::Config("initial sigma must be > 0 and head std >= 0".into()));
        }
        Ok(())
    }

    /// Checks that every spatial extent is divisible by `2^levels`.
    pub fn check_extent(&self, dims: [usize; 3]) -> Result<()> {
        let div = 1usize << self.levels;
        for (axis, &e) in ["depth", "height", "width"].iter().zip(&dims) {
            if e == 0 || e % div != 0 {
                return shape_err(format!(
                    "{} extent {} is not divisible by 2^{} = {}",
                    axis, e, self.levels, div
                ));
            }
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// Named trainable tensors in a fixed traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

fn kernel_name(prefix: &str, level: usize, part: &str) -> String {
    format!("{}.{}.{}", prefix, level, part)
}

impl ModelParameters {
    pub fn empty() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let t = tensor.with_requires_grad(true);
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in self.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone())?);
        }
        Ok(BoundParams { vars })
    }

    /// Adds the tape gradients of the bound leaves into each parameter.
    /// Parameters that the loss did not reach receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let var = bound.get(name)?;
            match tape.grad(var) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }
}

/// Tape handles of a parameter set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub(crate) vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter '{}'", name)))
    }
}

fn he_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn small_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Input channels of the concatenation head: both volumes plus every level of both pyramids.
pub fn concat_head_channels(cfg: &EncoderConfig) -> usize {
    2 + 2 * cfg.channels.iter().sum::<usize>()
}

/// He-initialized encoder kernels, zero biases, and posterior heads whose
/// output starts near zero mean and `initial_sigma` standard deviation.
pub fn init_parameters(cfg: &EncoderConfig, seed: u64) -> Result<ModelParameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::empty();
    let k = cfg.kernel;
    let streams: &[Stream] = if cfg.tied {
        &[Stream::Unaligned]
    } else {
        &[Stream::Unaligned, Stream::Reference]
    };
    for s in streams {
        let mut cin = 1;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let level = i + 1;
            params.insert(
                kernel_name(s.prefix(), level, "w"),
                he_normal(&[cout, cin, k, k, k], &mut rng),
            );
            params.insert(kernel_name(s.prefix(), level, "b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
    }
    let logvar_bias = 2.0 * cfg.initial_sigma.ln();
    for level in cfg.variant.posterior_levels(cfg.levels) {
        let cin = 2 * cfg.channels[level - 1];
        let prefix = format!("head.{}", level);
        params.insert(
            format!("{}.mu.w", prefix),
            small_normal(&[3, cin, k, k, k], cfg.head_init_std, &mut rng),
        );
        params.insert(format!("{}.mu.b", prefix), Tensor::zeros(&[3]));
        params.insert(
            format!("{}.logvar.w", prefix),
            small_normal(&[3, cin, k, k, k], cfg.head_init_std, &mut rng),
        );
        params.insert(format!("{}.logvar.b", prefix), Tensor::full(&[3], logvar_bias));
    }
    if cfg.variant == Variant::Baseline1 {
        let cin = concat_head_channels(cfg);
        params.insert(
            "head.concat.w",
            small_normal(&[3, cin, k, k, k], cfg.head_init_std, &mut rng),
        );
        params.insert("head.concat.b", Tensor::zeros(&[3]));
    }
    Ok(params)
}

/// Feature maps of one encoder, level 1 (shallowest) first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Runs one encoder on a `[N, 1, D, H, W]` input. Level `i` is a stride-2
/// convolution plus leaky rectification of level `i - 1`.
pub fn encode(
    tape: &mut Tape,
    input: Var,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    stream: Stream,
) -> Result<FeaturePyramid> {
    let [_, c, d, h, w] = tape.value(input).dims5()?;
    if c != 1 {
        return shape_err(format!("encoder input has {} channels, expected 1", c));
    }
    cfg.check_extent([d, h, w])?;
    let prefix = if cfg.tied { Stream::Unaligned.prefix() } else { stream.prefix() };
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut x = input;
    for level in 1..=cfg.levels {
        let wv = bound.get(&kernel_name(prefix, level, "w"))?;
        let bv = bound.get(&kernel_name(prefix, level, "b"))?;
        let conv = tape.conv3d(x, wv, bv, cfg.stride, cfg.padding())?;
        x = tape.leaky_relu(conv, cfg.slope)?;
        levels.push(x);
    }
    Ok(FeaturePyramid { levels })
}

/// Value-level encoding on a private tape.
pub fn encode_values(
    volume: &Tensor,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    stream: Stream,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let x = tape.constant(volume.clone())?;
    let pyr = encode(&mut tape, x, &bound, cfg, stream)?;
    Ok(pyr.levels.iter().map(|&v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_volume(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 1, n, n, n], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = EncoderConfig::default();
        let a = init_parameters(&cfg, 7).unwrap();
        let b = init_parameters(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_parameters(&cfg, 8).unwrap());
        for (name, t) in a.iter() {
            assert!(t.requires_grad());
            if name.starts_with("enc") && name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn he_variance_matches_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = he_normal(&[32, 16, 3, 3, 3], &mut rng);
        let n = k.numel() as f64;
        let mean = k.sum() / n;
        let var = k.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 2.0 / (16.0 * 27.0);
        assert!((var / expected - 1.0).abs() < 0.2, "{} vs {}", var, expected);
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let cfg = EncoderConfig::default();
        let count = |c: &EncoderConfig| init_parameters(c, 1).unwrap().scalar_count();
        assert_eq!(count(&cfg), init_parameters(&cfg, 99).unwrap().scalar_count());
        let enc: usize = [(1, 16), (16, 32), (32, 32), (32, 32)]
            .iter()
            .map(|&(i, o)| o * i * 27 + o)
            .sum();
        let heads: usize = [16, 32, 32, 32].iter().map(|c| 2 * (3 * 2 * c * 27 + 3)).sum();
        assert_eq!(count(&cfg), 2 * enc + heads);
        let tied = EncoderConfig { tied: true, ..cfg.clone() };
        assert_eq!(count(&tied), enc + heads);
        let b2 = EncoderConfig { variant: Variant::Baseline2, ..cfg.clone() };
        assert_eq!(count(&b2), 2 * enc + 2 * (3 * 64 * 27 + 3));
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = EncoderConfig::default();
        let params = init_parameters(&cfg, 1).unwrap();
        let levels = encode_values(&random_volume(32, 2), &params, &cfg, Stream::Unaligned).unwrap();
        let shapes: Vec<Vec<usize>> = levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 16, 16, 16, 16],
                vec![1, 32, 8, 8, 8],
                vec![1, 32, 4, 4, 4],
                vec![1, 32, 2, 2, 2]
            ]
        );
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let cfg = EncoderConfig::default();
        let params = init_parameters(&cfg, 1).unwrap();
        let levels =
            encode_values(&Tensor::zeros(&[1, 1, 16, 16, 16]), &params, &cfg, Stream::Reference).unwrap();
        assert!(levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn encoders_are_independent() {
        let cfg = EncoderConfig::default();
        let mut params = init_parameters(&cfg, 1).unwrap();
        let vol = random_volume(16, 5);
        let before = encode_values(&vol, &params, &cfg, Stream::Unaligned).unwrap();
        params
            .get_mut("enc.y.1.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.5);
        let after = encode_values(&vol, &params, &cfg, Stream::Unaligned).unwrap();
        assert_eq!(before, after);
        let y_after = encode_values(&vol, &params, &cfg, Stream::Reference).unwrap();
        assert_ne!(before, y_after);
        let again = encode_values(&vol, &params, &cfg, Stream::Unaligned).unwrap();
        assert_eq!(before, again);
    }

    #[test]
    fn indivisible_extent_names_axis() {
        let cfg = EncoderConfig::default();
        let params = init_parameters(&cfg, 1).unwrap();
        let v = Tensor::zeros(&[1, 1, 16, 24, 16]);
        match encode_values(&v, &params, &cfg, Stream::Unaligned) {
            Err(Error::Shape(msg)) => assert!(msg.contains("height"), "{}", msg),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig { channels: vec![16, 32], ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(init_parameters(&bad, 0).is_err());
        let bad_slope = EncoderConfig { slope: 1.5, ..Default::default() };
        assert!(bad_slope.validate().is_err());
    }
}
