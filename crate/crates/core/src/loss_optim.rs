//! Reconstruction and per-level objectives, their weighted assembly, and Adam.

use crate::encoder::ModelParameters;
use crate::error::{shape_err, Error, Result};
use crate::fusion_warp::{to_displacement, warp_trilinear, FusionConfig};
use crate::problatent::{kl_term, GaussianPosterior, PriorConfig};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Sum,
    /// Divide each term by its element count.
    Mean,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::Sum => "sum",
            Normalization::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Normalization::Sum),
            "mean" => Ok(Normalization::Mean),
            other => Err(Error::Config(format!("unknown normalization '{}'", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// One weight per encoder level; the level count is `weights.len()`.
    pub weights: Vec<f64>,
    pub sigma_image: f64,
    /// Observation noise of the feature reconstruction, per level.
    pub sigma_features: Vec<f64>,
    /// Applied to the reconstruction terms and to the divergence terms alike.
    pub normalization: Normalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: vec![1.0; 4],
            sigma_image: 0.05,
            sigma_features: vec![1.0; 4],
            normalization: Normalization::Mean,
        }
    }
}

impl LossConfig {
    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_features.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} level weights but {} feature noise levels",
                self.weights.len(),
                self.sigma_features.len()
            )));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.sigma_image) || !self.sigma_features.iter().all(|&s| positive(s)) {
            return Err(Error::Config("noise standard deviations must be positive".into()));
        }
        if !self.weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::Config("level weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn normalized(tape: &mut Tape, total: Var, count: usize, norm: Normalization) -> Result<Var> {
    match norm {
        Normalization::Sum => Ok(total),
        Normalization::Mean => tape.scale(total, 1.0 / count as f64),
    }
}

/// `Σ (target − warped)² / (2·noise_std²)`, optionally per element.
pub fn recon_term(
    tape: &mut Tape,
    target: Var,
    warped: Var,
    noise_std: f64,
    norm: Normalization,
) -> Result<Var> {
    if tape.value(target).shape() != tape.value(warped).shape() {
        return shape_err(format!(
            "reconstruction of {:?} against {:?}",
            tape.value(target).shape(),
            tape.value(warped).shape()
        ));
    }
    if !(noise_std > 0.0) {
        return Err(Error::Config(format!("noise std {} must be positive", noise_std)));
    }
    let count = tape.value(target).numel();
    let diff = tape.sub(target, warped)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    let s = tape.scale(s, 0.5 / (noise_std * noise_std))?;
    normalized(tape, s, count, norm)
}

/// Divergence of one posterior from the prior under the configured normalization.
pub fn normalized_kl(
    tape: &mut Tape,
    post: &GaussianPosterior,
    prior: &PriorConfig,
    norm: Normalization,
) -> Result<Var> {
    let count = tape.value(post.mean).numel();
    let k = kl_term(tape, post, prior)?;
    normalized(tape, k, count, norm)
}

/// Reconstruction of `fy` by `fx` warped with the level's own latent, plus the divergence term.
/// `level` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn layer_loss(
    tape: &mut Tape,
    fz: Var,
    post: &GaussianPosterior,
    fx: Var,
    fy: Var,
    cfg: &LossConfig,
    prior: &PriorConfig,
    fusion: &FusionConfig,
    level: usize,
) -> Result<Var> {
    let sigma = *cfg
        .sigma_features
        .get(level.wrapping_sub(1))
        .ok_or_else(|| Error::Argument(format!("level {} outside 1..={}", level, cfg.levels())))?;
    let phi = to_displacement(tape, fz, fusion)?;
    let moved = warp_trilinear(tape, fx, phi)?;
    let recon = recon_term(tape, fy, moved, sigma, cfg.normalization)?;
    let kl = normalized_kl(tape, post, prior, cfg.normalization)?;
    tape.add(recon, kl)
}

/// `image + Σ w_i · level_i` over the given 1-based levels.
pub fn weighted_total(
    tape: &mut Tape,
    per_level: &[(usize, Var)],
    image_level: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let mut acc = image_level;
    for &(level, v) in per_level {
        let w = *cfg
            .weights
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::Argument(format!("level {} outside 1..={}", level, cfg.levels())))?;
        let term = tape.scale(v, w)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// `image + Σ w_i · per_level[i]` with one entry per configured level.
pub fn total_loss(tape: &mut Tape, per_level: &[Var], image_level: Var, cfg: &LossConfig) -> Result<Var> {
    if per_level.len() != cfg.levels() {
        return Err(Error::Argument(format!(
            "{} level losses for {} configured levels",
            per_level.len(),
            cfg.levels()
        )));
    }
    let indexed: Vec<(usize, Var)> = per_level.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect();
    weighted_total(tape, &indexed, image_level, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: each step multiplies parameters by `1 − lr·weight_decay`.
    pub weight_decay: f64,
    /// Fractions of the total epoch count at which the rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            milestones: vec![0.6, 0.85],
            gamma: 0.1,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !(self.gamma > 0.0) {
            return bad("eps and gamma must be > 0, weight decay >= 0");
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("milestones are fractions in [0, 1]");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    /// Rate in effect during `epoch` (0-based) of `total_epochs`.
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= m * total_epochs as f64)
            .count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, params: &ModelParameters) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(t, (m, v))| m.len() == t.numel() && v.len() == t.numel());
        if !ok {
            return Err(Error::Optimizer("moment buffers do not match the parameters".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update at rate `lr`. Gradients are read, not cleared.
pub fn adam_step(params: &mut ModelParameters, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    state.check(params)?;
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(Error::Optimizer(format!("parameter '{}' has no gradient", name)));
        }
    }
    let clip_scale = match cfg.clip_norm {
        Some(c) => {
            let norm = params
                .tensors()
                .iter()
                .flat_map(|t| t.grad().unwrap())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for ((p, m), v) in params.tensors_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g: Vec<f64> = p.grad().unwrap().iter().map(|g| g * clip_scale).collect();
        for (((x, mi), vi), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / bc1;
            let vh = *vi / bc2;
            *x = *x * decay - lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    if params.tensors().iter().any(|t| !t.is_finite()) {
        return Err(Error::NumericState { op: "adam_step" });
    }
    Ok(())
}
