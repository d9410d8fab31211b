//! Per-level diagonal Gaussian posteriors over the latent field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::BoundParams;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    /// Prior standard deviation of every latent component.
    pub sigma_z: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { sigma_z: 1.0 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_z > 0.0 && self.sigma_z.is_finite()) {
            return Err(Error::Config(format!("prior sigma {} must be positive", self.sigma_z)));
        }
        Ok(())
    }
}

/// Mean and log-variance fields, both `[N, 3, d, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mean: Var,
    pub logvar: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Mean,
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Stochastic => "stochastic",
            SampleMode::Mean => "mean",
        }
    }
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(SampleMode::Stochastic),
            "mean" => Ok(SampleMode::Mean),
            other => Err(Error::Config(format!("unknown sampling mode '{}'", other))),
        }
    }
}

/// Runs the level's mean and log-variance heads on the channel concatenation of both features.
pub fn posterior_params(
    tape: &mut Tape,
    fx: Var,
    fy: Var,
    bound: &BoundParams,
    level: usize,
) -> Result<GaussianPosterior> {
    if tape.value(fx).shape() != tape.value(fy).shape() {
        return shape_err(format!(
            "level {} features differ in shape: {:?} vs {:?}",
            level,
            tape.value(fx).shape(),
            tape.value(fy).shape()
        ));
    }
    let both = tape.concat(&[fx, fy])?;
    let head = |tape: &mut Tape, which: &str| -> Result<Var> {
        let w = bound.get(&format!("head.{}.{}.w", level, which))?;
        let b = bound.get(&format!("head.{}.{}.b", level, which))?;
        let expected = 2 * tape.value(fx).shape()[1];
        if tape.value(w).shape()[1] != expected {
            return shape_err(format!(
                "level {} head expects {} input channels, features give {}",
                level,
                tape.value(w).shape()[1],
                expected
            ));
        }
        tape.conv3d(both, w, b, 1, 1)
    };
    let mean = head(tape, "mu")?;
    let logvar = head(tape, "logvar")?;
    Ok(GaussianPosterior { mean, logvar })
}

/// Generator for the noise of one level within one training iteration.
pub fn level_rng(seed: u64, iteration: u64, level: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration.wrapping_mul(64).wrapping_add(level as u64));
    rng
}

/// `μ + exp(½·logvar)·ε` with constant `ε ~ N(0, I)`, or `μ` itself in mean mode.
pub fn sample_latent(
    tape: &mut Tape,
    post: &GaussianPosterior,
    rng: &mut ChaCha8Rng,
    mode: SampleMode,
) -> Result<Var> {
    match mode {
        SampleMode::Mean => Ok(post.mean),
        SampleMode::Stochastic => {
            let shape = tape.value(post.mean).shape().to_vec();
            let eps = Tensor::from_fn(&shape, |_| StandardNormal.sample(rng));
            let eps = tape.constant(eps)?;
            let half = tape.scale(post.logvar, 0.5)?;
            let sigma = tape.exp(half)?;
            let noise = tape.mul(sigma, eps)?;
            tape.add(post.mean, noise)
        }
    }
}

/// `½ Σ [σ²/σz² + μ²/σz² − 1 − ln(σ²/σz²)]` over every site and channel.
///
/// The printed objective writes the mean term as an unsquared norm and leaves
/// out the `−1`; the squared form used here is the divergence between the two
/// Gaussians and vanishes exactly at the prior.
pub fn kl_term(tape: &mut Tape, post: &GaussianPosterior, prior: &PriorConfig) -> Result<Var> {
    prior.validate()?;
    let var_z = prior.sigma_z * prior.sigma_z;
    let ratio = tape.add_scalar(post.logvar, -2.0 * prior.sigma_z.ln())?;
    let var_ratio = tape.exp(ratio)?;
    let mu2 = tape.square(post.mean)?;
    let mu_ratio = tape.scale(mu2, 1.0 / var_z)?;
    let s = tape.add(var_ratio, mu_ratio)?;
    let s = tape.sub(s, ratio)?;
    let s = tape.add_scalar(s, -1.0)?;
    let total = tape.sum(s)?;
    tape.scale(total, 0.5)
}

/// Value-level closed form on plain slices.
pub fn kl_value(mean: &[f64], logvar: &[f64], sigma_z: f64) -> f64 {
    let var_z = sigma_z * sigma_z;
    let shift = 2.0 * sigma_z.ln();
    0.5 * mean
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| (lv - shift).exp() + m * m / var_z - 1.0 - (lv - shift))
        .sum::<f64>()
}
