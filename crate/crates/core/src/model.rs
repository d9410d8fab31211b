//! Forward pass of the registration network and its two ablations.

use crate::encoder::{encode, BoundParams, EncoderConfig, ModelParameters, Stream, Variant};
use crate::error::{shape_err, Error, Result};
use crate::fusion_warp::{fuse_latents, to_displacement, warp_trilinear, FusionConfig};
use crate::loss_optim::{layer_loss, recon_term, weighted_total, LossConfig};
use crate::problatent::{level_rng, posterior_params, sample_latent, PriorConfig, SampleMode};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub prior: PriorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.prior.validate()?;
        if self.loss.levels() != self.encoder.levels {
            return Err(Error::Config(format!(
                "{} loss levels for a {}-level encoder",
                self.loss.levels(),
                self.encoder.levels
            )));
        }
        if self.fusion.steps == 0 {
            return Err(Error::Config("integration steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.encoder.variant
    }
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub total: Var,
    pub image: Var,
    /// `(level, loss)` for every level with a posterior.
    pub levels: Vec<(usize, Var)>,
    /// Full-resolution latent before integration.
    pub latent: Var,
    pub displacement: Var,
    pub warped: Var,
}

/// Sampling for one pass: `mode` plus the `(seed, iteration)` keying the noise.
#[derive(Clone, Copy, Debug)]
pub struct Sampling {
    pub mode: SampleMode,
    pub seed: u64,
    pub iteration: u64,
}

impl Sampling {
    pub fn mean() -> Self {
        Self {
            mode: SampleMode::Mean,
            seed: 0,
            iteration: 0,
        }
    }
}

fn spatial(t: &Tensor) -> Result<[usize; 3]> {
    let [_, _, d, h, w] = t.dims5()?;
    Ok([d, h, w])
}

/// Builds the objective for the pair `(x, y)`, both `[1, 1, D, H, W]`.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
    y: Var,
    cfg: &ModelConfig,
    sampling: Sampling,
) -> Result<Forward> {
    if tape.value(x).shape() != tape.value(y).shape() {
        return shape_err(format!(
            "pair extents differ: {:?} vs {:?}",
            tape.value(x).shape(),
            tape.value(y).shape()
        ));
    }
    let full = spatial(tape.value(x))?;
    let enc = &cfg.encoder;
    let px = encode(tape, x, bound, enc, Stream::Unaligned)?;
    let py = encode(tape, y, bound, enc, Stream::Reference)?;

    let mut level_losses = Vec::new();
    let latent = match enc.variant {
        Variant::Full | Variant::Baseline2 => {
            let mut latents = Vec::new();
            for level in enc.variant.posterior_levels(enc.levels) {
                let (fx, fy) = (px.levels[level - 1], py.levels[level - 1]);
                let post = posterior_params(tape, fx, fy, bound, level)?;
                let mut rng = level_rng(sampling.seed, sampling.iteration, level);
                let fz = sample_latent(tape, &post, &mut rng, sampling.mode)?;
                let l = layer_loss(tape, fz, &post, fx, fy, &cfg.loss, &cfg.prior, &cfg.fusion, level)?;
                level_losses.push((level, l));
                latents.push(fz);
            }
            fuse_latents(tape, &latents, full, cfg.fusion.scale_by_resolution)?
        }
        Variant::Baseline1 => {
            let mut parts = vec![x, y];
            for pyr in [&px, &py] {
                for (i, &f) in pyr.levels.iter().enumerate() {
                    parts.push(tape.upsample_trilinear(f, 1 << (i + 1))?);
                }
            }
            let stacked = tape.concat(&parts)?;
            let w = bound.get("head.concat.w")?;
            let b = bound.get("head.concat.b")?;
            let pad = enc.kernel / 2;
            tape.conv3d(stacked, w, b, 1, pad)?
        }
    };
    let displacement = to_displacement(tape, latent, &cfg.fusion)?;
    let warped = warp_trilinear(tape, x, displacement)?;
    let image = recon_term(tape, y, warped, cfg.loss.sigma_image, cfg.loss.normalization)?;
    let total = weighted_total(tape, &level_losses, image, &cfg.loss)?;
    Ok(Forward {
        total,
        image,
        levels: level_losses,
        latent,
        displacement,
        warped,
    })
}

/// Scalar values of one evaluated objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub image: f64,
    /// Indexed by level - 1; NaN-free, zero for levels without a posterior.
    pub levels: Vec<f64>,
}

impl LossValues {
    pub fn read(tape: &Tape, fwd: &Forward, levels: usize) -> Result<Self> {
        let mut per = vec![0.0; levels];
        for &(l, v) in &fwd.levels {
            per[l - 1] = tape.value(v).item()?;
        }
        Ok(Self {
            total: tape.value(fwd.total).item()?,
            image: tape.value(fwd.image).item()?,
            levels: per,
        })
    }
}

/// Displacement and warped volume; posterior means under `Sampling::mean()`.
pub fn infer(
    params: &ModelParameters,
    cfg: &ModelConfig,
    x: &Tensor,
    y: &Tensor,
    sampling: Sampling,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    let fwd = forward(&mut tape, &bound, xv, yv, cfg, sampling)?;
    Ok((
        tape.value(fwd.displacement).detached(),
        tape.value(fwd.warped).detached(),
    ))
}
