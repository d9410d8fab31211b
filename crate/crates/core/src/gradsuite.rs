//! Central-difference checks of every differentiable op and of the full
//! objective on an 8³ pair.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{init_parameters, BoundParams, EncoderConfig, ModelParameters};
use crate::error::Result;
use crate::fusion_warp::{integrate_velocity, FusionConfig};
use crate::loss_optim::{recon_term, LossConfig, Normalization};
use crate::model::{forward, ModelConfig, Sampling};
use crate::problatent::{kl_term, GaussianPosterior, PriorConfig};
use crate::tensor::{finite_diff_check, GradCheckReport, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Offsets whose targets stay inside the grid and at least 0.05 from any lattice plane.
fn interior_field(shape: [usize; 5], seed: u64, reach: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, c, d, h, w] = shape;
    let vol = d * h * w;
    Tensor::from_fn(&[n, c, d, h, w], |i| {
        let a = (i / vol) % 3;
        let p = i % vol;
        let coord = [p / (h * w), (p / w) % h, p % w][a] as f64;
        let extent = [d, h, w][a] as f64;
        loop {
            let off: f64 = rng.random_range(-reach..reach);
            let t = coord + off;
            let frac = t - t.floor();
            if t > 0.05 && t < extent - 1.05 && frac > 0.05 && frac < 0.95 {
                return off;
            }
        }
    })
}

fn weighted_sum(t: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = t.constant(weights.clone())?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn case(
    name: &str,
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    point: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCase> {
    Ok(GradCase {
        name: name.to_string(),
        report: finite_diff_check(f, point, h, GRAD_TOL, coords)?,
    })
}

/// Per-op checks on small random instances.
pub fn op_cases() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let x = random(&[1, 2, 4, 4, 4], 1, 1.0);
    let k = random(&[3, 2, 3, 3, 3], 2, 0.5);
    let b = random(&[3], 3, 0.5);
    let wy = random(&[1, 3, 2, 2, 2], 4, 1.0);
    let wy1 = random(&[1, 3, 4, 4, 4], 5, 1.0);

    out.push(case(
        "conv3d/input",
        |t, v| {
            let (kv, bv) = (t.constant(k.clone())?, t.constant(b.clone())?);
            let y = t.conv3d(v, kv, bv, 1, 1)?;
            weighted_sum(t, y, &wy1)
        },
        &x,
        1e-3,
        None,
    )?);
    out.push(case(
        "conv3d/kernel",
        |t, v| {
            let (xv, bv) = (t.constant(x.clone())?, t.constant(b.clone())?);
            let y = t.conv3d(xv, v, bv, 2, 1)?;
            let y = t.square(y)?;
            weighted_sum(t, y, &wy)
        },
        &k,
        1e-3,
        None,
    )?);
    out.push(case(
        "conv3d/bias",
        |t, v| {
            let (xv, kv) = (t.constant(x.clone())?, t.constant(k.clone())?);
            let y = t.conv3d(xv, kv, v, 2, 1)?;
            let y = t.square(y)?;
            weighted_sum(t, y, &wy)
        },
        &b,
        1e-3,
        None,
    )?);

    // away from the rectifier kink
    let e = Tensor::from_fn(&[1, 2, 2, 2, 3], |i| {
        let v = 0.1 + 0.05 * i as f64;
        if i % 3 == 0 { -v } else { v }
    });
    let other = random(&[1, 2, 2, 2, 3], 6, 1.0);
    out.push(case(
        "elementwise",
        |t, v| {
            let o = t.constant(other.clone())?;
            let a = t.mul(v, o)?;
            let a = t.sub(a, v)?;
            let a = t.leaky_relu(a, 0.2)?;
            let ex = t.exp(v)?;
            let sh = t.add_scalar(ex, 0.5)?;
            let l = t.ln(sh)?;
            let s = t.add(a, l)?;
            let s = t.scale(s, 1.3)?;
            let c = t.concat(&[s, v])?;
            let c = t.square(c)?;
            t.mean(c)
        },
        &e,
        1e-4,
        None,
    )?);

    let small = random(&[1, 2, 2, 3, 2], 7, 1.0);
    let wu = random(&[1, 2, 4, 6, 4], 8, 1.0);
    out.push(case(
        "upsample",
        |t, v| {
            let u = t.upsample_trilinear(v, 2)?;
            weighted_sum(t, u, &wu)
        },
        &small,
        1e-3,
        None,
    )?);

    let vol = random(&[1, 2, 4, 4, 4], 9, 1.0);
    let phi = interior_field([1, 3, 4, 4, 4], 10, 1.4);
    let ww = random(&[1, 2, 4, 4, 4], 11, 1.0);
    out.push(case(
        "warp/volume",
        |t, v| {
            let f = t.constant(phi.clone())?;
            let y = t.warp_trilinear(v, f)?;
            weighted_sum(t, y, &ww)
        },
        &vol,
        1e-3,
        None,
    )?);
    out.push(case(
        "warp/field",
        |t, v| {
            let xv = t.constant(vol.clone())?;
            let y = t.warp_trilinear(xv, v)?;
            weighted_sum(t, y, &ww)
        },
        &phi,
        1e-4,
        None,
    )?);

    let velocity = Tensor::from_fn(&[1, 3, 4, 4, 4], |i| 0.3 * (0.37 * i as f64 + 0.5).sin());
    let wv = random(&[1, 3, 4, 4, 4], 12, 1.0);
    out.push(case(
        "integrate_velocity",
        |t, v| {
            let phi = integrate_velocity(t, v, 3)?;
            weighted_sum(t, phi, &wv)
        },
        &velocity,
        1e-6,
        None,
    )?);

    let post = random(&[1, 3, 2, 2, 2], 13, 1.0);
    out.push(case(
        "kl_term",
        |t, v| {
            let logvar = t.scale(v, -0.8)?;
            let post = GaussianPosterior { mean: v, logvar };
            kl_term(t, &post, &PriorConfig { sigma_z: 0.7 })
        },
        &post,
        1e-5,
        None,
    )?);
    let target = random(&[1, 3, 2, 2, 2], 14, 1.0);
    out.push(case(
        "recon_term",
        |t, v| {
            let y = t.constant(target.clone())?;
            recon_term(t, y, v, 0.4, Normalization::Mean)
        },
        &post,
        1e-5,
        None,
    )?);
    Ok(out)
}

/// Configuration of the 8³ objective check: three levels (4³, 2³, 1³).
pub fn objective_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            levels: 3,
            channels: vec![4, 6, 6],
            head_init_std: 0.05,
            ..Default::default()
        },
        fusion: FusionConfig::default(),
        loss: LossConfig {
            weights: vec![1.0; 3],
            sigma_features: vec![0.5; 3],
            sigma_image: 0.1,
            ..Default::default()
        },
        prior: PriorConfig::default(),
    }
}

/// Parameters for the objective check. Mean heads get a fractional bias so
/// that sampled positions avoid the lattice.
pub fn objective_parameters(cfg: &ModelConfig) -> Result<ModelParameters> {
    let mut p = init_parameters(&cfg.encoder, 5)?;
    for level in 1..=cfg.encoder.levels {
        let b = p.get_mut(&format!("head.{}.mu.b", level)).expect("head present");
        b.data_mut().copy_from_slice(&[0.11, -0.07, 0.05]);
        let lv = p.get_mut(&format!("head.{}.logvar.b", level)).expect("head present");
        lv.data_mut().fill(-1.0);
    }
    Ok(p)
}

fn objective_pair() -> (Tensor, Tensor) {
    let blob = |c: [f64; 3]| {
        Tensor::from_fn(&[1, 1, 8, 8, 8], move |i| {
            let p = [(i / 64) as f64, ((i / 8) % 8) as f64, (i % 8) as f64];
            let r2: f64 = p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            (-r2 / 6.0).exp() + 0.05 * p[2] / 7.0
        })
    };
    (blob([3.4, 3.6, 3.3]), blob([3.9, 3.2, 3.8]))
}

/// Evenly spaced coordinates; for convolution kernels half of them are
/// centre taps, which stay live on grids smaller than the kernel.
fn probe_coords(t: &Tensor, count: usize) -> Vec<usize> {
    let n = t.numel();
    let count = count.max(1);
    let mut coords: Vec<usize> = if t.shape().len() == 5 {
        let taps: usize = t.shape()[2..].iter().product();
        let filters = n / taps;
        let centres = count / 2;
        let step = (filters / centres.max(1)).max(1);
        (0..filters)
            .step_by(step)
            .take(centres)
            .map(|f| f * taps + taps / 2)
            .collect()
    } else {
        Vec::new()
    };
    let rest = count - coords.len();
    let stride = (n / rest.max(1)).max(1);
    coords.extend((stride / 2..n).step_by(stride).take(rest));
    coords.sort_unstable();
    coords.dedup();
    coords
}

/// Checks of the total objective with respect to every parameter tensor, in
/// mean-sampling mode, on a fixed 8³ pair. Each tensor is probed at up to
/// `per_tensor` evenly spaced coordinates.
pub fn objective_cases(per_tensor: usize) -> Result<Vec<GradCase>> {
    let cfg = objective_config();
    let params = objective_parameters(&cfg)?;
    let (x, y) = objective_pair();
    let mut out = Vec::new();
    for (name, tensor) in params.iter() {
        let coords = probe_coords(tensor, per_tensor);
        let f = |t: &mut Tape, v: Var| {
            let mut vars = BTreeMap::new();
            for (other, value) in params.iter() {
                let var = if other == name { v } else { t.constant(value.clone())? };
                vars.insert(other.to_string(), var);
            }
            let bound = BoundParams { vars };
            let xv = t.constant(x.clone())?;
            let yv = t.constant(y.clone())?;
            Ok(forward(t, &bound, xv, yv, &cfg, Sampling::mean())?.total)
        };
        out.push(case(&format!("objective/{}", name), f, tensor, 1e-5, Some(&coords))?);
    }
    Ok(out)
}

/// The complete suite.
pub fn gradient_suite(per_tensor: usize) -> Result<Vec<GradCase>> {
    let mut all = op_cases()?;
    all.extend(objective_cases(per_tensor)?);
    Ok(all)
}
