//! Latent fusion across pyramid levels, field integration and spatial
//! transformer warping.
//!
//! Fields are `[N, 3, D, H, W]` tensors in voxel units with channel order
//! (depth, height, width). A zero field is the identity map. Sampling outside
//! the grid clamps to the nearest edge voxel.

use crate::data::LabelGrid;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// How a latent field is turned into a displacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldSemantics {
    /// The latent is used directly as a displacement.
    Displacement,
    /// The latent is a stationary velocity, exponentiated by scaling and squaring.
    Velocity,
}

impl FieldSemantics {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Displacement => "displacement",
            Self::Velocity => "velocity",
        }
    }
}

impl std::str::FromStr for FieldSemantics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "displacement" => Ok(Self::Displacement),
            "velocity" => Ok(Self::Velocity),
            other => Err(Error::Config(format!("unknown field semantics '{}'", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub semantics: FieldSemantics,
    /// Scaling-and-squaring steps for velocity fields.
    pub steps: usize,
    /// Multiply upsampled latents by their enlargement factor so that they
    /// stay in full-resolution voxel units.
    pub scale_by_resolution: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            semantics: FieldSemantics::Velocity,
            steps: 7,
            scale_by_resolution: true,
        }
    }
}

/// Enlarges every level latent to `full` resolution and sums them.
pub fn fuse_latents(
    tape: &mut Tape,
    levels: &[Var],
    full: [usize; 3],
    scale_by_resolution: bool,
) -> Result<Var> {
    let first = levels
        .first()
        .ok_or_else(|| Error::Argument("fuse_latents needs at least one level".into()))?;
    let [n0, c0, ..] = tape.value(*first).dims5()?;
    let mut acc: Option<Var> = None;
    for &lv in levels {
        let [n, c, d, h, w] = tape.value(lv).dims5()?;
        if (n, c) != (n0, c0) || c != 3 {
            return shape_err(format!(
                "latent level with batch/channels ({}, {}), expected ({}, 3)",
                n, c, n0
            ));
        }
        let factor = full[0] / d;
        if factor == 0 || [d, h, w].map(|e| e * factor) != full {
            return shape_err(format!(
                "latent extent {:?} is not an integer fraction of {:?}",
                [d, h, w],
                full
            ));
        }
        let up = tape.upsample_trilinear(lv, factor)?;
        let up = if scale_by_resolution && factor != 1 {
            tape.scale(up, factor as f64)?
        } else {
            up
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, up)?,
            None => up,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Scaling and squaring: `φ = v / 2^steps`, then `φ ← φ + φ∘(id + φ)` `steps` times.
pub fn integrate_velocity(tape: &mut Tape, velocity: Var, steps: usize) -> Result<Var> {
    if steps < 1 {
        return Err(Error::Argument("integration needs at least one step".into()));
    }
    let [_, c, ..] = tape.value(velocity).dims5()?;
    if c != 3 {
        return shape_err(format!("velocity field has {} channels, expected 3", c));
    }
    let mut phi = tape.scale(velocity, 0.5f64.powi(steps as i32))?;
    for _ in 0..steps {
        let moved = tape.warp_trilinear(phi, phi)?;
        phi = tape.add(phi, moved)?;
    }
    Ok(phi)
}

/// Latent field to displacement, per the configured semantics.
pub fn to_displacement(tape: &mut Tape, latent: Var, cfg: &FusionConfig) -> Result<Var> {
    match cfg.semantics {
        FieldSemantics::Displacement => Ok(latent),
        FieldSemantics::Velocity => integrate_velocity(tape, latent, cfg.steps),
    }
}

/// `out(p) = volume(p + φ(p))`, trilinear, differentiable in both arguments.
pub fn warp_trilinear(tape: &mut Tape, volume: Var, displacement: Var) -> Result<Var> {
    tape.warp_trilinear(volume, displacement)
}

/// Nearest-neighbour label warp; ties round half up on each axis.
pub fn warp_nearest(labels: &LabelGrid, displacement: &Tensor) -> Result<LabelGrid> {
    let [n, c, d, h, w] = displacement.dims5()?;
    if n != 1 || c != 3 || [d, h, w] != labels.dims {
        return shape_err(format!(
            "field {:?} does not match label grid {:?}",
            displacement.shape(),
            labels.dims
        ));
    }
    let vol = d * h * w;
    let f = displacement.data();
    let pick = |coord: f64, extent: usize| -> usize {
        ((coord + 0.5).floor()).clamp(0.0, (extent - 1) as f64) as usize
    };
    let data = (0..vol)
        .map(|p| {
            let (z, y, x) = (p / (h * w), (p / w) % h, p % w);
            let sz = pick(z as f64 + f[p], d);
            let sy = pick(y as f64 + f[vol + p], h);
            let sx = pick(x as f64 + f[2 * vol + p], w);
            labels.data[(sz * h + sy) * w + sx]
        })
        .collect();
    LabelGrid::new(labels.dims, data)
}

/// Value-level convenience: integrates (or passes through) a latent without
/// keeping a tape around.
pub fn displacement_from_latent(latent: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.constant(latent.clone())?;
    let phi = to_displacement(&mut tape, z, cfg)?;
    Ok(tape.value(phi).clone())
}

/// Value-level trilinear warp.
pub fn warp_values(volume: &Tensor, displacement: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(volume.clone())?;
    let f = tape.constant(displacement.clone())?;
    let out = tape.warp_trilinear(v, f)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    fn fuse_values(levels: &[Tensor], full: [usize; 3]) -> Tensor {
        let mut t = Tape::new();
        let vars: Vec<Var> = levels.iter().map(|l| t.constant(l.clone()).unwrap()).collect();
        let z = fuse_latents(&mut t, &vars, full, true).unwrap();
        t.value(z).clone()
    }

    #[test]
    fn fusion_identity_and_zero() {
        let a = random(&[1, 3, 4, 4, 4], 1, 1.0);
        assert_eq!(fuse_values(&[a.clone()], [4, 4, 4]).data(), a.data());
        let z = fuse_values(
            &[Tensor::zeros(&[1, 3, 8, 8, 8]), Tensor::zeros(&[1, 3, 4, 4, 4])],
            [8, 8, 8],
        );
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_of_constants_scales_coarse_level() {
        let (c1, c2) = (0.3, -0.45);
        let z = fuse_values(
            &[Tensor::full(&[1, 3, 8, 8, 8], c1), Tensor::full(&[1, 3, 4, 4, 4], c2)],
            [8, 8, 8],
        );
        let expected = c1 + 2.0 * c2;
        assert!(z.data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn fusion_is_linear() {
        let a = random(&[1, 3, 4, 4, 4], 2, 1.0);
        let b = random(&[1, 3, 2, 2, 2], 3, 1.0);
        let base = fuse_values(&[a.clone(), b.clone()], [4, 4, 4]);
        let s = |t: &Tensor| Tensor::from_fn(t.shape(), |i| 2.5 * t.data()[i]);
        let scaled = fuse_values(&[s(&a), s(&b)], [4, 4, 4]);
        for (x, y) in base.data().iter().zip(scaled.data()) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_rejects_bad_levels() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[1, 3, 3, 3, 3])).unwrap();
        assert!(fuse_latents(&mut t, &[a], [8, 8, 8], true).is_err());
        let b = t.constant(Tensor::zeros(&[1, 2, 4, 4, 4])).unwrap();
        assert!(fuse_latents(&mut t, &[b], [8, 8, 8], true).is_err());
        assert!(fuse_latents(&mut t, &[], [8, 8, 8], true).is_err());
    }

    #[test]
    fn zero_velocity_integrates_to_zero() {
        for steps in [1, 4, 7] {
            let cfg = FusionConfig { steps, ..Default::default() };
            let phi = displacement_from_latent(&Tensor::zeros(&[1, 3, 4, 5, 6]), &cfg).unwrap();
            assert!(phi.data().iter().all(|&v| v == 0.0));
        }
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(&[1, 3, 2, 2, 2])).unwrap();
        assert!(matches!(integrate_velocity(&mut t, v, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn constant_velocity_gives_constant_displacement() {
        let c = [0.7, -1.3, 0.25];
        let v = Tensor::from_fn(&[1, 3, 8, 8, 8], |i| c[i / 512]);
        let phi = displacement_from_latent(&v, &FusionConfig::default()).unwrap();
        // interior crop
        for a in 0..3 {
            for z in 2..6 {
                for y in 2..6 {
                    for x in 2..6 {
                        let got = phi.data()[a * 512 + (z * 8 + y) * 8 + x];
                        assert!((got - c[a]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    fn smooth_random_field(seed: u64, max: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 16 * 16 * 16;
        let mut data: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in data.chunks_mut(n) {
            crate::data::gaussian_smooth(c, [16, 16, 16], 1.5);
        }
        let m = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Tensor::new(vec![1, 3, 16, 16, 16], data.iter().map(|v| v * max / m).collect()).unwrap()
    }

    #[test]
    fn step_refinement_converges() {
        let rms = |a: &Tensor, b: &Tensor| {
            (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                / a.numel() as f64)
                .sqrt()
        };
        for seed in 0..3 {
            let v = smooth_random_field(seed, 0.5);
            let run = |steps| {
                displacement_from_latent(&v, &FusionConfig { steps, ..Default::default() })
                    .unwrap()
            };
            let (p4, p7, p10) = (run(4), run(7), run(10));
            let d7 = rms(&p7, &p10);
            assert!(d7 < 1e-4, "rms {}", d7);
            assert!(rms(&p4, &p10) > d7);
        }
    }

    #[test]
    fn warp_integer_shift_is_exact() {
        let x = random(&[1, 1, 6, 5, 4], 5, 1.0);
        let phi = Tensor::from_fn(&[1, 3, 6, 5, 4], |i| if i < 120 { 1.0 } else { 0.0 });
        let y = warp_values(&x, &phi).unwrap();
        for z in 0..5 {
            for p in 0..20 {
                assert_eq!(y.data()[z * 20 + p], x.data()[(z + 1) * 20 + p]);
            }
        }
        assert!(warp_values(&x, &Tensor::zeros(&[1, 3, 6, 5, 5])).is_err());
    }

    #[test]
    fn nearest_warp_identity_rounding_and_errors() {
        let labels = LabelGrid::new([2, 2, 4], (0..16).map(|i| i % 4).collect()).unwrap();
        let zero = Tensor::zeros(&[1, 3, 2, 2, 4]);
        assert_eq!(warp_nearest(&labels, &zero).unwrap(), labels);
        // +0.5 along width rounds up to the next voxel, -0.5 rounds to the voxel itself
        let half = Tensor::from_fn(&[1, 3, 2, 2, 4], |i| if i >= 32 { 0.5 } else { 0.0 });
        let out = warp_nearest(&labels, &half).unwrap();
        assert_eq!(&out.data[..4], &[1, 2, 3, 3]);
        let neg = Tensor::from_fn(&[1, 3, 2, 2, 4], |i| if i >= 32 { -0.5 } else { 0.0 });
        let out = warp_nearest(&labels, &neg).unwrap();
        assert_eq!(&out.data[..4], &[0, 1, 2, 3]);
        assert!(warp_nearest(&labels, &Tensor::zeros(&[1, 3, 2, 2, 3])).is_err());
    }

    #[test]
    fn nearest_warp_never_invents_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = LabelGrid::new([5, 5, 5], (0..125).map(|_| rng.random_range(0..3) * 7).collect()).unwrap();
        let set = labels.label_set();
        for seed in 0..100 {
            let phi = random(&[1, 3, 5, 5, 5], 100 + seed, 4.0);
            let out = warp_nearest(&labels, &phi).unwrap();
            assert!(out.label_set().iter().all(|l| set.contains(l)));
        }
    }

    #[test]
    fn trilinear_warp_envelope() {
        for seed in 0..100 {
            let x = random(&[1, 2, 4, 4, 4], seed, 3.0);
            let phi = random(&[1, 3, 4, 4, 4], 1000 + seed, 3.0);
            let y = warp_values(&x, &phi).unwrap();
            assert!(y.min() >= x.min() - 1e-12 && y.max() <= x.max() + 1e-12);
        }
    }

    #[test]
    fn integration_gradient_matches_finite_differences() {
        let v = Tensor::from_fn(&[1, 3, 4, 4, 4], |i| 0.3 * ((i as f64) * 0.37 + 0.5).sin());
        let weights = random(&[1, 3, 4, 4, 4], 7, 1.0);
        let f = move |t: &mut Tape, x: Var| {
            let w = t.constant(weights.clone())?;
            let phi = integrate_velocity(t, x, 3)?;
            let p = t.mul(phi, w)?;
            t.sum(p)
        };
        let r = finite_diff_check(f, &v, 1e-6, 1e-4, None).unwrap();
        assert!(r.passed, "{:?}", r);
    }
}
