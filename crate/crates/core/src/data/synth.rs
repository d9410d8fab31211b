use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{normalize, LabelGrid, Volume};
use crate::error::{Error, Result};
use crate::fusion_warp::{warp_nearest, warp_values};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub extent: [usize; 3],
    /// Number of ellipsoidal structures.
    pub structures: usize,
    /// Labels per structure (concentric shells).
    pub nested: usize,
    /// Maximum displacement magnitude in voxels.
    pub amplitude: f64,
    /// Standard deviation (voxels) of the Gaussian used to smooth the noise field.
    pub smoothness: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            extent: [32, 32, 32],
            structures: 3,
            nested: 2,
            amplitude: 2.0,
            smoothness: 4.0,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

/// A registration pair with its ground-truth deformation.
///
/// `unaligned(p) = reference(p + ground_truth(p))`.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub unaligned: Volume,
    pub reference: Volume,
    pub ground_truth: Tensor,
}

/// Separable Gaussian smoothing of one `[D, H, W]` grid, clamp-to-edge.
pub fn gaussian_smooth(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let [d, h, w] = dims;
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for start in 0..d * h * w {
            // visit each line once, from its first element
            if (start / stride) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|i| data[start + i * stride]));
            for i in 0..len {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let src = (i as isize + j as isize - radius).clamp(0, len as isize - 1);
                    acc += kv * line[src as usize];
                }
                data[start + i * stride] = acc;
            }
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn base_volume(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, LabelGrid)> {
    let [d, h, w] = cfg.extent;
    let smallest = d.min(h).min(w) as f64;
    let margin = (smallest * 0.15).max(2.0);
    let (rmin, rmax) = (smallest * 0.14, smallest * 0.25);
    if smallest - 2.0 * (margin + rmax) < 0.0 || rmin < 1.0 {
        return Err(Error::Generation(format!(
            "extent {:?} too small for ellipsoidal structures",
            cfg.extent
        )));
    }
    let nested = cfg.nested.max(1);
    let shapes: Vec<Ellipsoid> = (0..cfg.structures)
        .map(|_| {
            let radii = [0; 3].map(|_| rng.random_range(rmin..rmax));
            let center = [0, 1, 2].map(|a| {
                let e = cfg.extent[a] as f64;
                rng.random_range(margin + radii[a]..=e - 1.0 - margin - radii[a])
            });
            Ellipsoid { center, radii }
        })
        .collect();
    let shell_intensity: Vec<Vec<f64>> = (0..cfg.structures)
        .map(|_| {
            let mut v: f64 = rng.random_range(0.55..1.0);
            (0..nested)
                .map(|k| {
                    if k > 0 {
                        v = if v > 0.6 { v - rng.random_range(0.25..0.4) } else { v + 0.3 };
                    }
                    v
                })
                .collect()
        })
        .collect();
    let gradients: Vec<[f64; 3]> = (0..=cfg.structures)
        .map(|_| [0; 3].map(|_| rng.random_range(-0.1..0.1)))
        .collect();

    let n = d * h * w;
    let mut intensity = vec![0.0; n];
    let mut labels = vec![0u32; n];
    for (i, (iv, lv)) in intensity.iter_mut().zip(labels.iter_mut()).enumerate() {
        let p = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
        let rel = |g: &[f64; 3], c: [f64; 3]| -> f64 {
            (0..3).map(|a| g[a] * (p[a] - c[a]) / smallest).sum()
        };
        let mid = [d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0];
        *iv = 0.1 + rel(&gradients[cfg.structures], mid);
        for (s, e) in shapes.iter().enumerate() {
            let r = e.level(p);
            for k in 0..nested {
                let scale = 1.0 - 0.5 * k as f64 / nested as f64;
                if r <= scale {
                    *lv = (s * nested + k + 1) as u32;
                    *iv = shell_intensity[s][k] + rel(&gradients[s], e.center);
                }
            }
        }
    }
    Ok((intensity, LabelGrid::new(cfg.extent, labels)?))
}

/// Minimum distance (voxels) from any foreground voxel to the grid boundary.
fn foreground_margin(labels: &LabelGrid) -> f64 {
    let [d, h, w] = labels.dims;
    labels
        .data
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(i, _)| {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            [z, d - 1 - z, y, h - 1 - y, x, w - 1 - x].into_iter().min().unwrap()
        })
        .min()
        .unwrap_or(usize::MAX) as f64
}

fn random_displacement(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let [d, h, w] = cfg.extent;
    if cfg.amplitude == 0.0 {
        return Tensor::zeros(&[1, 3, d, h, w]);
    }
    // smooth on a padded grid and crop, so the field statistics do not
    // depend on the distance to the boundary
    let pad = (3.0 * cfg.smoothness).ceil() as usize;
    let big = [d + 2 * pad, h + 2 * pad, w + 2 * pad];
    let big_n: usize = big.iter().product();
    let n = d * h * w;
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let mut comp: Vec<f64> = (0..big_n).map(|_| rng.sample(StandardNormal)).collect();
        gaussian_smooth(&mut comp, big, cfg.smoothness);
        for z in 0..d {
            for y in 0..h {
                let row = ((z + pad) * big[1] + y + pad) * big[2] + pad;
                data.extend_from_slice(&comp[row..row + w]);
            }
        }
    }
    let max_norm = (0..n)
        .map(|p| (data[p].powi(2) + data[n + p].powi(2) + data[2 * n + p].powi(2)).sqrt())
        .fold(0.0, f64::max);
    let s = cfg.amplitude / max_norm;
    data.iter_mut().for_each(|v| *v *= s);
    Tensor::new(vec![1, 3, d, h, w], data).expect("sized above")
}

/// Builds a reference volume of nested ellipsoids, draws a smooth random
/// deformation and warps the reference into the unaligned volume.
pub fn gen_synthetic_pair(cfg: &SynthConfig) -> Result<SyntheticPair> {
    if cfg.amplitude < 0.0 || !cfg.amplitude.is_finite() {
        return Err(Error::Config(format!("amplitude {} must be >= 0", cfg.amplitude)));
    }
    if cfg.smoothness <= 0.0 {
        return Err(Error::Config(format!("smoothness {} must be > 0", cfg.smoothness)));
    }
    if cfg.noise_std < 0.0 {
        return Err(Error::Config(format!("noise std {} must be >= 0", cfg.noise_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut base, labels) = base_volume(cfg, &mut rng)?;
    let margin = foreground_margin(&labels);
    if cfg.amplitude >= margin {
        return Err(Error::Generation(format!(
            "amplitude {} voxels can push foreground (margin {} voxels) off the grid",
            cfg.amplitude, margin
        )));
    }
    if cfg.noise_std > 0.0 {
        for v in &mut base {
            *v += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let gt = random_displacement(cfg, &mut rng);
    let reference = Volume::new(cfg.extent, base)?.with_labels(labels.clone())?;
    let moved = warp_values(&reference.to_tensor(), &gt)?;
    let unaligned = Volume::from_tensor(&moved)?.with_labels(warp_nearest(&labels, &gt)?)?;
    Ok(SyntheticPair {
        unaligned: normalize(&unaligned),
        reference: normalize(&reference),
        ground_truth: gt,
    })
}
