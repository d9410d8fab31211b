//! Volumes, label grids, synthetic registration pairs, Dice evaluation and
//! the on-disk container formats.

mod dice;
pub mod io;
mod synth;

pub use dice::{dice, foreground_labels, mean_foreground_dice};
pub use synth::{gaussian_smooth, gen_synthetic_pair, SynthConfig, SyntheticPair};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Integer segmentation on a `[D, H, W]` grid (z-major storage).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub dims: [usize; 3],
    pub data: Vec<u32>,
}

impl LabelGrid {
    pub fn new(dims: [usize; 3], data: Vec<u32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return shape_err(format!(
                "label grid {:?} needs {} values, got {}",
                dims,
                dims.iter().product::<usize>(),
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<u32> {
        let mut v = self.data.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub intensities: Vec<f64>,
    pub labels: Option<LabelGrid>,
    /// Informational only.
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(dims: [usize; 3], intensities: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != intensities.len() {
            return shape_err(format!(
                "volume {:?} needs {} intensities, got {}",
                dims,
                dims.iter().product::<usize>(),
                intensities.len()
            ));
        }
        Ok(Self {
            dims,
            intensities,
            labels: None,
            spacing: [1.0; 3],
        })
    }

    pub fn with_labels(mut self, labels: LabelGrid) -> Result<Self> {
        if labels.dims != self.dims {
            return shape_err(format!(
                "labels {:?} do not match volume {:?}",
                labels.dims, self.dims
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// `[1, 1, D, H, W]` tensor of the intensities.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![1, 1, d, h, w], self.intensities.clone()).expect("dims checked")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, d, h, w] = t.dims5()?;
        if n != 1 || c != 1 {
            return shape_err(format!("expected a [1,1,D,H,W] tensor, got {:?}", t.shape()));
        }
        Self::new([d, h, w], t.data().to_vec())
    }
}

/// Whitening (zero mean, unit variance) followed by min-max rescaling to
/// `[0, 1]`. Constant volumes map to all zeros.
pub fn normalize(v: &Volume) -> Volume {
    let n = v.intensities.len().max(1) as f64;
    let mean = v.intensities.iter().sum::<f64>() / n;
    let var = v.intensities.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let mut out = v.clone();
    if std == 0.0 || !std.is_finite() {
        out.intensities.iter_mut().for_each(|x| *x = 0.0);
        return out;
    }
    out.intensities.iter_mut().for_each(|x| *x = (*x - mean) / std);
    let lo = out.intensities.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.intensities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range == 0.0 {
        out.intensities.iter_mut().for_each(|x| *x = 0.0);
    } else {
        out.intensities.iter_mut().for_each(|x| *x = (*x - lo) / range);
    }
    out
}
