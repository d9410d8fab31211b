//! Training loop, pair sets and Dice evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::io::load_volume;
use crate::data::{dice, foreground_labels, gen_synthetic_pair, SynthConfig, Volume};
use crate::encoder::{init_parameters, ModelParameters};
use crate::error::{Error, Result};
use crate::fusion_warp::warp_nearest;
use crate::loss_optim::{adam_step, AdamState};
use crate::model::{forward, infer, LossValues, Sampling};
use crate::tensor::{Tape, Tensor};

/// An ordered (unaligned, reference) pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    pub x: Volume,
    pub y: Volume,
}

/// Offset separating held-out generator seeds from training ones.
const EVAL_SEED_OFFSET: u64 = 1 << 32;

pub(crate) fn pair_seed(data_seed: u64, index: u64) -> u64 {
    data_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

fn synthetic_pairs(synth: &SynthConfig, count: usize, offset: u64, prefix: &str) -> Result<Vec<Pair>> {
    (0..count)
        .map(|k| {
            let cfg = SynthConfig {
                seed: pair_seed(synth.seed, offset + k as u64),
                ..synth.clone()
            };
            let p = gen_synthetic_pair(&cfg)?;
            Ok(Pair {
                name: format!("{}{:03}", prefix, k),
                x: p.unaligned,
                y: p.reference,
            })
        })
        .collect()
}

/// Every `pair_NNN_x.vxr` / `pair_NNN_y.vxr` couple in `dir`, by name.
pub fn load_pair_dir(dir: &Path) -> Result<Vec<Pair>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix("_x.vxr").map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no *_x.vxr volumes in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|n| {
            Ok(Pair {
                x: load_volume(dir.join(format!("{}_x.vxr", n)))?,
                y: load_volume(dir.join(format!("{}_y.vxr", n)))?,
                name: n,
            })
        })
        .collect()
}

pub fn training_pairs(cfg: &RunConfig) -> Result<Vec<Pair>> {
    match &cfg.data_dir {
        Some(dir) => load_pair_dir(dir),
        None => synthetic_pairs(&cfg.synth, cfg.pairs, 0, "pair_"),
    }
}

/// Held-out synthetic pairs drawn from seeds disjoint from the training ones.
pub fn evaluation_pairs(cfg: &RunConfig) -> Result<Vec<Pair>> {
    synthetic_pairs(&cfg.synth, cfg.eval_pairs, EVAL_SEED_OFFSET, "eval_")
}

/// Visiting order of the pairs in one epoch: a permutation keyed by `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Comma-separated header of the loss trace.
pub fn trace_header(levels: usize) -> String {
    let mut h = String::from("iteration,total,image");
    for l in 1..=levels {
        h.push_str(&format!(",level{}", l));
    }
    h
}

pub fn trace_row(iteration: u64, v: &LossValues) -> String {
    let mut row = format!("{},{},{}", iteration, v.total, v.image);
    for l in &v.levels {
        row.push_str(&format!(",{}", l));
    }
    row
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub params: ModelParameters,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed iterations.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_parameters(&cfg.model.encoder, cfg.seed)?;
        let adam = AdamState::new(&params);
        Ok(Self { cfg, params, adam, epoch: 0, iteration: 0 })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            cfg: ck.config,
            params: ck.params,
            adam: ck.adam,
            epoch: ck.epoch,
            iteration: ck.iteration,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// One optimizer step on one pair. Returns the loss before the update.
    pub fn step(&mut self, pair: &Pair) -> Result<LossValues> {
        let model = &self.cfg.model;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape)?;
        let x = tape.constant(pair.x.to_tensor())?;
        let y = tape.constant(pair.y.to_tensor())?;
        let sampling = Sampling {
            mode: self.cfg.train_sampling,
            seed: self.cfg.seed,
            iteration: self.iteration,
        };
        let diverged = Error::Diverged { iteration: self.iteration as usize + 1 };
        let fwd = match forward(&mut tape, &bound, x, y, model, sampling) {
            Err(Error::NumericState { .. }) => return Err(diverged),
            other => other?,
        };
        let values = LossValues::read(&tape, &fwd, model.encoder.levels)?;
        if !values.total.is_finite() {
            return Err(diverged);
        }
        match tape.backward(fwd.total) {
            Err(Error::NumericState { .. }) => return Err(diverged),
            other => other?,
        }
        self.params.zero_grad();
        self.params.accumulate_grads(&tape, &bound)?;
        let lr = self.cfg.optim.lr_at(self.epoch as usize, self.cfg.epochs);
        match adam_step(&mut self.params, &mut self.adam, &self.cfg.optim, lr) {
            Err(Error::NumericState { .. }) => return Err(diverged),
            other => other?,
        }
        self.params.zero_grad();
        self.iteration += 1;
        Ok(values)
    }

    /// Runs one epoch over `pairs` in the epoch's shuffled order.
    pub fn run_epoch(&mut self, pairs: &[Pair], mut on_step: impl FnMut(u64, &LossValues)) -> Result<()> {
        for i in epoch_order(self.cfg.seed, self.epoch, pairs.len()) {
            let v = self.step(&pairs[i])?;
            on_step(self.iteration, &v);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until `cfg.epochs` epochs are complete.
    pub fn run(&mut self, pairs: &[Pair], mut on_step: impl FnMut(u64, &LossValues)) -> Result<()> {
        while (self.epoch as usize) < self.cfg.epochs {
            self.run_epoch(pairs, &mut on_step)?;
        }
        Ok(())
    }
}

/// Dice before and after registering one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEval {
    pub name: String,
    pub labels: Vec<u32>,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

impl PairEval {
    pub fn mean_before(&self) -> f64 {
        mean(&self.before)
    }

    pub fn mean_after(&self) -> f64 {
        mean(&self.after)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Result of registering one pair.
#[derive(Clone, Debug)]
pub struct Registration {
    pub displacement: Tensor,
    pub warped: Volume,
}

pub fn register_pair(params: &ModelParameters, cfg: &RunConfig, x: &Volume, y: &Volume) -> Result<Registration> {
    if x.dims != y.dims {
        return Err(Error::Shape(format!("pair extents differ: {:?} vs {:?}", x.dims, y.dims)));
    }
    cfg.model.encoder.check_extent(x.dims)?;
    let sampling = Sampling {
        mode: cfg.inference_sampling,
        seed: cfg.seed,
        iteration: 0,
    };
    let (displacement, warped) = infer(params, &cfg.model, &x.to_tensor(), &y.to_tensor(), sampling)?;
    let mut out = Volume::from_tensor(&warped)?;
    out.spacing = x.spacing;
    if let Some(l) = &x.labels {
        out.labels = Some(warp_nearest(l, &displacement)?);
    }
    Ok(Registration { displacement, warped: out })
}

/// Per-label Dice of every labeled pair; unlabeled pairs come back as `Err` with the reason.
pub fn evaluate(
    params: &ModelParameters,
    cfg: &RunConfig,
    pairs: &[Pair],
) -> Result<Vec<std::result::Result<PairEval, String>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (Some(lx), Some(ly)) = (&p.x.labels, &p.y.labels) else {
            out.push(Err(format!("{}: missing labels", p.name)));
            continue;
        };
        let reg = register_pair(params, cfg, &p.x, &p.y)?;
        let warped = reg.warped.labels.as_ref().expect("labels carried");
        let labels = foreground_labels(lx, ly);
        out.push(Ok(PairEval {
            name: p.name.clone(),
            before: dice(lx, ly, &labels)?,
            after: dice(warped, ly, &labels)?,
            labels,
        }));
    }
    Ok(out)
}

/// Mean over pairs of the per-pair mean foreground Dice, `(before, after)`.
pub fn mean_dice(evals: &[std::result::Result<PairEval, String>]) -> (f64, f64) {
    let ok: Vec<&PairEval> = evals.iter().filter_map(|e| e.as_ref().ok()).collect();
    if ok.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = ok.len() as f64;
    (
        ok.iter().map(|e| e.mean_before()).sum::<f64>() / n,
        ok.iter().map(|e| e.mean_after()).sum::<f64>() / n,
    )
}
