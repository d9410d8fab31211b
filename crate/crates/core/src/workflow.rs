//! The train / register / eval / ablate / gen-data / check-grads workflows.
//!
//! Every machine-readable artifact starts with a `# config <sha256>` line.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{hex, RunConfig};
use crate::data::io::{load_volume, save_field, save_volume};
use crate::data::{dice, foreground_labels, gen_synthetic_pair, SynthConfig};
use crate::encoder::{ModelParameters, Variant};
use crate::error::{Error, Result};
use crate::gradsuite::{gradient_suite, GradCase};
use crate::par;
use crate::train::{
    epoch_order, evaluate, load_pair_dir, mean_dice, register_pair, trace_header, trace_row,
    training_pairs, Pair, PairEval, Registration, Trainer,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.vxc";
pub const TRACE_FILE: &str = "trace.csv";

fn hash_line(cfg: &RunConfig) -> String {
    format!("# config {}\n", cfg.hash_hex())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e)))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub iterations: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Trains from scratch, or resumes from `resume` after checking its configuration hash.
/// Writes `config.txt`, `trace.csv`, periodic `checkpoint_eNNNN.vxc` and the final `checkpoint.vxc`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    let pairs = training_pairs(cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_config(cfg)?;
            let mut t = Trainer::from_checkpoint(ck);
            t.cfg = cfg.clone();
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    write_file(&out.join("config.txt"), cfg.to_text())?;
    let trace_path = out.join(TRACE_FILE);
    let mut trace = if resume.is_some() && trace_path.exists() {
        fs::OpenOptions::new().append(true).open(&trace_path).map_err(|e| io_err(&trace_path, e))?
    } else {
        let mut f = fs::File::create(&trace_path).map_err(|e| io_err(&trace_path, e))?;
        writeln!(f, "{}{}", hash_line(cfg), trace_header(cfg.model.encoder.levels))?;
        f
    };

    let mut first = None;
    let mut last = None;
    let mut write_err = None;
    let result = par::with_threads(cfg.threads, || -> Result<()> {
        while (trainer.epoch as usize) < cfg.epochs {
            trainer.run_epoch(&pairs, |i, v| {
                first.get_or_insert(v.total);
                last = Some(v.total);
                if let Err(e) = writeln!(trace, "{}", trace_row(i, v)) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err.take() {
                return Err(e.into());
            }
            if cfg.checkpoint_every > 0 && (trainer.epoch as usize).is_multiple_of(cfg.checkpoint_every) {
                trainer
                    .checkpoint()
                    .save(out.join(format!("checkpoint_e{:04}.vxc", trainer.epoch)))?;
            }
        }
        Ok(())
    });
    trace.flush()?;
    result?;
    let ck_path = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&ck_path)?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        trace: trace_path,
        iterations: trainer.iteration,
        first_loss: first,
        last_loss: last,
    })
}

/// Loads a checkpoint, refusing it when `cfg` is given and its hash differs.
pub fn load_model(checkpoint: &Path, cfg: Option<&RunConfig>) -> Result<(RunConfig, ModelParameters)> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut run = ck.config.clone();
    if let Some(c) = cfg {
        ck.check_config(c)?;
        run = c.clone();
    }
    Ok((run, ck.params))
}

/// Registers `unaligned` to `reference`; writes `registered.vxr` (with warped
/// labels when the input has labels) and `displacement.vxf` into `out`.
pub fn cmd_register(
    checkpoint: &Path,
    cfg: Option<&RunConfig>,
    unaligned: &Path,
    reference: &Path,
    out: &Path,
) -> Result<Registration> {
    let (run, params) = load_model(checkpoint, cfg)?;
    let x = load_volume(unaligned)?;
    let y = load_volume(reference)?;
    let reg = par::with_threads(run.threads, || register_pair(&params, &run, &x, &y))?;
    create_dir(out)?;
    save_volume(&reg.warped, out.join("registered.vxr"))?;
    save_field(&reg.displacement, out.join("displacement.vxf"))?;
    Ok(reg)
}

/// Reads `x_path,y_path[,name]` lines; relative paths resolve against the list's directory.
pub fn load_pair_list(path: &Path) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(Error::Config(format!(
                "{} line {}: expected x_path,y_path[,name]",
                path.display(),
                i + 1
            )));
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
        };
        pairs.push(Pair {
            name: cols.get(2).map_or_else(|| format!("pair_{:03}", pairs.len()), |s| s.to_string()),
            x: load_volume(resolve(cols[0]))?,
            y: load_volume(resolve(cols[1]))?,
        });
    }
    Ok(pairs)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub evals: Vec<std::result::Result<PairEval, String>>,
    pub mean_before: f64,
    pub mean_after: f64,
    /// `pair,label,before,after`, one row per pair and foreground label.
    pub csv: String,
    pub summary: String,
}

/// Per-pair, per-label Dice before and after registration. Writes
/// `eval.csv`, `summary.txt` and each registered label map as `<pair>_registered.vxr`.
pub fn cmd_eval(params: &ModelParameters, cfg: &RunConfig, pairs: &[Pair], out: &Path) -> Result<EvalReport> {
    create_dir(out)?;
    let mut evals = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (Some(lx), Some(ly)) = (&p.x.labels, &p.y.labels) else {
            evals.push(Err(format!("{}: missing labels", p.name)));
            continue;
        };
        let reg = par::with_threads(cfg.threads, || register_pair(params, cfg, &p.x, &p.y))?;
        save_volume(&reg.warped, out.join(format!("{}_registered.vxr", p.name)))?;
        let warped = reg.warped.labels.as_ref().expect("labels carried");
        let labels = foreground_labels(lx, ly);
        evals.push(Ok(PairEval {
            name: p.name.clone(),
            before: dice(lx, ly, &labels)?,
            after: dice(warped, ly, &labels)?,
            labels,
        }));
    }
    let mut csv = hash_line(cfg);
    csv.push_str("pair,label,before,after\n");
    let mut summary = String::new();
    for e in &evals {
        match e {
            Ok(e) => {
                for ((l, b), a) in e.labels.iter().zip(&e.before).zip(&e.after) {
                    let _ = writeln!(csv, "{},{},{},{}", e.name, l, b, a);
                }
                let _ = writeln!(
                    summary,
                    "{}: mean Dice {:.4} -> {:.4}",
                    e.name,
                    e.mean_before(),
                    e.mean_after()
                );
            }
            Err(reason) => {
                let _ = writeln!(summary, "skipped {}", reason);
            }
        }
    }
    let (mean_before, mean_after) = mean_dice(&evals);
    let _ = writeln!(summary, "overall mean Dice {:.4} -> {:.4}", mean_before, mean_after);
    write_file(&out.join("eval.csv"), &csv)?;
    write_file(&out.join("summary.txt"), &summary)?;
    Ok(EvalReport {
        evals,
        mean_before,
        mean_after,
        csv,
        summary,
    })
}

/// SHA-256 over the pair volumes and every epoch's visiting order.
pub fn data_hash(cfg: &RunConfig, pairs: &[Pair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.name.as_bytes());
        for v in [&p.x, &p.y] {
            h.update(crate::data::io::encode_volume(v));
        }
    }
    for e in 0..cfg.epochs as u64 {
        for i in epoch_order(cfg.seed, e, pairs.len()) {
            h.update((i as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub data_hash: String,
    pub evals: Vec<std::result::Result<PairEval, String>>,
    pub mean_before: f64,
    pub mean_after: f64,
}

/// Mean over pairs of each label's Dice, `(before, after)`; pairs lacking a label are left out of its mean.
fn per_label_means(evals: &[std::result::Result<PairEval, String>]) -> Vec<(u32, f64, f64)> {
    let mut acc: std::collections::BTreeMap<u32, (f64, f64, usize)> = Default::default();
    for e in evals.iter().flatten() {
        for ((l, b), a) in e.labels.iter().zip(&e.before).zip(&e.after) {
            let s = acc.entry(*l).or_default();
            s.0 += b;
            s.1 += a;
            s.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(l, (b, a, n))| (l, b / n as f64, a / n as f64))
        .collect()
}

/// Trains each variant on identical data and seeds, evaluates on the training
/// pairs, and writes `ablation.csv` (`region,variant,before,after`) and `data_hashes.csv`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<VariantResult>> {
    create_dir(out)?;
    let pairs = training_pairs(cfg)?;
    let mut results = Vec::new();
    for variant in Variant::ALL {
        let vcfg = cfg.with_variant(variant);
        let dir = out.join(variant.as_str());
        cmd_train(&vcfg, &dir, None)?;
        let (_, params) = load_model(&dir.join(CHECKPOINT_FILE), Some(&vcfg))?;
        let evals = par::with_threads(vcfg.threads, || evaluate(&params, &vcfg, &pairs))?;
        let (mean_before, mean_after) = mean_dice(&evals);
        results.push(VariantResult {
            variant,
            data_hash: data_hash(&vcfg, &pairs),
            evals,
            mean_before,
            mean_after,
        });
    }
    let mut table = hash_line(cfg);
    table.push_str("region,variant,before,after\n");
    let labels: Vec<Vec<(u32, f64, f64)>> = results.iter().map(|r| per_label_means(&r.evals)).collect();
    for (i, &(label, ..)) in labels[0].iter().enumerate() {
        for (r, l) in results.iter().zip(&labels) {
            let (_, b, a) = l[i];
            let _ = writeln!(table, "{},{},{},{}", label, r.variant, b, a);
        }
    }
    for r in &results {
        let _ = writeln!(table, "mean,{},{},{}", r.variant, r.mean_before, r.mean_after);
    }
    write_file(&out.join("ablation.csv"), &table)?;
    let mut hashes = hash_line(cfg);
    hashes.push_str("variant,data_hash\n");
    for r in &results {
        let _ = writeln!(hashes, "{},{}", r.variant, r.data_hash);
    }
    write_file(&out.join("data_hashes.csv"), &hashes)?;
    Ok(results)
}

/// Writes the training pairs as `pair_NNN_{x,y}.vxr` plus `pair_NNN_gt.vxf`, and `pairs.csv`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut list = String::new();
    let mut written = Vec::new();
    for k in 0..cfg.pairs {
        let synth = SynthConfig {
            seed: crate::train::pair_seed(cfg.synth.seed, k as u64),
            ..cfg.synth.clone()
        };
        let p = gen_synthetic_pair(&synth)?;
        let stem = format!("pair_{:03}", k);
        let files = [
            out.join(format!("{}_x.vxr", stem)),
            out.join(format!("{}_y.vxr", stem)),
            out.join(format!("{}_gt.vxf", stem)),
        ];
        save_volume(&p.unaligned, &files[0])?;
        save_volume(&p.reference, &files[1])?;
        save_field(&p.ground_truth, &files[2])?;
        let _ = writeln!(list, "{}_x.vxr,{}_y.vxr,{}", stem, stem, stem);
        written.extend(files);
    }
    let list_path = out.join("pairs.csv");
    write_file(&list_path, &list)?;
    written.push(list_path);
    Ok(written)
}

/// Pairs for evaluation: an explicit list file, a pair directory, or the held-out synthetic set.
pub fn eval_pairs_from(cfg: &RunConfig, list: Option<&Path>, dir: Option<&Path>) -> Result<Vec<Pair>> {
    match (list, dir) {
        (Some(l), _) => load_pair_list(l),
        (None, Some(d)) => load_pair_dir(d),
        (None, None) => crate::train::evaluation_pairs(cfg),
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub cases: Vec<GradCase>,
    pub text: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed)
    }
}

pub fn cmd_check_grads(per_tensor: usize) -> Result<GradReport> {
    let cases = gradient_suite(per_tensor)?;
    let mut text = String::from("case,passed,max_rel_error,coords\n");
    for c in &cases {
        let _ = writeln!(
            text,
            "{},{},{:e},{}",
            c.name, c.report.passed, c.report.max_rel_error, c.report.coords_checked
        );
    }
    Ok(GradReport { cases, text })
}
