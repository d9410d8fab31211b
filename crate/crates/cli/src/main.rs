//! `pmreg`: train, apply and evaluate the registration network.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pmreg::checkpoint::Checkpoint;
use pmreg::config::RunConfig;
use pmreg::encoder::Variant;
use pmreg::workflow;

#[derive(Parser, Debug)]
#[command(name = "pmreg", version, about = "Unsupervised 3-D deformable registration")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, value_name = "MODE")]
    mode: Option<Variant>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Train on the configured pairs; writes a trace and checkpoints.
    Train {
        /// Continue from this checkpoint (its config hash must match).
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Register one volume to another with a trained model.
    Register {
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
        unaligned: PathBuf,
        reference: PathBuf,
    },
    /// Dice before and after registration for labeled pairs.
    Eval {
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
        /// File of `x_path,y_path[,name]` lines.
        #[arg(long, value_name = "PATH", conflicts_with = "data_dir")]
        pairs: Option<PathBuf>,
        /// Directory of `*_x.vxr` / `*_y.vxr` pairs.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Train and compare the full model and both baselines.
    Ablate,
    /// Write the synthetic training pairs to disk.
    GenData,
    /// Finite-difference checks of every op and of the full objective.
    CheckGrads {
        #[arg(long, value_name = "N", default_value_t = 8)]
        per_tensor: usize,
    },
}

impl Global {
    fn base_config(&self) -> Result<Option<RunConfig>> {
        self.config
            .as_deref()
            .map(|p| RunConfig::load(p).with_context(|| format!("loading {}", p.display())))
            .transpose()
    }

    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg = cfg.with_variant(m);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.threads = self.threads;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config file (or defaults) with the command-line overrides.
    fn run_config(&self) -> Result<RunConfig> {
        self.apply(self.base_config()?.unwrap_or_default())
    }

    /// The checkpoint's own config unless a file is given, with overrides applied.
    fn model_config(&self, checkpoint: &Path) -> Result<RunConfig> {
        let base = match self.base_config()? {
            Some(c) => c,
            None => {
                Checkpoint::load(checkpoint)
                    .with_context(|| format!("loading {}", checkpoint.display()))?
                    .config
            }
        };
        self.apply(base)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match cli.verb {
        Verb::Train { resume } => {
            let cfg = g.run_config()?;
            let t = workflow::cmd_train(&cfg, &cfg.out, resume.as_deref())?;
            println!("config {}", cfg.hash_hex());
            println!("iterations {}", t.iterations);
            if let (Some(a), Some(b)) = (t.first_loss, t.last_loss) {
                println!("loss {} -> {}", a, b);
            }
            println!("checkpoint {}", t.checkpoint.display());
            println!("trace {}", t.trace.display());
        }
        Verb::Register { checkpoint, unaligned, reference } => {
            let cfg = g.model_config(&checkpoint)?;
            workflow::cmd_register(&checkpoint, Some(&cfg), &unaligned, &reference, &cfg.out)?;
            println!("wrote {}", cfg.out.join("registered.vxr").display());
            println!("wrote {}", cfg.out.join("displacement.vxf").display());
        }
        Verb::Eval { checkpoint, pairs, data_dir } => {
            let cfg = g.model_config(&checkpoint)?;
            let (cfg, params) = workflow::load_model(&checkpoint, Some(&cfg))?;
            let list = workflow::eval_pairs_from(&cfg, pairs.as_deref(), data_dir.as_deref())?;
            let report = workflow::cmd_eval(&params, &cfg, &list, &cfg.out)?;
            print!("{}", report.summary);
        }
        Verb::Ablate => {
            let cfg = g.run_config()?;
            let results = workflow::cmd_ablate(&cfg, &cfg.out)?;
            println!("variant,before,after,data_hash");
            for r in &results {
                println!("{},{:.4},{:.4},{}", r.variant, r.mean_before, r.mean_after, r.data_hash);
            }
            println!("table {}", cfg.out.join("ablation.csv").display());
        }
        Verb::GenData => {
            let cfg = g.run_config()?;
            let files = workflow::cmd_gen_data(&cfg, &cfg.out)?;
            println!("wrote {} files to {}", files.len(), cfg.out.display());
        }
        Verb::CheckGrads { per_tensor } => {
            if per_tensor == 0 {
                bail!("--per-tensor must be at least 1");
            }
            let report = workflow::cmd_check_grads(per_tensor)?;
            print!("{}", report.text);
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
