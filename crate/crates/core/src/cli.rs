//! Command-line surface. Exit codes: 0 success, 2 usage or configuration
//! error, 1 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::intervene::{apply_intervention, InterventionSpec};
use crate::metrics::{evaluate_model, write_latents};
use crate::parallel::Exec;
use crate::synthdata::{self, generate};
use crate::trainer::{run_training, Checkpoint, EpochRecord, ExperimentConfig, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "flexcausal", version, about = "Causal disentanglement with flow priors")]
struct Cli {
    /// Run every kernel on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, history.csv and a run manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Compute MIC, TIC, WD and R² of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a directional intervention to the first `count` records.
    Intervene {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long, allow_hyphen_values = true)]
        tau: f64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match dispatch(cli.command, exec) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command, exec: Exec) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => gen_data(&config, &out, exec),
        Command::Train {
            config,
            out,
            resume,
            quiet,
        } => train(&config, &out, resume.as_deref(), quiet, exec),
        Command::Eval { checkpoint, data, out } => eval(&checkpoint, &data, &out, exec),
        Command::Intervene {
            checkpoint,
            data,
            concept,
            tau,
            count,
            out,
        } => intervene(&checkpoint, &data, &concept, tau, count, &out, exec),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn gen_data(config: &Path, out: &Path, exec: Exec) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = generate(&cfg.data, exec)?;
    ensure_parent(out)?;
    synthdata::save(&data, out)?;
    println!(
        "wrote {} records to {} (manifest {})",
        data.len(),
        out.display(),
        synthdata::manifest_path(out).display()
    );
    Ok(())
}

fn train(config: &Path, out: &Path, resume: Option<&Path>, quiet: bool, exec: Exec) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = synthdata::load(&cfg.dataset)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let epochs = cfg.schedule.epochs;
    let log = move |r: &EpochRecord| {
        if !quiet {
            eprintln!(
                "epoch {:>4}/{epochs} total {:.6} recon {:.6} kl {:.4} sup {:.6} cons {:.6} hsic {:.6} lr {:.3e}",
                r.epoch + 1,
                r.total,
                r.recon,
                r.kl,
                r.sup,
                r.cons,
                r.hsic,
                r.lr
            );
        }
    };
    let opts = TrainOptions {
        exec,
        resume,
        on_epoch: Some(Box::new(log)),
        ..Default::default()
    };
    let paths = run_training(&cfg, &data, out, opts)?;
    println!("final checkpoint {}", paths.final_checkpoint.display());
    println!("best checkpoint {}", paths.best_checkpoint.display());
    println!("history {}", paths.history.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: &Path, exec: Exec) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let data = synthdata::load(data)?;
    let (report, enc) = evaluate_model(&model, &data, exec)?;
    ensure_parent(out)?;
    report.write_csv(out)?;
    let latents = out.with_extension("latents.jsonl");
    write_latents(&enc, &latents)?;
    println!(
        "mean MIC {:.4} TIC {:.4} WD {:.4} R2 {:.4}",
        report.mean_mic, report.mean_tic, report.mean_wd, report.mean_r2
    );
    println!("report {} latents {}", out.display(), latents.display());
    Ok(())
}

#[derive(Serialize)]
struct InterventionRow<'a> {
    z: &'a [f64],
    z_tilde: &'a [f64],
    z_hat: &'a [f64],
    readouts: &'a [f64],
}

fn intervene(
    checkpoint: &Path,
    data: &Path,
    concept: &str,
    tau: f64,
    count: usize,
    out: &Path,
    exec: Exec,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let target = model.graph.index_of(concept)?;
    let data = synthdata::load(data)?;
    data.label_columns(model.graph.names())?;
    if count == 0 || count > data.len() {
        return Err(Error::Config(format!(
            "--count must be in 1..={}, got {count}",
            data.len()
        )));
    }
    let rows: Vec<usize> = (0..count).collect();
    let x = data.observations().select_rows(&rows);
    let z = model.latent_blocks(model.encode_means(&x, exec)?)?;
    let mech = model.scm.bind(&model.store);
    let spec = InterventionSpec { target, tau };
    let z_tilde = apply_intervention(&z, spec, &ck.tracker, &mech, &model.graph)?;
    let x_cf = model.decode_values(z_tilde.tensor(), exec)?;
    let z_hat = model.encode_means(&x_cf, exec)?;
    let readouts = model.readouts(&z_hat)?;

    ensure_parent(out)?;
    let mut text = String::new();
    for r in 0..count {
        let row = InterventionRow {
            z: z.tensor().row_slice(r),
            z_tilde: z_tilde.tensor().row_slice(r),
            z_hat: z_hat.row_slice(r),
            readouts: readouts.row_slice(r),
        };
        text.push_str(&serde_json::to_string(&row).map_err(|e| Error::json(out, e))?);
        text.push('\n');
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
    println!("wrote {count} counterfactuals for do({concept} += {tau} v) to {}", out.display());
    Ok(())
}
