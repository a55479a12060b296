//! `mrcontrast`: ingest metadata, build contrast labels, train the dual
//! encoder and evaluate retrieval from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mrcontrast::loss::LossKind;
use mrcontrast::pipeline::commands::{read_checkpoint, CHECKPOINT_FILE};
use mrcontrast::pipeline::{
    cmd_build_labels, cmd_eval, cmd_ingest, cmd_synth, cmd_train, label_config, EvalCommand,
    PipelineError, RunConfig, TrainOptions,
};
use mrcontrast::synth::SynthConfig;

#[derive(Parser)]
#[command(
    name = "mrcontrast",
    version,
    about = "Contrast-aware MR metadata retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse DICOM files and JSON-lines manifests into a dataset file.
    Ingest {
        /// Files or directories (searched recursively).
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Count unparseable inputs instead of failing.
        #[arg(long)]
        skip_bad: bool,
    },
    /// Generate a synthetic dataset from the built-in protocol list.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        scans: usize,
        #[arg(long, default_value_t = 5)]
        slices_per_scan: usize,
        /// Protocol lattice as TExTR cells.
        #[arg(long, default_value = "5x5")]
        cells: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a label space from a dataset.
    BuildLabels {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grouping: Grouping,
    },
    /// Train on the dataset's training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Continue from a checkpoint (the run configuration is taken from it).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        /// Checkpoint file, or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Gallery prompts keep only numerical fields.
        #[arg(long)]
        numerical_only: bool,
        /// Coarser grid label space to evaluate under.
        #[arg(long)]
        transfer: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Report::Table)]
        report: Report,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default run configuration as JSON.
    Config,
}

#[derive(Args)]
struct Grouping {
    /// TE×TR grid, e.g. 20x20.
    #[arg(long, conflicts_with = "kmeans")]
    grid: Option<String>,
    /// Cluster count for k-means grouping.
    #[arg(long)]
    kmeans: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop categorical fields from the label key.
    #[arg(long)]
    numerical_only: bool,
}

#[derive(Args)]
struct RunFlags {
    /// JSON run configuration; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Supcon,
    Infonce,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Report {
    Json,
    Table,
}

fn parse_cells(s: &str) -> Result<(u32, u32), PipelineError> {
    let bad = || PipelineError::Usage(format!("expected TExTR cells such as 5x5, got {s:?}"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

fn run_config(flags: &RunFlags) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.loss {
        cfg.loss = match v {
            LossArg::Supcon => LossKind::SupCon,
            LossArg::Infonce => LossKind::InfoNce,
        };
    }
    if let Some(v) = flags.shards {
        cfg.shards = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.optimizer.lr = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Ingest {
            paths,
            out,
            skip_bad,
        } => {
            let summary = cmd_ingest(&paths, &out, skip_bad)?;
            println!(
                "{}",
                serde_json::to_string(&summary).expect("summary serializes")
            );
        }
        Command::Synth {
            out,
            scans,
            slices_per_scan,
            cells,
            seed,
        } => {
            let config = SynthConfig {
                scans,
                slices_per_scan,
                seed,
                ..SynthConfig::default()
            };
            let slices = cmd_synth(&out, &config, parse_cells(&cells)?)?;
            println!("wrote {} slices to {}", slices.len(), out.display());
        }
        Command::BuildLabels {
            dataset,
            out,
            grouping,
        } => {
            let cfg = label_config(
                grouping.grid.as_deref(),
                grouping.kmeans,
                grouping.seed,
                grouping.numerical_only,
            )?;
            let space = cmd_build_labels(&dataset, &cfg, &out)?;
            println!("{} labels written to {}", space.len(), out.display());
        }
        Command::Train {
            dataset,
            labels,
            out,
            run,
            resume,
            stop_after_epoch,
        } => {
            let (config, resume) = match resume {
                Some(p) => {
                    let ckpt = read_checkpoint(&checkpoint_path(&p))?;
                    (ckpt.config.clone(), Some(ckpt))
                }
                None => (run_config(&run)?, None),
            };
            let outcome = cmd_train(
                &dataset,
                &labels,
                &config,
                &out,
                TrainOptions {
                    resume,
                    stop_after_epoch,
                },
            )?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "epoch {} step {} loss {:.4} tau {:.4}",
                    outcome.checkpoint.epochs_completed, last.step, last.loss, last.tau
                );
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            labels,
            numerical_only,
            transfer,
            report,
            out,
        } => {
            let r = cmd_eval(
                &checkpoint_path(&checkpoint),
                &dataset,
                &labels,
                &EvalCommand {
                    numerical_only,
                    transfer,
                },
            )?;
            if let Some(path) = out {
                std::fs::write(&path, r.to_json())
                    .map_err(|source| PipelineError::Io { path, source })?;
            }
            match report {
                Report::Json => println!("{}", r.to_json()),
                Report::Table => print!("{}", r.render_table()),
            }
        }
        Command::Config => {
            println!(
                "{}",
                serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
