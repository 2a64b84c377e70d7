//! Command-line front end for the iassl engine.
//!
//! Exit codes: 0 success, 2 config or usage error, 3 run halted by the oracle
//! budget (partial outputs are still written), 1 anything else.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use commands::report::ReportFormat;
use config::RunConfig;
use error::{exit, CliError, Result};
use iassl_core::eval::ApVariant;

#[derive(Debug, Parser)]
#[command(name = "iassl", version, about = "Incremental active semi-supervised learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset as JSON.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// A `.json` file, or a directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a phase checkpoint written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the config's sweep grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the grid's seed list with this one seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a saved model, or detection and truth dumps.
    Eval {
        #[arg(long, required_unless_present = "detections")]
        config: Option<PathBuf>,
        #[arg(long, requires = "config", conflicts_with = "detections")]
        model: Option<PathBuf>,
        #[arg(long, requires = "truths")]
        detections: Option<PathBuf>,
        #[arg(long, requires = "detections")]
        truths: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate the runs found under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

const DEFAULT_OUT: &str = "out";

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let config = RunConfig::load(path)?;
    Ok(match seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn out_dir(out: Option<PathBuf>, config: Option<&RunConfig>) -> PathBuf {
    out.or_else(|| config.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Runs a parsed command and returns the process exit code.
pub fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let config = load(&config, seed)?;
            let path = commands::generate::cmd_generate(&config, &out_dir(out, Some(&config)))?;
            println!("{}", path.display());
            Ok(exit::OK)
        }
        Command::Run {
            config,
            out,
            seed,
            resume,
        } => {
            let config = load(&config, seed)?;
            let out = out_dir(out, Some(&config));
            let run = commands::run::cmd_run(&config, &out, resume.as_deref())?;
            let s = &run.summary;
            println!(
                "{} status={:?} val_map={:.4} inspections={} corrections={} -> {}",
                run.config_hash,
                s.status,
                s.final_val_map,
                s.inspections,
                s.corrections,
                out.display()
            );
            if run.halted() {
                eprintln!("oracle budget exhausted; partial outputs written");
                return Ok(exit::HALTED);
            }
            Ok(exit::OK)
        }
        Command::Sweep { config, out, seed } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(s) = seed {
                config.sweep.seeds = vec![s];
            }
            let out = out_dir(out, Some(&config));
            let (path, rows) = commands::sweep::cmd_sweep(&config, &out)?;
            println!("{} rows -> {}", rows.len(), path.display());
            Ok(exit::OK)
        }
        Command::Eval {
            config,
            model,
            detections,
            truths,
            out,
        } => {
            let config = config.map(|c| RunConfig::load(&c)).transpose()?;
            let report = match (detections, truths, model) {
                (Some(d), Some(t), _) => {
                    let (variant, iou) = config
                        .as_ref()
                        .map_or((ApVariant::ElevenPoint, iassl_core::eval::DEFAULT_IOU_THRESH), |c| {
                            (c.eval.variant, c.eval.iou_thresh)
                        });
                    commands::eval::eval_dumps(&d, &t, variant, iou)?
                }
                (_, _, Some(m)) => commands::eval::eval_model(config.as_ref().expect("clap requires --config"), &m)?,
                _ => return Err(CliError::config("eval needs --config with --model, or --detections with --truths")),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = out {
                commands::eval::write_report(&out, &report)?;
            }
            Ok(exit::OK)
        }
        Command::Report { runs, format, out } => {
            let format = match format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            };
            let out = out.unwrap_or_else(|| runs.clone());
            let (report, written) = commands::report::cmd_report(&runs, &out, format)?;
            let flagged = report.runs.iter().filter(|r| r.flag.is_some()).count();
            println!(
                "{} runs ({} flagged), {} groups, {} files -> {}",
                report.runs.len(),
                flagged,
                report.aggregates.len(),
                written.len(),
                out.display()
            );
            for r in report.runs.iter().filter(|r| r.flag.is_some()) {
                eprintln!("flagged {}: {}", r.dir.display(), r.flag.as_deref().unwrap_or_default());
            }
            Ok(exit::OK)
        }
    }
}

/// Parses `args` and runs the command, reporting errors on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
