use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uamt::commands::{self, EvalOptions, REPORT_FILE};
use uamt::config::ExperimentConfig;
use uamt::metrics::format_table;
use uamt::train::Method;
use uamt::Result;

/// Uncertainty-aware mean teacher for semi-supervised 3D segmentation on synthetic phantoms.
#[derive(Parser)]
#[command(name = "uamt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides config and UAMT_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Phantom seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one method and write checkpoints plus a step log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// SUP_ONLY, MT, UA_MT_UN or UA_MT.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory whose final checkpoint is evaluated (and where metrics go).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Explicit checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write predicted masks and foreground probabilities.
        #[arg(long)]
        save_predictions: bool,
    },
    /// Tabulate mean test metrics across run directories.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: uamt::Error| e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    cfg.apply_env()?;
    if let Some(d) = &common.data {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(o) = out {
                cfg.data_dir = o;
            }
            if let Some(s) = seed {
                cfg.phantom.seed = s;
            }
            let m = commands::gen_data(&cfg)?;
            println!(
                "wrote {} labeled, {} unlabeled, {} test cases to {}",
                m.labeled.len(),
                m.unlabeled.len(),
                m.test.len(),
                cfg.data_dir.display()
            );
        }
        Command::Train {
            common,
            out,
            seed,
            method,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(m) = method {
                cfg.train.method = m;
            }
            let outcome = commands::train(&cfg)?;
            if let Some(last) = outcome.state.log.last() {
                println!(
                    "{} finished {} steps: loss_sup {:.4}, loss_cons {:.5}, sel_frac {:.3}",
                    cfg.train.method,
                    outcome.state.step,
                    last.loss_sup,
                    last.loss_cons,
                    last.sel_frac
                );
            }
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Eval {
            common,
            run,
            checkpoint,
            out,
            save_predictions,
        } => {
            let mut cfg = match (&common.config, &run) {
                (None, Some(r)) => {
                    let mut c = ExperimentConfig::load(Some(&r.join(uamt::config::RESOLVED_CONFIG)))?;
                    c.apply_env()?;
                    if let Some(d) = &common.data {
                        c.data_dir = d.clone();
                    }
                    c
                }
                _ => load_config(&common)?,
            };
            if let Some(r) = run {
                cfg.out_dir = r;
            }
            let rows = commands::eval(
                &cfg,
                &EvalOptions {
                    checkpoint,
                    out,
                    save_predictions,
                },
            )?;
            print!("{}", format_table(&rows));
        }
        Command::Report { runs, out } => {
            let rows = commands::report(&runs);
            if let Some(o) = out {
                std::fs::create_dir_all(&o).map_err(|e| uamt::Error::io(format!("creating {}", o.display()), e))?;
                commands::write_report_csv(&o.join(REPORT_FILE), &rows)?;
            }
            print!("{}", commands::format_report(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
