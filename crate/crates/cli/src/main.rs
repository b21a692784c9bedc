use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use semisup_cli::exec::Cache;
use semisup_cli::export::{Format, View};
use semisup_cli::{RunArgs, SweepArgs};

#[derive(Parser)]
#[command(name = "semisup", version = semisup_cli::build_id(), about = "Semi-supervised pretraining, fine-tuning and distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `finetune.label_fraction=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and run one chained experiment.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to runs/<config hash>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the plan and print it without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run a grid of experiments.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Built-in grid (size, memory, head, distill) or a sweep file.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        /// Seeds, replacing the sweep's own list.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Collect run summaries below a directory into one table.
    Export {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        #[arg(long, value_enum, default_value_t = ViewArg::Runs)]
        view: ViewArg,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable primitive and loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write a synthetic train/test pair.
    Gen {
        /// `blobs:<classes>:<h>x<w>x<c>:<ntrain>/<ntest>:<seed>`
        #[arg(long, default_value = semisup_cli::config::DEFAULT_DATA)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Runs,
    Correlation,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            cfg,
            out,
            seed,
            dry_run,
        } => {
            let args = RunArgs {
                config: cfg.config.as_deref(),
                set: &cfg.set,
                seed,
                out: out.as_deref(),
                quiet: cfg.quiet,
            };
            if dry_run {
                let (prep, dir) = semisup_cli::prepare_run(&args)?;
                print!("{}", prep.config.to_toml());
                println!("# plan valid; would write to {}", dir.display());
            } else {
                let (row, _) = semisup_cli::cmd_run(&args)?;
                println!("{}", serde_json::to_string_pretty(&row)?);
            }
        }
        Command::Sweep {
            cfg,
            grid,
            out,
            seed,
            jobs,
        } => {
            let rows = semisup_cli::cmd_sweep(
                &SweepArgs {
                    config: cfg.config.as_deref(),
                    set: &cfg.set,
                    grid: &grid,
                    seeds: seed,
                    out: &out,
                    jobs,
                    quiet: cfg.quiet,
                },
                &Cache::default(),
            )?;
            println!(
                "{} runs written to {}",
                rows.len(),
                out.join(semisup_cli::sweep::RESULTS_FILE).display()
            );
        }
        Command::Export { dir, format, view, out } => {
            let format = match format {
                FormatArg::Csv => Format::Csv,
                FormatArg::Json => Format::Json,
            };
            let view = match view {
                ViewArg::Runs => View::Runs,
                ViewArg::Correlation => View::Correlation,
            };
            let (text, partial) = semisup_cli::cmd_export(&dir, view, format)?;
            for r in &partial {
                eprintln!("warning: partial export: run `{}` is missing {}", r.run, r.missing);
            }
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::GradCheck { instances, seed } => {
            let results = semisup_cli::cmd_grad_check(instances, seed)?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{:<5} {:<18} rel_err {:.2e} (tol {:.0e}, {} instances)",
                    if r.passed { "ok" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.tol,
                    r.instances
                );
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(semisup::Error::Domain {
                    op: "grad-check",
                    detail: format!("{failed} of {} checks failed", results.len()),
                }
                .into());
            }
        }
        Command::Dataset {
            command: DatasetCommand::Gen { spec, out },
        } => {
            for p in semisup_cli::cmd_dataset_gen(&spec, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<semisup::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
