use std::path::PathBuf;
use std::process::ExitCode;

use adamole::gradcheck::gradient_suite;
use adamole_cli::{resolve, run_experiment, sweep, write_artifacts, write_sweep_csv, CliError, CliResult, ModeArg, Overrides};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adamole", version, about = "Train and inspect adaptive LoRA expert mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.json, loss.csv, activations.csv and checkpoint.bin.
    Run(ExperimentArgs),
    /// Compare every analytic backward pass against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Random instances per layer type.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Train one adamole model per tau_max and write sweep.csv.
    Sweep {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Comma-separated tau_max values.
        #[arg(long, value_delimiter = ',', required = true)]
        tau_max_list: Vec<f64>,
        /// Train the entries on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode,
            tau_max: self.tau_max,
            experts: self.experts,
            rank: self.rank,
            out: self.out.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// `blocks.1.q.experts.2.a` -> `experts.a`.
fn param_kind(name: &str) -> String {
    name.split('.')
        .filter(|seg| seg.parse::<usize>().is_err() && !matches!(*seg, "blocks" | "q" | "k" | "v" | "o"))
        .collect::<Vec<_>>()
        .join(".")
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Run(args) => {
            let cfg = resolve(args.config.as_deref(), &args.overrides())?;
            let out = run_experiment(&cfg)?;
            write_artifacts(&cfg, &out)?;
            let m = &out.metrics;
            println!(
                "val_acc {:.4}  final_loss {:.4}  avg_active {}  -> {}",
                m.val_accuracy,
                m.final_loss,
                m.avg_active_experts.map_or("-".to_string(), |a| format!("{a:.3}")),
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Gradcheck { seed, tolerance, seeds } => {
            let suite = gradient_suite(seed, seeds)?;
            for s in &suite.sections {
                let mut kinds: Vec<String> = Vec::new();
                for p in &s.report.params {
                    let k = param_kind(&p.name);
                    if !kinds.contains(&k) {
                        kinds.push(k);
                    }
                }
                println!(
                    "{:<28} {:>10.3e}  {:>3} tensors  [{}]",
                    s.name,
                    s.report.max_rel_error(),
                    s.report.params.len(),
                    kinds.join(", ")
                );
            }
            if let Some((section, w)) = suite.worst() {
                println!(
                    "worst: {section}/{}[{}] rel_err {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    w.name, w.worst_index, w.max_rel_error, w.analytic, w.numeric
                );
            }
            if suite.passes(tolerance) {
                println!("ok: every relative error <= {tolerance:e}");
                Ok(())
            } else {
                Err(CliError::CheckFailed(format!(
                    "max relative error {:.3e} exceeds {tolerance:e}",
                    suite.max_rel_error()
                )))
            }
        }
        Command::Sweep {
            experiment,
            tau_max_list,
            parallel,
        } => {
            let cfg = resolve(experiment.config.as_deref(), &experiment.overrides())?;
            let rows = sweep(&cfg, &tau_max_list, parallel)?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Io {
                path: cfg.output_dir.clone(),
                source: e,
            })?;
            let path = cfg.output_dir.join("sweep.csv");
            write_sweep_csv(&path, &rows)?;
            for r in &rows {
                println!("tau_max {:<10} val_acc {:.4}  avg_active {:.3}", r.tau_max, r.val_acc, r.avg_active_experts);
            }
            println!("-> {}", path.display());
            Ok(())
        }
    }
}
