use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shiftadapt::harness::commands::{self, AblationKind, BenchOutcome};
use shiftadapt::harness::config::RunConfig;

#[derive(Parser)]
#[command(name = "shiftadapt", version, about = "Test-time adaptation benchmark under covariate and label shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides as `--dotted.key value` or `--dotted.key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> shiftadapt::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train backbone and head on the long-tailed source split.
    Pretrain(Common),
    /// Train the label-conditioned adapter against saved models.
    TrainAdapter(Common),
    /// Run every method on every target distribution and seed.
    Bench {
        /// Run the component-mask ablation instead of the method list.
        #[arg(long)]
        components: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run one ablation sweep: components, tau or oracle.
    Ablate {
        kind: AblationKind,
        #[command(flatten)]
        common: Common,
    },
    /// Print the resolved configuration.
    Config(Common),
}

fn print_bench(out: &BenchOutcome) -> ExitCode {
    print!("{}", out.table());
    println!("{}", out.cost);
    for f in &out.failures {
        eprintln!("aborted {} [{}] {} seed {}: {}", f.method, f.variant, f.column, f.seed, f.error);
    }
    if out.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> shiftadapt::Result<ExitCode> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = c.resolve()?;
            for r in commands::cmd_pretrain(&cfg)? {
                println!(
                    "seed {}: {} steps, final loss {:.4}, probe accuracy {:.4}, tail recall {:.4}",
                    r.seed, r.steps, r.final_epoch_loss, r.probe.accuracy, r.probe.tail_recall
                );
            }
        }
        Command::TrainAdapter(c) => {
            let cfg = c.resolve()?;
            for r in commands::cmd_train_adapter(&cfg)? {
                let [a, b, c] = r.train.final_loss;
                println!(
                    "seed {}: {} params, final loss source {a:.4} uniform {b:.4} inverse {c:.4}",
                    r.seed, r.num_params
                );
            }
        }
        Command::Bench { components, common } => {
            let cfg = common.resolve()?;
            let out = if components {
                commands::cmd_ablate(&cfg, AblationKind::Components)?
            } else {
                commands::cmd_bench(&cfg)?
            };
            return Ok(print_bench(&out));
        }
        Command::Ablate { kind, common } => {
            let cfg = common.resolve()?;
            return Ok(print_bench(&commands::cmd_ablate(&cfg, kind)?));
        }
        Command::Config(c) => print!("{}", c.resolve()?.render()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
