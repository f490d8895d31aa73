use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use saft_cli::commands::{self, render_comparison, render_ranking};
use saft_cli::{CliError, ExperimentConfig, Overrides, TrainMode};

#[derive(Parser)]
#[command(name = "saft", version, about = "Layer noise sensitivity and sensitivity-aware finetuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of most sensitive layers to train; overrides `k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Saft,
    Clean,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer std report (report.csv) and plot (plot.svg).
    Sensitivity {
        #[command(flatten)]
        common: Common,
        /// Print the ranking with a knee-point suggestion for k.
        #[arg(long)]
        suggest_k: bool,
    },
    /// Train one pipeline; writes result.json, metrics.jsonl and model.saft.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Untrained vs noise-injection vs SAFT on every configured noise variant.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Brute-force per-layer accuracy drops and their agreement with std and KL.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.apply(&Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        k: common.k,
    })?;
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("SAFT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("SAFT_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Sensitivity { common, suggest_k } => {
            let cfg = load(&common)?;
            let out = commands::cmd_sensitivity(&cfg)?;
            if suggest_k {
                print!("{}", render_ranking(&out.report, out.suggested_k));
            }
            println!("wrote {}", out.csv_path.display());
            println!("wrote {}", out.plot_path.display());
        }
        Command::Train { common, mode } => {
            let cfg = load(&common)?;
            let mode = match mode {
                Mode::Full => TrainMode::Full,
                Mode::Saft => TrainMode::Saft,
                Mode::Clean => TrainMode::Clean,
            };
            let out = commands::cmd_train(&cfg, mode)?;
            println!(
                "{}: clean accuracy {:.2}%, noisy accuracy {:.2}%, {} ms",
                mode.name(),
                out.result.final_accuracy_clean * 100.0,
                out.result.final_accuracy_noisy * 100.0,
                out.result.wall_time_ms + out.sensitivity_ms
            );
            println!("wrote {}", out.result_path.display());
        }
        Command::Compare { common } => {
            let cfg = load(&common)?;
            let out = commands::cmd_compare(&cfg)?;
            print!("{}", render_comparison(out.clean_accuracy, &out.rows));
            println!("wrote {}", out.csv_path.display());
        }
        Command::Oracle { common } => {
            let cfg = load(&common)?;
            let out = commands::cmd_oracle(&cfg)?;
            let rho = |r: Option<f64>| r.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            println!("spearman rho std vs oracle: {}", rho(out.rho_std));
            println!("spearman rho kl vs oracle:  {}", rho(out.rho_kl));
            println!(
                "oracle top layer: {} (in std top-{}: {})",
                out.oracle_top.as_deref().unwrap_or("n/a"),
                commands::AGREEMENT_TOP_N,
                out.top_in_std_top_n
            );
            println!("wrote {}", out.csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
