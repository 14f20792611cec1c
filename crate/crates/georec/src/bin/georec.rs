use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use georec::commands::{
    cmd_build_graph, cmd_evaluate, cmd_gen_synth, cmd_recommend, cmd_train, parse_region,
};
use georec::config::load_config;
use georec::error::Result;

/// Cross-region POI recommendation: graph building, meta-training with
/// cluster-alignment transfer, evaluation, and recommendation.
#[derive(Parser)]
#[command(name = "georec", version, about)]
struct Cli {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration value, e.g. `--set train.epochs=5`.
    /// Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic source/target regions with planted
    /// preference structure.
    GenSynth,
    /// Ingest raw check-in and social files, filter, split, and serialize
    /// both regions' mobility graphs.
    BuildGraph,
    /// Train the model in the configured mode, writing a JSONL log and
    /// checkpoints.
    Train {
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Rank held-out check-ins and report Precision@k / NDCG@k.
    Evaluate {
        /// Which region to evaluate.
        #[arg(long, default_value = "target")]
        region: String,
        /// Also score a train-popularity baseline under the same protocol.
        #[arg(long)]
        baseline: bool,
    },
    /// Print the top-k POIs for one user.
    Recommend {
        #[arg(long)]
        user: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "target")]
        region: String,
        /// Keep POIs the user already visited in the candidate set.
        #[arg(long)]
        include_visited: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.sets)?;
    match cli.command {
        Command::GenSynth => {
            let out = cmd_gen_synth(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out).unwrap());
        }
        Command::BuildGraph => {
            let (src, tgt) = cmd_build_graph(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&[src, tgt]).unwrap());
        }
        Command::Train { resume } => {
            let out = cmd_train(&cfg, resume.as_deref())?;
            println!(
                "{}",
                serde_json::json!({
                    "log": out.log_path,
                    "checkpoint": out.final_checkpoint,
                    "meta_epochs": out.meta_epochs_run,
                    "fine_tune_epochs": out.fine_tune_epochs_run,
                    "final_val_ndcg5": out.final_val_ndcg5,
                })
            );
        }
        Command::Evaluate { region, baseline } => {
            let bundle = cmd_evaluate(&cfg, parse_region(&region)?, baseline)?;
            println!("{}", serde_json::to_string_pretty(&bundle).unwrap());
        }
        Command::Recommend { user, k, region, include_visited } => {
            let recs = cmd_recommend(&cfg, parse_region(&region)?, &user, k, include_visited)?;
            println!("{}", serde_json::to_string_pretty(&recs).unwrap());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
