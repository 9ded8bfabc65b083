//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure (NaN loss, failed gradient check).

mod commands;
mod exit;

use clap::{Parser, Subcommand};

use exit::{CliError, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "vitae",
    about = "Train, pretrain and inspect ViTAE/ViTAEv2 vision transformers",
    version
)]
struct Cli {
    /// Worker threads for internal parallelism (overridden by VITAE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Pin all reductions to a single-threaded order.
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training on MNIST, CIFAR-10 or the built-in synthetic set.
    Train(commands::TrainArgs),
    /// Masked-image-modeling pretraining (75% token masking by default).
    PretrainMim(commands::PretrainArgs),
    /// Zero-pad 1x1 pretraining PCM kernels to 3x3 in a checkpoint.
    Inflate(commands::InflateArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(commands::EvalArgs),
    /// Model accounting report against the published budgets.
    Inspect(commands::InspectArgs),
    /// Mean attention distance per layer, in pixels.
    AttnDist(commands::AttnDistArgs),
    /// Finite-difference verification of backward rules.
    Gradcheck(commands::GradcheckArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success; usage errors
            // go to stderr with exit 1
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let threads = if cli.deterministic {
        1
    } else {
        std::env::var("VITAE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .or(cli.threads)
            .unwrap_or(0)
    };
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::PretrainMim(args) => commands::pretrain(args),
        Command::Inflate(args) => commands::inflate(args),
        Command::Eval(args) => commands::eval(args),
        Command::Inspect(args) => commands::inspect(args),
        Command::AttnDist(args) => commands::attn_dist(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            std::process::exit(code);
        }
    }
}
