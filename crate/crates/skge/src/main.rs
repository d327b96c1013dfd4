use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skge::commands::{self, BenchArgs, EvalArgs, GenArgs, ScoreArgs, TrainArgs};
use skge::Result;

#[derive(Parser)]
#[command(name = "skge", version, about = "Skip-stage window attention driving model tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Train and write the best-validation checkpoint
    Train(TrainArgs),
    /// Task metrics of a checkpoint on a dataset
    Eval(EvalArgs),
    /// Route completion, infraction penalty and driving score of drive logs
    Score(ScoreArgs),
    /// Single-sample inference throughput and peak memory
    Bench(BenchArgs),
    /// Print or write the default configuration
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.cmd {
        Cmd::Gen(a) => commands::cmd_gen(&a, &mut out),
        Cmd::Train(a) => commands::cmd_train(&a, &mut out).map(drop),
        Cmd::Eval(a) => commands::cmd_eval(&a, &mut out).map(drop),
        Cmd::Score(a) => commands::cmd_score(&a, &mut out).map(drop),
        Cmd::Bench(a) => commands::cmd_bench(&a, &mut out).map(drop),
        Cmd::Config { out: path } => commands::cmd_config(path.as_deref(), &mut out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
