use clap::Parser;

use atg::cli::{parse_config, run_experiment, CliError, RunArgs};

#[derive(Parser)]
#[command(name = "atg", version, about = "Adaptive two-grid finite element experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Run one experiment and write its convergence history.
    Run(RunArgs),
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => match parse_config(&args).and_then(|c| run_experiment(&c)) {
            Ok(code) => code,
            Err(err @ CliError::Io { .. }) => {
                eprintln!("atg: {err}");
                1
            }
            Err(err) => {
                eprintln!("atg: {err}");
                2
            }
        },
    };
    std::process::exit(code);
}
