//! `advmal`: train, attack, and evaluate Bayesian adversarially-hardened
//! feature-vector malware classifiers from the command line.

use clap::{Parser, Subcommand};

use advmal::cli;

#[derive(Parser)]
#[command(
    name = "advmal",
    about = "Bayesian adversarial training for binary feature-vector classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class feature dataset.
    GenSynth(cli::GenSynthArgs),
    /// Train an SVGD particle ensemble, optionally adversarially hardened.
    Train(cli::TrainArgs),
    /// Generate feature-space adversarial examples against a checkpoint.
    Attack(cli::AttackArgs),
    /// ROC/AUC and robustness sweeps for a checkpoint.
    Eval(cli::EvalArgs),
    /// Empirical vs adversarial risk and the gap bound check.
    Riskgap(cli::RiskgapArgs),
    /// Toy problem-space padding experiment and subset check.
    Lemma1(cli::Lemma1Args),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenSynth(args) => cli::cmd_gen_synth(args),
        Command::Train(args) => cli::cmd_train(args),
        Command::Attack(args) => cli::cmd_attack(args),
        Command::Eval(args) => cli::cmd_eval(args),
        Command::Riskgap(args) => cli::cmd_riskgap(args),
        Command::Lemma1(args) => cli::cmd_lemma1(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
