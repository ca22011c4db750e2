use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vartune::workbench::{run_stage, selfcheck, RunConfig};
use vartune::Error;

#[derive(Parser)]
#[command(
    name = "vartune",
    version,
    about = "Desk-scale next-scale image modeling and subject tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configuration's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the multi-scale tokenizer on the synthetic corpus.
    PretrainTokenizer(StageArgs),
    /// Pretrain the next-scale transformer.
    PretrainVar(StageArgs),
    /// Tune a pretrained model on the subject images.
    Finetune(StageArgs),
    /// Generate images with classifier-free guidance.
    Sample(StageArgs),
    /// Relative weight change per block and role.
    AnalyzeWeights(StageArgs),
    /// Reconstruction error when fine scales come from a noise image.
    AnalyzeScales(StageArgs),
    /// Subject fidelity, diversity and prior preservation.
    Evaluate(StageArgs),
    /// Gradient and invariant checks on small random models.
    Selfcheck,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) | Error::Contract(_) | Error::Vocab(_) => EXIT_CONFIG,
        Error::Diverged(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

fn run(stage: &str, args: StageArgs) -> Result<(), Error> {
    let mut config = RunConfig::from_file(&args.config)?;
    if config.name() != stage {
        return Err(Error::Config(format!(
            "{}: configuration is for `{}`, not `{stage}`",
            args.config.display(),
            config.name()
        )));
    }
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    if let Some(out) = args.out {
        config.set_out(out);
    }
    let report = run_stage(&config)?;
    for path in report.artifacts {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Selfcheck => {
            return match selfcheck() {
                Ok(checks) => {
                    let mut ok = true;
                    for c in &checks {
                        let tag = if c.passed { "ok" } else { "FAILED" };
                        println!("{tag:6} {} {}", c.name, c.detail);
                        ok &= c.passed;
                    }
                    if ok {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_FAILURE)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code(&e))
                }
            };
        }
        Command::PretrainTokenizer(a) => ("pretrain-tokenizer", a),
        Command::PretrainVar(a) => ("pretrain-var", a),
        Command::Finetune(a) => ("finetune", a),
        Command::Sample(a) => ("sample", a),
        Command::AnalyzeWeights(a) => ("analyze-weights", a),
        Command::AnalyzeScales(a) => ("analyze-scales", a),
        Command::Evaluate(a) => ("evaluate", a),
    };
    match run(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
