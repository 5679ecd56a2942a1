use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "whitebox", version, about = "White-box transformer toolkit: data, training, diagnostics and checks")]
struct Cli {
    /// Worker threads for per-sample parallelism; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file for the subcommand.
    #[arg(long, alias = "spec")]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum VariantArg {
    Default,
    ExactGrad,
    MmProx,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AttentionArg {
    Tied,
    TrainableW,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset or convert IDX images into one.
    GenData(Common),
    /// Train a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum)]
        attention: Option<AttentionArg>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval(Common),
    /// Layer-wise compression, sparsity, coherence and token exports.
    Diagnose(Common),
    /// Compare mixture denoisers across noise levels.
    DenoiseDemo(Common),
    /// Finite-difference checks of every tape primitive and model gradient.
    Gradcheck(Common),
    /// Summarize the tensors stored in a checkpoint.
    ExportCheckpointInfo(Common),
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::validation(anyhow::anyhow!("--threads must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::runtime(e.into()))?;
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train {
            common,
            variant,
            attention,
        } => commands::train(&common, variant, attention),
        Command::Eval(c) => commands::eval(&c),
        Command::Diagnose(c) => commands::diagnose(&c),
        Command::DenoiseDemo(c) => commands::denoise_demo(&c),
        Command::Gradcheck(c) => commands::gradcheck(&c),
        Command::ExportCheckpointInfo(c) => commands::export_checkpoint_info(&c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
