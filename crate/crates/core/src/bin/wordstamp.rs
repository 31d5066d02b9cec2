use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wordstamp::experiment::{
    cmd_evaluate, cmd_gen_data, cmd_inspect_embeddings, cmd_train, render_evaluation, render_matrix, run_matrix,
    ExperimentSpec,
};
use wordstamp::{Error, Result};

#[derive(Parser)]
#[command(name = "wordstamp", about = "Synthetic word-timestamp recognition experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test manifests and print timestamp histogram summaries.
    GenData(SpecArgs),
    /// Train a model on the spec's training manifest.
    Train(SpecArgs),
    /// Evaluate a checkpoint on the spec's test corpora.
    Evaluate(SpecArgs),
    /// Dump timestamp embedding similarities and summary statistics.
    InspectEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the similarity and target matrices.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate data, then train and evaluate the four ablation rows.
    RunMatrix {
        #[command(flatten)]
        spec: SpecArgs,
        /// Train the rows concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct SpecArgs {
    /// TOML experiment spec; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to evaluate; defaults to the one in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    w_reg: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, value_enum)]
    length_aug: Option<Switch>,
}

impl SpecArgs {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(out) = &self.out {
            spec.out_dir = out.clone();
        }
        if let Some(w) = self.w_reg {
            spec.train.w_reg = w;
        }
        if let Some(p) = self.p {
            spec.train.p = p;
        }
        if let Some(s) = self.length_aug {
            spec.train.length_aug = matches!(s, Switch::On);
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let spec = args.resolve()?;
            let summary = cmd_gen_data(&spec)?;
            print!("{}", summary.render());
        }
        Command::Train(args) => {
            let spec = args.resolve()?;
            let out = cmd_train(&spec)?;
            println!(
                "checkpoint {} (final ce {:.4}, reg {:.4}), log {}",
                out.checkpoint.display(),
                out.final_ce,
                out.final_reg,
                out.log.display()
            );
        }
        Command::Evaluate(args) => {
            let spec = args.resolve()?;
            let checkpoint = args.checkpoint.clone().unwrap_or_else(|| spec.checkpoint_path());
            let outcome = cmd_evaluate(&spec, &checkpoint)?;
            print!("{}", render_evaluation(&outcome));
        }
        Command::InspectEmbeddings { checkpoint, out } => {
            let s = cmd_inspect_embeddings(&checkpoint, out.as_deref())?;
            println!(
                "N {} sigma {} MSE(S,G) {:.6} mean row correlation {:.6}",
                s.n, s.sigma, s.mse, s.mean_row_correlation
            );
        }
        Command::RunMatrix { spec, parallel } => {
            if spec.checkpoint.is_some() {
                return Err(Error::Usage("run-matrix trains its own checkpoints".into()));
            }
            let spec = spec.resolve()?;
            let rows = run_matrix(&spec, parallel)?;
            print!("{}", render_matrix(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
