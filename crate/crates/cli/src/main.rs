use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use idiomkit_cli::commands::layout;
use idiomkit_cli::{compare_runs, exit_code, resolve, run_command, run_pipeline, Command, Overrides};
use idiomkit_core::{Error, Result};

#[derive(Parser)]
#[command(name = "idiomkit", version, about = "Train and evaluate idiom embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed for noising, training, adapter init and probes.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment variant (base, iti, iti+si, iti+sf, iti+sf+copy, iti+sf+si, full-finetune).
    #[arg(long)]
    variant: Option<String>,
    /// Output root; the run lives in `<out>/<tag>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { set: self.set.clone(), seed: self.seed, variant: self.variant.clone(), out: self.out.clone() }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Load corpus, dictionary and groups; learn the tokenizer.
    Ingest(Common),
    /// Render definition template sentences.
    Templates(Common),
    /// Train the adapter.
    TrainAdapter(Common),
    /// Build the expression and definition embedding banks.
    BuildBank {
        #[command(flatten)]
        common: Common,
        /// Which split the expression bank is drawn from (test, train, all).
        #[arg(long)]
        split: Option<String>,
        /// Definition encoder: backbone, or external for precomputed vectors.
        #[arg(long)]
        encoder: Option<String>,
        /// Also copy the expression bank to this path.
        #[arg(long)]
        bank_out: Option<PathBuf>,
    },
    /// Cluster the banks against the meaning groups.
    EvalIntrinsic(Common),
    /// Train the disambiguation and span probes.
    TrainProbe(Common),
    /// Score the probes on the test split.
    EvalProbe(Common),
    /// Categorize span detection errors.
    ErrorAnalysis(Common),
    /// Write the markdown and JSON report.
    Report(Common),
    /// Run every stage in order.
    Pipeline(Common),
    /// Normalize and tabulate several finished runs.
    Compare {
        /// Run directories; one must be a base run.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write comparison.{md,json}.
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
}

fn dispatch(cmd: Cmd) -> Result<()> {
    let (common, stage) = match cmd {
        Cmd::Compare { runs, out } => {
            let cmp = compare_runs(&runs, &out)?;
            print!("{}", cmp.to_markdown());
            return Ok(());
        }
        Cmd::Pipeline(c) => {
            let cfg = resolve(c.config.as_deref(), &c.overrides())?;
            let dir = cfg.run_dir();
            let m = run_pipeline(cfg)?;
            println!("{}: {} artifacts", dir.display(), m.artifacts.len());
            return Ok(());
        }
        Cmd::Ingest(c) => (c, Command::Ingest),
        Cmd::Templates(c) => (c, Command::Templates),
        Cmd::TrainAdapter(c) => (c, Command::TrainAdapter),
        Cmd::BuildBank { mut common, split, encoder, bank_out } => {
            if let Some(s) = split {
                common.set.push(format!("bank.source={s}"));
            }
            if let Some(e) = encoder {
                let e = if e == "external" { "precomputed".to_string() } else { e };
                common.set.push(format!("bank.definition_encoder={e}"));
            }
            let cfg = resolve(common.config.as_deref(), &common.overrides())?;
            let dir = cfg.run_dir();
            run_command(Command::BuildBank, cfg)?;
            if let Some(dest) = bank_out {
                std::fs::copy(dir.join(layout::IE_BANK), &dest)
                    .map_err(|e| Error::io(&dest, e))?;
            }
            println!("{}: done ({})", Command::BuildBank, dir.display());
            return Ok(());
        }
        Cmd::EvalIntrinsic(c) => (c, Command::EvalIntrinsic),
        Cmd::TrainProbe(c) => (c, Command::TrainProbe),
        Cmd::EvalProbe(c) => (c, Command::EvalProbe),
        Cmd::ErrorAnalysis(c) => (c, Command::ErrorAnalysis),
        Cmd::Report(c) => (c, Command::Report),
    };
    let cfg = resolve(common.config.as_deref(), &common.overrides())?;
    let dir = cfg.run_dir();
    run_command(stage, cfg)?;
    println!("{stage}: done ({})", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
