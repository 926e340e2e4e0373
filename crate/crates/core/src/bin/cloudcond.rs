use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cloudcond::config::RunConfig;
use cloudcond::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "cloudcond", version, about = "Point-cloud injection into a pretrained diffusion action expert")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing stage output.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the stage-A and stage-B demonstration sets.
    GenData,
    /// Pretrain the expert on stage-A demos.
    TrainExpert,
    /// Skip-block sweeps and injection-site selection.
    SkipAnalysis,
    /// Fine-tune the injected arm and the 2D-only ablation.
    TrainInjector,
    /// Evaluate arms on the multitask, height and decoy probes.
    Eval {
        /// Arms to evaluate; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        /// Evaluate best-loss checkpoints (watermarks the report).
        #[arg(long)]
        best_checkpoint: bool,
    },
    /// Write the markdown summary and figure CSVs.
    Report,
    /// Every stage in order.
    RunAll,
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    if let Command::Eval { arms, best_checkpoint } = &cli.command {
        if !arms.is_empty() {
            cfg.eval.arms = arms.clone();
        }
        cfg.eval.best_checkpoint |= best_checkpoint;
    }
    cfg.validate()?;
    let mut log = |m: &str| eprintln!("{m}");
    let force = cli.force;
    match cli.command {
        Command::GenData => {
            pipeline::gen_data(&cfg, force, &mut log)?;
        }
        Command::TrainExpert => {
            pipeline::train_expert(&cfg, force, &mut log)?;
        }
        Command::SkipAnalysis => {
            let (report, plan) = pipeline::skip_analysis(&cfg, force, &mut log)?;
            print!("{}", report.summary());
            println!("injection blocks {:?}", plan?.block_ids);
        }
        Command::TrainInjector => {
            pipeline::train_injector(&cfg, force, &mut log)?;
        }
        Command::Eval { .. } => {
            let r = pipeline::eval(&cfg, force, &mut log)?;
            print!("{}", r.summary(&cfg.eval.arms, &pipeline::probe_names(&cfg)));
        }
        Command::Report => {
            print!("{}", pipeline::report(&cfg, force)?);
        }
        Command::RunAll => {
            let r = pipeline::run_all(&cfg, force, &mut log)?;
            print!("{}", r.summary(&cfg.eval.arms, &pipeline::probe_names(&cfg)));
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
