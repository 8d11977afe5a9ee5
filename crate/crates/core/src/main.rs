use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grasp::pipeline::{summary_table, PipelineConfig, Run};
use grasp::Error;

#[derive(Parser)]
#[command(name = "grasp", version, about = "Group inference from gradient-space clustering, with group-DRO training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the dataset and write it with split tags and stats
    Generate(Common),
    /// Train the model whose gradients are clustered
    Erm(Common),
    /// Export per-sample gradients of the clustered splits
    Gradients(Common),
    /// Infer groups and outliers (gradient and feature space)
    Infer(Common),
    /// Train the ERM baseline and group-DRO models with grid selection
    Gdro(Common),
    /// Score every downstream model on worst-group and average accuracy
    Evaluate(Common),
    /// Run every stage in a fresh run directory and write the summary
    Pipeline(Common),
    /// Write the DBSCAN hyperparameter sweep table
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// TOML pipeline config
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Only report errors
    #[arg(long)]
    quiet: bool,
}

enum Failure {
    Validation(Error),
    Stage(Error),
}

fn load(common: &Common) -> Result<(PipelineConfig, PathBuf), Failure> {
    let mut cfg = PipelineConfig::load(&common.config).map_err(Failure::Validation)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn run(command: &Command, common: &Common) -> Result<(), Failure> {
    let (cfg, out) = load(common)?;
    let stage = Failure::Stage;
    if let Command::Pipeline(_) = command {
        let run = Run::in_new_dir(cfg, &out).map_err(stage)?;
        let summary = run.pipeline().map_err(stage)?;
        if !common.quiet {
            print!("{}", summary_table(&summary));
            println!("run directory: {}", run.dir().display());
        }
        return Ok(());
    }
    let run = Run::new(cfg, &out).map_err(stage)?;
    let ds = run.generate().map_err(stage)?;
    if let Command::Generate(_) = command {
        return Ok(());
    }
    let erm = run.erm(&ds).map_err(stage)?;
    match command {
        Command::Erm(_) => return Ok(()),
        Command::Gradients(_) => return run.gradients(&ds, &erm).map_err(stage),
        Command::Sweep(_) => return run.sweep(&ds, &erm).map(|_| ()).map_err(stage),
        _ => {}
    }
    let inf = run.infer(&ds, &erm).map_err(stage)?;
    if let Command::Infer(_) = command {
        return Ok(());
    }
    let down = run.gdro(&ds, &inf.grasp).map_err(stage)?;
    if let Command::Gdro(_) = command {
        return Ok(());
    }
    let ev = run.evaluate(&ds, &down).map_err(stage)?;
    if !common.quiet {
        print!("{}", grasp::pipeline::eval_table(&ev));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Generate(c)
        | Command::Erm(c)
        | Command::Gradients(c)
        | Command::Infer(c)
        | Command::Gdro(c)
        | Command::Evaluate(c)
        | Command::Pipeline(c)
        | Command::Sweep(c) => c,
    };
    let level = if common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli.command, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
