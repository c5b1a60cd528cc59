use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cinefuse_cli::commands::{self, Context};
use cinefuse_cli::config::RunConfig;
use cinefuse_cli::CliError;

#[derive(Parser)]
#[command(
    name = "cinefuse",
    version,
    about = "Scene and act segmentation of long videos"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic movie manifests.
    Synth(Common),
    /// Train the scene boundary model.
    TrainScene(Common),
    /// Train the act model with shot/synopsis synchronization.
    TrainAct(Common),
    /// Export shot/synopsis assignments.
    Sync(Common),
    /// Score a checkpoint (or an untrained model with --task).
    Eval(Common),
    /// Finite-difference check of the training objectives on a tiny model.
    Gradcheck(Common),
    /// Per-modality importance of a checkpoint's predictions.
    Importance(Common),
}

#[derive(Args)]
struct Common {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/<command>-<timestamp>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides applied after the config file, e.g. --set scene_train.epochs=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory of movie manifests; synthesized from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task of an untrained model for `eval`: scene or act.
    #[arg(long)]
    task: Option<String>,
    /// Shorthand for --set movies=N.
    #[arg(long)]
    movies: Option<usize>,
    /// Shorthand for --set synth.shots=N.
    #[arg(long)]
    shots: Option<usize>,
}

fn run(
    name: &str,
    c: Common,
    f: fn(&Context) -> Result<serde_json::Value, CliError>,
) -> Result<(), CliError> {
    let mut set = Vec::new();
    if let Some(n) = c.movies {
        set.push(format!("movies={n}"));
    }
    if let Some(n) = c.shots {
        set.push(format!("synth.shots={n}"));
    }
    set.extend(c.set);
    let cfg = RunConfig::resolve(c.config.as_deref(), &set, c.seed)?;
    let out = c.out.unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{name}-{}",
            chrono::Local::now().format("%Y%m%d-%H%M%S")
        ))
    });
    let ctx = Context {
        cfg,
        out,
        data: c.data,
        checkpoint: c.checkpoint,
        task: c.task,
    };
    let summary = f(&ctx)?;
    println!("{}", serde_json::to_string(&summary).expect("serializable"));
    eprintln!("outputs in {}", ctx.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(c) => run("synth", c, commands::synth),
        Command::TrainScene(c) => run("train-scene", c, commands::train_scene_cmd),
        Command::TrainAct(c) => run("train-act", c, commands::train_act_cmd),
        Command::Sync(c) => run("sync", c, commands::sync_cmd),
        Command::Eval(c) => run("eval", c, commands::eval_cmd),
        Command::Gradcheck(c) => run("gradcheck", c, commands::gradcheck_cmd),
        Command::Importance(c) => run("importance", c, commands::importance_cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
