use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tactile_wipe::harness::{
    cmd_collect, cmd_control, cmd_eval, cmd_pca, cmd_recognize, cmd_train, ExperimentConfig, HarnessError, PbMode,
    CHECKPOINT_FILE, EPISODE_DIR,
};
use tactile_wipe::taskctl::TaskLossKind;

#[derive(Parser)]
#[command(name = "tactile-wipe", version, about = "Simulated tactile wiping: collect, train, recognize, control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; also where later commands look for episodes and the checkpoint.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Material for recognize and control.
    #[arg(long, global = true)]
    material: Option<String>,
    #[arg(long, global = true)]
    loss: Option<TaskLossKind>,
    /// correct, wrong:<material> or basic.
    #[arg(long, global = true)]
    pb: Option<PbMode>,
    /// Checkpoint to use instead of <out>/checkpoint.twck.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Episode directory to use instead of <out>/episodes.
    #[arg(long, global = true)]
    episodes: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Random-walk data collection on every configured material.
    Collect,
    /// Train the transition network and the material PBs.
    Train,
    /// Online PB recognition on one material.
    Recognize {
        /// Start from this material's trained PB instead of zero.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Closed-loop predictive control on the wiping path.
    Control {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Recompute metrics for every control log in the output directory.
    Eval,
    /// PCA of the trained PBs (and per-run fits when episodes exist).
    Pca,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.material {
        cfg.recognize.material = m.clone();
        cfg.control.material = m.clone();
    }
    if let Some(l) = cli.loss {
        cfg.control.loss = l;
    }
    if let Some(pb) = &cli.pb {
        cfg.control.pb = pb.clone();
    }
    let checkpoint = cli.checkpoint.clone().unwrap_or_else(|| cli.out.join(CHECKPOINT_FILE));
    let episodes = cli.episodes.clone().unwrap_or_else(|| cli.out.join(EPISODE_DIR));
    let rec = match cli.command {
        Command::Collect => cmd_collect(&cfg, &cli.out)?,
        Command::Train => cmd_train(&cfg, &episodes, &cli.out)?,
        Command::Recognize { init, steps } => {
            if init.is_some() {
                cfg.recognize.init = init;
            }
            if let Some(s) = steps {
                cfg.recognize.steps = s;
            }
            cmd_recognize(&cfg, &checkpoint, &cli.out)?.0
        }
        Command::Control { steps } => {
            if let Some(s) = steps {
                cfg.control.steps = s;
            }
            cmd_control(&cfg, Some(&checkpoint), &cli.out)?.0
        }
        Command::Eval => cmd_eval(&cfg, &cli.out)?.0,
        Command::Pca => {
            let eps = episodes.is_dir().then_some(episodes.as_path());
            cmd_pca(&cfg, &checkpoint, eps, &cli.out)?.0
        }
    };
    report(&rec.summary.to_string(), &rec.outputs);
    Ok(())
}

/// Prints the summary; a closed stdout (e.g. piped into `head`) is not an error.
fn report(summary: &str, outputs: &[String]) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{summary}").and_then(|_| outputs.iter().try_for_each(|o| writeln!(out, "wrote {o}")));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
