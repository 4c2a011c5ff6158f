use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use inpaint_core::metrics::Regime;
use inpaint_lab::commands::{cmd_complete, cmd_evaluate, cmd_train};
use inpaint_lab::service::{serve, ServiceState};
use inpaint_lab::{resolve_checkpoint, AppResult, HOME_ENV};

#[derive(Parser)]
#[command(name = "inpaint-lab", version, about = "Train, evaluate and run image completion models")]
struct Cli {
    /// Directory holding the default checkpoint (final.ckpt).
    #[arg(long, env = HOME_ENV, global = true, hide_env_values = true)]
    home: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run staged training from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fill the masked region of one image.
    Complete {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Grayscale PNG; values >= 128 are filled.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split of a config's dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "center")]
        regime: Regime,
        #[arg(long, default_value_t = 56)]
        mask_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for metrics.txt / .csv / .json.
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Serve POST /inpaint and GET /health on localhost.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let ckpt = cmd_train(&config, resume.as_deref())?;
            println!("{}", ckpt.display());
        }
        Command::Complete { checkpoint, image, mask, out } => {
            let ckpt = resolve_checkpoint(checkpoint, cli.home)?;
            cmd_complete(&ckpt, &image, &mask, &out)?;
        }
        Command::Evaluate { checkpoint, config, regime, mask_size, seed, out } => {
            let ckpt = resolve_checkpoint(checkpoint, cli.home)?;
            let row = cmd_evaluate(&ckpt, &config, regime, mask_size, seed, &out)?;
            print!("{}", std::fs::read_to_string(out.join("metrics.txt"))?);
            log::info!("{} images, psnr {}", row.n_images, row.psnr);
        }
        Command::Serve { checkpoint, port } => {
            let ckpt = resolve_checkpoint(checkpoint, cli.home)?;
            let state = Arc::new(ServiceState::load(&ckpt)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, port))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
