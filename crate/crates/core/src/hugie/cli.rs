use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use super::extract::{ensure_instruction_model, extract, ExtractionRequest};
use super::pretrain::pretrain_hugie;
use super::service::serve;
use super::health_info;
use crate::error::Result;
use crate::training::{load_splits, RunConfig, TaskModel};

#[derive(Parser, Debug)]
#[command(name = "hugie", about = "Instruction-driven information extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract typed spans from one text.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        /// Comma-separated type names.
        #[arg(long, value_delimiter = ',', required = true)]
        types: Vec<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Serve extraction over HTTP until killed.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Train on span datasets; `--data_dir` takes a comma-separated list.
    Pretrain(Box<RunConfig>),
}

fn load(dir: &std::path::Path) -> Result<TaskModel<f32>> {
    let model = TaskModel::<f32>::load(dir)?;
    ensure_instruction_model(&model)?;
    Ok(model)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract { checkpoint, text, types, threshold } => {
            let model = load(&checkpoint)?;
            let req = ExtractionRequest { text, schema_types: types, threshold };
            println!("{}", serde_json::to_string(&extract(&model, &req)?)?);
        }
        Command::Serve { checkpoint, host, port, workers } => {
            let model = load(&checkpoint)?;
            let health = health_info(&model);
            let handle = serve(Arc::new(model), health, &format!("{host}:{port}"), workers)?;
            eprintln!("listening on http://{}", handle.addr());
            handle.join();
        }
        Command::Pretrain(cfg) => {
            let mut train = Vec::new();
            let mut eval = Vec::new();
            for source in cfg.data_dir.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (t, e) = load_splits(source)?;
                train.push(t);
                eval.push(e);
            }
            let out = pretrain_hugie::<f32>(&train, &eval, &cfg)?;
            if let Some(r) = out.report {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
    }
    Ok(())
}

/// Exit code 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run_hugie_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
