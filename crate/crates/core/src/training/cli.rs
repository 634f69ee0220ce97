use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::config::{train, RunConfig};
use super::tracking::{read_events, render_report};
use crate::error::Result;

#[derive(Parser, Debug)]
#[command(
    name = "hugnlp_runner",
    about = "Train and evaluate a task model",
    arg_required_else_help = true,
    args_conflicts_with_subcommands = true,
    subcommand_negates_reqs = true
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: Option<RunConfig>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Summarize a tracking file.
    Report { path: PathBuf },
}

fn execute(cli: Cli) -> Result<()> {
    match (cli.command, cli.run) {
        (Some(Command::Report { path }), _) => {
            print!("{}", render_report(&read_events(&path)?));
            Ok(())
        }
        (None, Some(cfg)) => {
            let dtype = cfg.user_defined.get("dtype").unwrap_or("f32").to_string();
            let report = match dtype.as_str() {
                "f64" => train::<f64>(&cfg)?.report,
                _ => train::<f32>(&cfg)?.report,
            };
            if let Some(r) = report {
                println!("{}", serde_json::to_string(&r)?);
            }
            Ok(())
        }
        (None, None) => unreachable!("clap requires arguments"),
    }
}

/// Runs the command line; returns 0 on success, 1 on runtime failure and 2
/// on usage errors. `argv[0]` is the program name.
pub fn run_cli<I, T>(argv: I) -> i32
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

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("hugnlp_runner").chain(args.iter().copied()))
    }

    #[test]
    fn listing_style_flags() {
        let cli = parse(&[
            "--model_name_or_path=toy-tiny",
            "--data_dir=toy_sentiment",
            "--output_dir=./outputs/glue/rte",
            "--seed=42",
            "--max_seq_length=64",
            "--max_eval_seq_length=64",
            "--do_train",
            "--do_eval",
            "--per_device_train_batch_size=8",
            "--per_device_eval_batch_size=4",
            "--gradient_accumulation_steps=1",
            "--evaluation_strategy=steps",
            "--learning_rate=1e-5",
            "--num_train_epochs=10",
            "--task_name=clue",
            "--task_type=head_cls",
            "--model_type=bert",
            "--user_defined=data_name=rte,k=16",
        ])
        .unwrap();
        let cfg = cli.run.unwrap();
        assert_eq!(cfg.task().unwrap(), crate::training::TaskType::HeadCls);
        assert_eq!(cfg.user_defined.0.len(), 2);
        assert_eq!(cfg.per_device_eval_batch_size, 4);
        assert!(cfg.do_train && cfg.do_eval && !cfg.use_freezing);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(["hugnlp_runner"]), 2);
        assert_eq!(run_cli(["hugnlp_runner", "--bogus_flag=1"]), 2);
        assert_eq!(run_cli(["hugnlp_runner", "--data_dir=x", "--output_dir=y"]), 2);
        assert_eq!(run_cli(["hugnlp_runner", "--model_name_or_path=a", "--data_dir=x", "--output_dir=y", "--user_defined=oops"]), 2);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let out = out.to_str().unwrap();
        let args = ["hugnlp_runner", "--model_name_or_path=toy-tiny", "--data_dir=nowhere", "--task_type=head_cls"];
        let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        v.push(format!("--output_dir={out}"));
        assert_eq!(run_cli(v.clone()), 1);
        v[3] = "--task_type=nope".into();
        assert_eq!(run_cli(v), 1);
    }
}
