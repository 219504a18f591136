use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mvpt_core::config::RunConfig;
use mvpt_core::diffcore::OpKind;
use mvpt_core::pipeline::{self, EvalSplit};
use mvpt_core::Error;

/// Multi-view visual prompt tuning on a small shifted-window transformer.
///
/// Any `--key value` not listed below overrides a config field, either by
/// dotted path (`--tune.epochs 5`) or by a unique field name (`--lambda 0`).
#[derive(Parser, Debug)]
#[command(name = "mvpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; defaults to the toy preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the full-scale preset instead of the toy one.
    #[arg(long, global = true)]
    full_scale: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-view dataset.
    Synth,
    /// Stage 1: single-view pretraining of the backbone.
    Pretrain,
    /// Stage 2: prompt tuning on a frozen backbone.
    Tune {
        /// Stage-1 checkpoint; defaults to `<out_dir>/stage1.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only this cross-validation fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Metrics of one checkpoint, or of all fold checkpoints aggregated.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Finite-difference verification of every backward rule and loss.
    Gradcheck {
        /// Flip the sign of one op's backward rule (mutation test).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Trainable-parameter report of the tuning phase.
    Audit,
}

const KNOWN: [&str; 9] = [
    "config",
    "full-scale",
    "checkpoint",
    "fold",
    "split",
    "inject-fault",
    "help",
    "version",
    "",
];

/// Pull `--key value` / `--key=value` pairs with unknown keys out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            keep.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if KNOWN.contains(&key.as_str()) {
            keep.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("override --{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((keep, overrides))
}

fn print<T: Serialize>(v: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(v)?;
    // a closed pipe (`mvpt audit | head`) is not an error
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<bool, Error> {
    let base = match (&cli.config, cli.full_scale) {
        // an unreadable config file is a usage error, not a runtime one
        (Some(path), _) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        (None, true) => RunConfig::full_scale(),
        (None, false) => RunConfig::toy(),
    };
    let cfg = base.with_overrides(overrides)?;
    match cli.command {
        Command::Synth => {
            let s = pipeline::cmd_synth(&cfg)?;
            print(&s)?;
        }
        Command::Pretrain => {
            let log = pipeline::cmd_pretrain(&cfg)?;
            let last = log.epochs.last();
            print(&serde_json::json!({
                "checkpoint": pipeline::stage1_path(&cfg),
                "steps": log.steps,
                "final_loss": last.map(|e| e.loss),
            }))?;
        }
        Command::Tune { checkpoint, fold } => {
            let ckpt = checkpoint.unwrap_or_else(|| pipeline::stage1_path(&cfg));
            let logs = pipeline::cmd_tune(&cfg, &ckpt, fold)?;
            let summary: Vec<_> = logs
                .iter()
                .map(|l| {
                    serde_json::json!({
                        "fold": l.fold,
                        "checkpoint": pipeline::fold_dir(&cfg, l.fold).join("stage2.ckpt"),
                        "final_loss": l.epochs.last().map(|e| e.l_overall),
                        "backbone_unchanged": l.backbone_digest_before == l.backbone_digest_after,
                    })
                })
                .collect();
            print(&summary)?;
        }
        Command::Eval { checkpoint, split, fold } => {
            let split = EvalSplit::parse(&split)?;
            print(&pipeline::cmd_eval(&cfg, checkpoint.as_deref(), split, fold)?)?;
        }
        Command::Gradcheck { inject_fault } => {
            let fault = inject_fault
                .map(|n| OpKind::from_name(&n).ok_or_else(|| Error::Config(format!("unknown op `{n}`"))))
                .transpose()?;
            let report = pipeline::cmd_gradcheck(&cfg, fault)?;
            print(&report)?;
            for f in &report.failures {
                eprintln!("gradcheck failed: {f}");
            }
            return Ok(report.passed);
        }
        Command::Audit => print(&pipeline::cmd_audit(&cfg)?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
