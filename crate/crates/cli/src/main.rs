use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
mod manifest;

use commands::{
    EvalArgs, ExportArgs, FinetuneArgs, FootprintArgs, GenDatasetArgs, Outcome, PretrainArgs,
    SearchArgs,
};
use manifest::RunManifest;

const EXIT_INPUT: u8 = 1;
const EXIT_CONSTRAINT: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "mixq",
    version,
    about = "Mixed-precision quantization under MCU memory budgets"
)]
struct Cli {
    /// JSON object of flag values, or a run manifest to replay. Flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Where to write the run manifest [default: ./mixq-<command>.manifest.json]
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Report ROM and RAM footprints and check them against budgets
    Footprint(FootprintArgs),
    /// Write a synthetic 28x28 ten-class dataset
    GenDataset(GenDatasetArgs),
    /// Train a float model and calibrate its activation clips
    Pretrain(PretrainArgs),
    /// Search a bitwidth policy that fits the memory budgets
    Search(SearchArgs),
    /// Quantization-aware fine-tuning of a policy
    Finetune(FinetuneArgs),
    /// Evaluate a packed integer model or a fake-quantized checkpoint
    Eval(EvalArgs),
    /// Build the packed integer model of a checkpoint under a policy
    Export(ExportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Footprint(_) => "footprint",
            Command::GenDataset(_) => "gen-dataset",
            Command::Pretrain(_) => "pretrain",
            Command::Search(_) => "search",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Export(_) => "export",
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        let v = match self {
            Command::Footprint(a) => serde_json::to_value(a),
            Command::GenDataset(a) => serde_json::to_value(a),
            Command::Pretrain(a) => serde_json::to_value(a),
            Command::Search(a) => serde_json::to_value(a),
            Command::Finetune(a) => serde_json::to_value(a),
            Command::Eval(a) => serde_json::to_value(a),
            Command::Export(a) => serde_json::to_value(a),
        };
        v.expect("argument structs serialize")
    }

    fn run(&self) -> anyhow::Result<Outcome> {
        match self {
            Command::Footprint(a) => commands::footprint(a),
            Command::GenDataset(a) => commands::gen_dataset(a),
            Command::Pretrain(a) => commands::pretrain(a),
            Command::Search(a) => commands::search(a),
            Command::Finetune(a) => commands::finetune(a),
            Command::Eval(a) => commands::eval(a),
            Command::Export(a) => commands::export(a),
        }
    }
}

/// Usage problems found before clap sees the arguments (bad config file shape).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

/// Turn a flat JSON object into `--key value` tokens.
fn config_tokens(
    obj: &serde_json::Map<String, serde_json::Value>,
) -> Result<Vec<OsString>, UsageError> {
    let mut out = Vec::new();
    for (key, value) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            serde_json::Value::Null | serde_json::Value::Bool(false) => {}
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Number(n) => {
                out.push(flag.into());
                out.push(n.to_string().into());
            }
            serde_json::Value::String(s) => {
                out.push(flag.into());
                out.push(s.into());
            }
            _ => return Err(UsageError(format!("config key `{key}` must be a scalar"))),
        }
    }
    Ok(out)
}

fn subcommand_position(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if s == "--config" || s == "--manifest" {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Splice the values of a `--config` file into argv right after the subcommand, so any
/// flag repeated on the command line overrides it.
fn expand_config(mut args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let serde_json::Value::Object(obj) = value else {
        return Err(
            UsageError(format!("config {} must hold a JSON object", path.display())).into(),
        );
    };
    // A run manifest carries its command and a nested flag object.
    let (command, flags) = match (obj.get("command"), obj.get("config")) {
        (Some(serde_json::Value::String(c)), Some(serde_json::Value::Object(f))) => {
            (Some(c.clone()), f.clone())
        }
        _ => (None, obj),
    };
    let tokens = config_tokens(&flags)?;
    match subcommand_position(&args) {
        Some(pos) => {
            args.splice(pos + 1..pos + 1, tokens);
        }
        None => {
            let Some(command) = command else {
                return Err(
                    UsageError("no subcommand given and the config names none".into()).into(),
                );
            };
            args.push(command.into());
            args.extend(tokens);
        }
    }
    Ok(args)
}

fn parse(args: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let matches = cmd.try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn run_command(cli: &Cli, cmd_start: Instant) -> anyhow::Result<Outcome> {
    let name = cli.command.name();
    let outcome = cli.command.run();
    let exit = match &outcome {
        Ok(o) => o.exit_code(),
        Err(e) => exit_code_for(e),
    };
    let inputs = match &outcome {
        Ok(o) => o.inputs.clone(),
        Err(_) => Vec::new(),
    };
    let m = RunManifest::new(
        name,
        cli.command.snapshot(),
        &inputs,
        cmd_start.elapsed(),
        exit,
    )?;
    let path = cli
        .manifest
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("mixq-{name}.manifest.json")));
    m.save(&path)?;
    if outcome.is_ok() && !matches!(cli.command, Command::Footprint(_) | Command::Eval(_)) {
        eprintln!("manifest written to {}", path.display());
    }
    outcome
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if matches!(
        e.downcast_ref::<mixq_core::Error>(),
        Some(mixq_core::Error::Infeasible(_))
    ) {
        return EXIT_CONSTRAINT;
    }
    EXIT_INPUT
}

fn real_main() -> anyhow::Result<u8> {
    let start = Instant::now();
    let args = expand_config(std::env::args_os().collect())?;
    let cli = match parse(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            e.print()?;
            return Ok(code);
        }
    };
    let outcome = run_command(&cli, start)?;
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_tokens_skip_null_and_false() {
        let obj: serde_json::Value = serde_json::json!({"graph": "g.json", "seed": 3, "freeze_first_last": false,
            "no-requant-overhead": true, "policy": null});
        let toks = config_tokens(obj.as_object().unwrap()).unwrap();
        assert_eq!(
            toks,
            os(&["--graph", "g.json", "--no-requant-overhead", "--seed", "3"])
        );
        let nested = serde_json::json!({"a": [1]});
        assert!(config_tokens(nested.as_object().unwrap()).is_err());
    }

    #[test]
    fn subcommand_found_after_globals() {
        assert_eq!(
            subcommand_position(&os(&["mixq", "--manifest", "m.json", "eval"])),
            Some(3)
        );
        assert_eq!(
            subcommand_position(&os(&["mixq", "--config", "c.json"])),
            None
        );
    }

    #[test]
    fn later_flags_override_earlier() {
        let cli = parse(os(&[
            "mixq",
            "footprint",
            "--graph",
            "a.json",
            "--graph",
            "b.json",
        ]))
        .unwrap();
        match cli.command {
            Command::Footprint(a) => assert_eq!(a.graph, PathBuf::from("b.json")),
            _ => unreachable!(),
        }
    }
}
