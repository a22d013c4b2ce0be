use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wdmup::harness::{
    apply_env_overrides, load_config_file, run_experiment, write_outputs, ExperimentConfig, ExperimentKind, KEYS,
    TRANSFER_DEFAULTS,
};

/// Width-depth μP scaling rules, coordinate checks and verification sweeps.
#[derive(Parser)]
#[command(name = "wdmup", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-layer hyperparameters for each width and depth.
    Scale(RunArgs),
    /// Track activation and update norms over the first training steps.
    Coordcheck(RunArgs),
    /// Sweep the base learning rate across widths or depths.
    Transfer(RunArgs),
    /// Spectral conditions, update-order audit, claims and (optionally) assumptions.
    Verify(RunArgs),
    /// Compare the reduced and exact optimizer update forms.
    Equiv(RunArgs),
    /// List every configuration key with its default.
    Keys,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

#[derive(Args)]
struct RunArgs {
    /// Config file (`key = value` lines, or nested JSON).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Exit with status 2 unless the overall verdict is `pass`.
    #[arg(long)]
    check: bool,
}

impl RunArgs {
    /// Defaults, then file, then `WDMUP_*` environment, then flags.
    fn config(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut map = match &self.config {
            Some(p) => load_config_file(p)?,
            None => BTreeMap::new(),
        };
        apply_env_overrides(&mut map, |k| std::env::var(k).ok());
        map.insert("experiment".into(), kind.name().into());
        if let Some(out) = &self.out {
            map.insert("run.out".into(), out.display().to_string());
        }
        if let Some(seeds) = &self.seeds {
            map.insert("run.seeds".into(), seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        }
        if let Some(w) = self.workers {
            map.insert("run.workers".into(), w.to_string());
        }
        if let Some(f) = self.format {
            let name = match f {
                Format::Csv => "csv",
                Format::Json => "json",
                Format::Both => "both",
            };
            map.insert("run.format".into(), name.into());
        }
        for item in &self.overrides {
            let Some((k, v)) = item.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{item}`");
            };
            map.insert(k.trim().into(), v.trim().into());
        }
        Ok(ExperimentConfig::from_map(&map)?)
    }
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<ExitCode> {
    let cfg = args.config(kind)?;
    let out = run_experiment(&cfg).with_context(|| format!("running {}", kind.name()))?;
    print!("{}", out.report);
    for path in write_outputs(&cfg.out, cfg.format, &out)? {
        eprintln!("wrote {}", path.display());
    }
    let verdict = out.summary["verdict"].as_str().unwrap_or("inconclusive");
    if args.check && verdict != "pass" {
        eprintln!("verdict: {verdict}");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Scale(a) => run(ExperimentKind::Scale, a),
        Command::Coordcheck(a) => run(ExperimentKind::CoordCheck, a),
        Command::Transfer(a) => run(ExperimentKind::Transfer, a),
        Command::Verify(a) => run(ExperimentKind::Verify, a),
        Command::Equiv(a) => run(ExperimentKind::Equiv, a),
        Command::Keys => {
            for (k, v) in KEYS {
                match TRANSFER_DEFAULTS.iter().find(|(t, _)| t == k) {
                    Some((_, t)) => println!("{k} = {v}  (transfer: {t})"),
                    None => println!("{k} = {v}"),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
