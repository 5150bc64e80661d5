use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtkws_core::adapt::Strategy;
use mtkws_core::config::{load_config, ExperimentConfig};
use mtkws_core::evalkit::Condition;
use mtkws_core::pipeline::{self, Selection};
use mtkws_core::pretrain::Mode;

#[derive(Parser, Debug)]
#[command(name = "mtkws", version, about = "Mixture-aware pre-training and few-shot keyword spotting")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// Config file (flat `key = value`); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides paths.workdir.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic keyword corpus.
    SynthData,
    /// Plan the pre-training and evaluation mixture sets.
    MixBuild,
    /// Fit the codebook and write clean, n-hot and mixture targets.
    Tokenize,
    /// Masked-prediction pre-training of one backbone.
    Pretrain {
        #[arg(long)]
        mode: Mode,
    },
    /// Few-shot adaptation of a task head on a frozen backbone.
    Adapt {
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        strategy: Strategy,
        /// Defaults to every configured shot count.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Score one evaluation condition with the adapted heads.
    Eval {
        #[arg(long)]
        condition: Condition,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Aggregate evaluation results into report.tsv / report.txt.
    Report,
    /// Run every stage and print the table with the directional checks.
    ToyTable1,
    /// Print the effective configuration.
    ShowConfig,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::MixBuild => "mix-build",
            Command::Tokenize => "tokenize",
            Command::Pretrain { .. } => "pretrain",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
            Command::Report => "report",
            Command::ToyTable1 => "toy-table1",
            Command::ShowConfig => "show-config",
        }
    }
}

fn effective_config(shared: &Shared) -> mtkws_core::Result<ExperimentConfig> {
    let mut cfg = match &shared.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    if let Some(w) = &shared.workdir {
        cfg.workdir = w.clone();
    }
    for o in &shared.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| mtkws_core::Error::Config {
            key: o.clone(),
            constraint: "overrides take the form key=value".into(),
        })?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: &Command, cfg: &ExperimentConfig) -> mtkws_core::Result<()> {
    match cmd {
        Command::SynthData => println!("{}", pipeline::run_synth(cfg)?),
        Command::MixBuild => println!("{}", pipeline::run_mix_build(cfg)?),
        Command::Tokenize => println!("{}", pipeline::run_tokenize(cfg)?),
        Command::Pretrain { mode } => println!("{}", pipeline::run_pretrain(cfg, *mode)?.0),
        Command::Adapt { mode, strategy, shots } => {
            let shots = shots.map(|s| vec![s]).unwrap_or_else(|| cfg.adapt.shots.clone());
            for s in shots {
                println!("{}", pipeline::run_adapt(cfg, *mode, *strategy, s)?);
            }
        }
        Command::Eval {
            condition,
            mode,
            strategy,
            shots,
        } => {
            let sel = Selection {
                modes: mode.map(|m| vec![m]),
                strategies: strategy.map(|s| vec![s]),
                shots: shots.map(|s| vec![s]),
            };
            for r in pipeline::run_eval(cfg, *condition, &sel)? {
                println!("{}", pipeline::eval_summary(&r));
            }
        }
        Command::Report => print!("{}", pipeline::run_report(cfg)?.0),
        Command::ToyTable1 => {
            let (table, reports) = pipeline::run_all(cfg, &mut |line| println!("{line}"))?;
            print!("{table}");
            for c in pipeline::directional_checks(&reports, 0.10, 4)? {
                println!("[{}] {} ({})", if c.holds { "ok" } else { "FAIL" }, c.name, c.detail);
            }
        }
        Command::ShowConfig => print!("{}", cfg.echo()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let stage = cli.command.stage();
    let result = effective_config(&cli.shared).and_then(|cfg| run(&cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mtkws {stage}: {e}");
            ExitCode::from(1)
        }
    }
}
