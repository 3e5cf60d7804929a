use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdmlp_cli::commands;
use mdmlp_cli::config::{Origin, RunConfig};
use mdmlp_cli::Result;

#[derive(Parser)]
#[command(name = "mdmlp", version, about = "Train, evaluate and inspect MDMLP image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print geometry, activation shape, parameter and MAC counts.
    Inspect(Common),
    /// Train and write checkpoints plus a metric log to the output directory.
    Train(Common),
    /// Report top-1 accuracy on the test split.
    Eval(Common),
    /// Export attention-field heatmaps of test images as PGM files.
    Visualize {
        #[command(flatten)]
        common: Common,
        /// Test images to render: `3`, `0..8`, `2..=5` or a comma list.
        #[arg(long, default_value = "0..4")]
        images: String,
    },
}

#[derive(Args)]
struct Common {
    /// Config file, or the name of a shipped config.
    #[arg(long)]
    config: String,
    /// Dataset root (falls back to data.root, then MDMLP_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to runs/<config name>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to resume from (train) or to load (eval, visualize).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--override model.overlap=N`.
    #[arg(long)]
    overlap: Option<usize>,
    /// Worker threads; 1 is the reference mode.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        let flag = |name: &str, v: &dyn std::fmt::Display| Origin::Flag(format!("--{name} {v}"));
        if let Some(n) = self.overlap {
            cfg.set("model.overlap", &n.to_string(), flag("overlap", &n))?;
        }
        if let Some(s) = self.seed {
            cfg.set("train.seed", &s.to_string(), flag("seed", &s))?;
        }
        if let Some(t) = self.threads {
            cfg.set("train.threads", &t.to_string(), flag("threads", &t))?;
        }
        if let Some(d) = &self.data {
            let d = d.display().to_string();
            cfg.set("data.root", &d, flag("data", &d))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
    }
}

fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Inspect(c) => {
            let cfg = c.resolve()?;
            writeln!(out, "{}", commands::inspect(&cfg)?)?;
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            commands::train(&cfg, &c.out_dir(&cfg), c.checkpoint.as_deref(), &mut out)?;
        }
        Command::Eval(c) => {
            let cfg = c.resolve()?;
            let report = commands::eval(&cfg, c.checkpoint.as_deref())?;
            let source = c.checkpoint.as_ref().map_or("none (fresh init)".into(), |p| p.display().to_string());
            writeln!(out, "checkpoint={source} {report}")?;
        }
        Command::Visualize { common: c, images } => {
            let cfg = c.resolve()?;
            for h in commands::visualize(&cfg, c.checkpoint.as_deref(), &images, &c.out_dir(&cfg))? {
                writeln!(out, "{h}")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mdmlp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
