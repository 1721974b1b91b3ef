use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lsbp::run::{export_grid, run, AxisSpec, DataSource, Engine, RunConfig};
use lsbp::synthetic::{generate_synthetic, SyntheticSpec};

/// Bayesian density regression with logit stick-breaking mixtures.
#[derive(Parser)]
#[command(name = "lsbp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write density, CDF, parameter and manifest files.
    Fit(FitArgs),
    /// Write a synthetic dataset (x, y, label) to CSV.
    Synth(SynthArgs),
    /// Simulate random measures from the prior and check their moments.
    PriorCheck(CommonArgs),
    /// Re-evaluate a finished run's density on a new grid.
    ExportGrid(ExportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration, applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings: paper or quick.
    #[arg(long, default_value = "paper")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 gives the serial, bit-reproducible reference).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// gibbs, ecm or cavi.
    #[arg(long)]
    engine: Option<String>,
    /// CSV file with a header row; replaces the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "x")]
    x_column: String,
    #[arg(long, default_value = "y")]
    y_column: String,
}

#[derive(Args)]
struct SynthArgs {
    /// replica or separated.
    #[arg(long, default_value = "replica")]
    preset: String,
    /// JSON generator spec; replaces the preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Directory of a finished fit.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    nx: usize,
    #[arg(long, default_value_t = 200)]
    ny: usize,
    /// Fractional padding of the observed ranges.
    #[arg(long, default_value_t = 0.1)]
    pad: f64,
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let base = RunConfig::preset(&args.preset)?;
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::from_json_over(&base, &text)?
        }
        None => base,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn report(cfg: &RunConfig) -> Result<()> {
    let outcome = run(cfg)?;
    println!("wrote {}", outcome.output_dir.display());
    for f in &outcome.manifest.outputs {
        println!("  {f}");
    }
    println!("{}", outcome.manifest.engine_summary);
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = &args.engine {
        cfg.engine = e.parse()?;
    }
    if cfg.engine == Engine::PriorCheck {
        bail!("use the prior-check subcommand for prior diagnostics");
    }
    if let Some(path) = args.data {
        cfg.data = DataSource::Csv {
            path,
            x_column: args.x_column,
            y_column: args.y_column,
        };
    }
    cfg.validate()?;
    report(&cfg)
}

fn prior_check(args: CommonArgs) -> Result<()> {
    let mut cfg = load_config(&args)?;
    cfg.engine = Engine::PriorCheck;
    cfg.validate()?;
    report(&cfg)
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text).context("parsing generator spec")?
        }
        None => SyntheticSpec::preset(&args.preset, args.n, args.seed)?,
    };
    if let Some(n) = args.n {
        spec.n = n;
    }
    let sample = generate_synthetic(&spec)?;
    let mut w = csv::Writer::from_path(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    w.write_record(["x", "y", "label"])?;
    for ((x, y), g) in sample.x.iter().zip(&sample.y).zip(&sample.labels) {
        w.write_record([x.to_string(), y.to_string(), g.to_string()])?;
    }
    w.flush()?;
    println!("wrote {} rows to {}", sample.x.len(), args.out.display());
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let axis = |n| AxisSpec {
        n,
        pad: args.pad,
        values: None,
    };
    export_grid(&args.run, &axis(args.nx), &axis(args.ny), &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Fit(a) => fit(a),
        Command::Synth(a) => synth(a),
        Command::PriorCheck(a) => prior_check(a),
        Command::ExportGrid(a) => export(a),
    }
}
