use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use cvla_cli::commands::{self, ModelRef, QuerySource};
use cvla_cli::config::{config_error, is_config_error, CliConfig, Overrides};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "cvla", version, about = "Cyclic counterfactual explanations for black-box report generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct FrameFlags {
    /// Maximum number of difference frames.
    #[arg(long)]
    k: Option<usize>,
    /// Threshold L on the 0..=255 difference scale.
    #[arg(long)]
    threshold: Option<f64>,
    /// Odd Gaussian blur kernel size.
    #[arg(long)]
    blur: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label a dataset with the generator and train a denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label source: tailored or gt.
        #[arg(long)]
        source: Option<String>,
        /// Report generator: a, b or reference.
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Remove findings from queries and verify with the generator.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        frames: FrameFlags,
        /// Training run directory; its selected checkpoint is used.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        model: Option<PathBuf>,
        /// A single checkpoint file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; queries come from the configured split.
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        data: Option<PathBuf>,
        /// A single PGM query.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        generator: Option<String>,
        /// At most this many queries.
        #[arg(long)]
        limit: Option<usize>,
        /// Comma-separated findings to remove; default all inferred.
        #[arg(long, value_delimiter = ',')]
        findings: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recount success from an explain run.
    Evaluate {
        /// Explain run directory.
        #[arg(long)]
        run: PathBuf,
    },
    /// Compare tailored-best, tailored-late and gt models on the same queries.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tailored: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask area and component count over threshold levels.
    SweepThreshold {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        frames: FrameFlags,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        counterfactual: PathBuf,
        /// Comma-separated levels; default 10, 20, ..., 250.
        #[arg(long, value_delimiter = ',')]
        levels: Vec<f64>,
        /// Also write the rows to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the report for one image.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        generator: Option<String>,
    },
}

fn resolve(common: &Common, mut overrides: Overrides) -> Result<CliConfig> {
    overrides.seed = common.seed;
    CliConfig::load(common.config.as_deref())?.resolve(&overrides)
}

fn frame_overrides(f: &FrameFlags) -> Overrides {
    Overrides { k: f.k, threshold: f.threshold, blur: f.blur, ..Default::default() }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = resolve(&common, Overrides::default())?;
            let n = commands::cmd_synth(&cfg, common.config.as_deref(), &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { common, data, out, source, generator, steps } => {
            let cfg = resolve(&common, Overrides { source, generator, steps, ..Default::default() })?;
            print_json(&commands::cmd_train(&cfg, common.config.as_deref(), &data, &out)?)?;
        }
        Command::Explain { common, frames, model, checkpoint, data, image, generator, limit, findings, out } => {
            let mut cfg = resolve(&common, Overrides { generator, ..frame_overrides(&frames) })?;
            if limit.is_some() {
                cfg.explain.limit = limit;
            }
            if !findings.is_empty() {
                cfg.explain.findings = findings;
                cfg.validate()?;
            }
            let model = match (model, checkpoint) {
                (Some(dir), _) => ModelRef::RunDir(dir),
                (None, Some(file)) => ModelRef::File(file),
                (None, None) => return Err(config_error("either --model or --checkpoint is required")),
            };
            let queries = match (data, image) {
                (Some(dir), _) => QuerySource::Dataset(dir),
                (None, Some(img)) => QuerySource::Image(img),
                (None, None) => return Err(config_error("either --data or --image is required")),
            };
            print_json(&commands::cmd_explain(&cfg, common.config.as_deref(), &model, &queries, &out)?)?;
        }
        Command::Evaluate { run } => print_json(&commands::cmd_evaluate(&run)?)?,
        Command::Ablate { common, data, tailored, gt, generator, out } => {
            let cfg = resolve(&common, Overrides { generator, ..Default::default() })?;
            let report = commands::cmd_ablate(
                &cfg,
                common.config.as_deref(),
                &data,
                &ModelRef::RunDir(tailored),
                &ModelRef::RunDir(gt),
                &out,
            )?;
            print_json(&report.rows)?;
        }
        Command::SweepThreshold { common, frames, query, counterfactual, levels, out } => {
            let cfg = resolve(&common, frame_overrides(&frames))?;
            let levels = if levels.is_empty() { commands::default_sweep_levels() } else { levels };
            let rows = commands::cmd_sweep(&cfg, &query, &counterfactual, &levels)?;
            if let Some(path) = out.as_deref() {
                write_rows(path, &rows)?;
            }
            print_json(&rows)?;
        }
        Command::Report { common, image, generator } => {
            let cfg = resolve(&common, Overrides { generator, ..Default::default() })?;
            print_json(&commands::cmd_report(&cfg, &image)?)?;
        }
    }
    Ok(())
}

fn write_rows(path: &Path, rows: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(rows)?)?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if is_config_error(&err) => {
            eprintln!("config error: {err:#}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
