//! Experiment runner for the blockrl laboratory.
//!
//! Exit codes are a stable scripting contract: 0 on success, 1 on runtime
//! failure (partial logs are preserved), 2 on usage or config errors.

mod ablate;
mod plot;
mod runs;
mod util;

use anyhow::{Context, Result};
use blockrl::TrainConfig;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "blockrl",
    version,
    about = "RL laboratory for block-wise parallel decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file mirroring the training config field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in starting point when no config file is given.
    #[arg(long, value_parser = ["toy", "paper-scale"])]
    preset: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, default_value = "1")]
    seeds: String,
    /// Output root; falls back to $BLOCKRL_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment name; defaults to the config file stem or the preset name.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write metrics, checkpoint, frontier sweep,
    /// and a JSON summary for each.
    Train(ConfigArgs),
    /// Train (or reuse) ablation variants and emit a comparison table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated toggles: nll, decoupled, filtering, advantage, reductions.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Only tabulate existing runs; never train.
        #[arg(long)]
        reuse_only: bool,
    },
    /// Render a plot kind from metrics/frontier CSVs (or re-render a
    /// previously emitted companion CSV).
    Plot {
        /// One of: total-reward, accuracy-reward, speed-reward,
        /// collapse-ratio, frontier.
        #[arg(long, alias = "plot")]
        kind: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Output file stem; defaults to the kind.
        #[arg(long)]
        name: Option<String>,
        /// Input CSV files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Errors that indicate misuse rather than a runtime failure.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage_err<T>(message: String) -> Result<T> {
    Err(anyhow::Error::new(UsageError(message)))
}

fn out_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("BLOCKRL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(args: &ConfigArgs) -> Result<(TrainConfig, String)> {
    let (config, default_name) = match (&args.config, args.preset.as_deref()) {
        (Some(path), _) => {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let config: TrainConfig = match toml::from_str(&raw) {
                Ok(config) => config,
                Err(e) => return usage_err(format!("config {}: {e}", path.display())),
            };
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("experiment")
                .to_string();
            (config, stem)
        }
        (None, Some("paper-scale")) => (TrainConfig::paper_scale(), "paper-scale".to_string()),
        (None, Some(_)) => (TrainConfig::toy(), "toy".to_string()),
        (None, None) => {
            return usage_err("either --config or --preset is required".into());
        }
    };
    if let Err(e) = config.validate() {
        return usage_err(format!("invalid config: {e}"));
    }
    let name = args.name.clone().unwrap_or(default_name);
    if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
        return usage_err(format!(
            "experiment name {name:?} is not a valid path component"
        ));
    }
    Ok((config, name))
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let (config, name) = load_config(args)?;
    let seeds = util::parse_seeds(&args.seeds).or_else(|e| usage_err(e.to_string()))?;
    let root = out_root(&args.out);
    for &seed in &seeds {
        let dir = root.join(&name).join(format!("seed-{seed}"));
        let summary = runs::run_seed(&name, "full", &config, seed, &dir)?;
        println!(
            "[train] {name} seed {seed}: final acc {:.1}% tpf {:.3} aup {:.1} (best aup {:.1} @ iter {}) -> {}",
            summary.final_eval.accuracy_pct,
            summary.final_eval.mean_tpf,
            summary.final_eval.aup,
            summary.best_eval.aup,
            summary.best_aup_iteration,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, toggles: &[String], reuse_only: bool) -> Result<()> {
    if toggles.is_empty() {
        return usage_err("--ablate needs at least one toggle".into());
    }
    let (config, name) = load_config(args)?;
    let seeds = util::parse_seeds(&args.seeds).or_else(|e| usage_err(e.to_string()))?;
    let root = out_root(&args.out);
    // Toggle validation is a usage error; surface it before training.
    if let Err(e) = ablate::expand_variants(&config, toggles) {
        return usage_err(e.to_string());
    }
    let table = ablate::run_ablation(&name, &config, toggles, &seeds, &root, reuse_only)?;
    println!("[ablate] wrote {}", table.display());
    Ok(())
}

fn cmd_plot(
    kind_name: &str,
    files: &[PathBuf],
    out: &Option<PathBuf>,
    name: &Option<String>,
) -> Result<()> {
    let kind = match plot::PlotKind::parse(kind_name) {
        Some(kind) => kind,
        None => {
            return usage_err(format!(
                "unknown plot kind {kind_name:?} (expected total-reward, accuracy-reward, speed-reward, collapse-ratio, frontier)"
            ))
        }
    };
    let data = plot::load_plot_data(files, kind)?;
    let root = out_root(out);
    let stem = name.clone().unwrap_or_else(|| kind.name().to_string());
    let csv_path = root.join(format!("{stem}.csv"));
    let svg_path = root.join(format!("{stem}.svg"));
    util::write_atomic(&csv_path, &plot::companion_csv(&data))?;
    util::write_atomic(&svg_path, &plot::render_svg(&data, kind))?;
    println!(
        "[plot] wrote {} and {}",
        csv_path.display(),
        svg_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Ablate {
            config,
            ablate,
            reuse_only,
        } => cmd_ablate(config, ablate, *reuse_only),
        Command::Plot {
            kind,
            out,
            name,
            files,
        } => cmd_plot(kind, files, out, name),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.downcast_ref::<UsageError>().is_some()
                || err.downcast_ref::<ablate::AblateRefusal>().is_some()
                || runs::is_config_error(&err);
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
