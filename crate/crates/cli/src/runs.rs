//! Per-seed experiment runs: train, then persist metrics, checkpoint,
//! frontier sweep, and a JSON summary into the run directory.

use crate::util::{config_hash, write_atomic};
use anyhow::{Context, Result};
use blockrl::{
    build_prompt_pool, frontier_sweep, metrics_to_csv, snapshot, train, EvalReport, TrainConfig,
    TrainError,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub iterations_run: usize,
    pub warmup_steps_used: usize,
    pub post_warmup: EvalReport,
    pub final_eval: EvalReport,
    pub best_eval: EvalReport,
    pub best_aup_iteration: usize,
}

pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
    pub frontier: PathBuf,
    pub config: PathBuf,
}

impl RunPaths {
    pub fn new(dir: PathBuf) -> Self {
        RunPaths {
            metrics: dir.join("metrics.csv"),
            checkpoint: dir.join("checkpoint.txt"),
            summary: dir.join("summary.json"),
            frontier: dir.join("frontier.csv"),
            config: dir.join("config.toml"),
        }
    }
}

pub fn frontier_csv(rows: &[blockrl::FrontierRow]) -> String {
    let mut out = String::from("threshold,accuracy_pct,mean_tpf,aup\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.threshold, r.accuracy_pct, r.mean_tpf, r.aup
        ));
    }
    out
}

/// Train one seed and write every artifact. On a runtime abort the partial
/// metrics log is still flushed before the error propagates.
pub fn run_seed(
    name: &str,
    variant: &str,
    config: &TrainConfig,
    seed: u64,
    dir: &Path,
) -> Result<RunSummary> {
    let paths = RunPaths::new(dir.to_path_buf());
    let pool = build_prompt_pool(config, seed).context("building prompt pool")?;
    let output = match train(config, &pool, seed) {
        Ok(output) => output,
        Err(err) => {
            let partial = metrics_to_csv(err.partial_metrics());
            let _ = write_atomic(&paths.metrics, &partial);
            return Err(
                anyhow::Error::new(err).context("training aborted; partial metrics flushed")
            );
        }
    };

    write_atomic(&paths.metrics, &metrics_to_csv(&output.metrics))?;

    let mut checkpoint = Vec::new();
    blockrl::save_checkpoint(&mut checkpoint, &output.params).context("writing checkpoint")?;
    write_atomic(&paths.checkpoint, &String::from_utf8(checkpoint)?)?;

    let eval_prompts = &pool[..config.task.eval_prompts];
    let rows = frontier_sweep(
        &snapshot(&output.params),
        eval_prompts,
        config.task.verifier,
        &config.frontier_thresholds,
        &config.decode,
    )
    .context("frontier sweep")?;
    write_atomic(&paths.frontier, &frontier_csv(&rows))?;

    write_atomic(
        &paths.config,
        &toml::to_string_pretty(config).context("serializing config")?,
    )?;

    let summary = RunSummary {
        name: name.to_string(),
        variant: variant.to_string(),
        seed,
        config_hash: config_hash(config)?,
        iterations_run: output.metrics.len(),
        warmup_steps_used: output.warmup_steps_used,
        post_warmup: output.post_warmup,
        final_eval: output.final_eval,
        best_eval: output.best_eval,
        best_aup_iteration: output.best_aup_iteration,
    };
    write_atomic(&paths.summary, &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Load a previously written summary, if the run directory has one.
pub fn load_summary(dir: &Path) -> Result<Option<RunSummary>> {
    let path = dir.join("summary.json");
    if !path.exists() {
        return Ok(None);
    }
    let raw =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?,
    ))
}

/// Classify training failures: config problems are usage errors (exit 2),
/// anything else is a runtime failure (exit 1).
pub fn is_config_error(err: &anyhow::Error) -> bool {
    err.downcast_ref::<TrainError>()
        .map(|e| matches!(e, TrainError::Config(_)))
        .unwrap_or(false)
}
