//! Controlled ablations: train (or reuse) the full method and toggled-off
//! variants over a shared seed list, then tabulate accuracy, TPF, and AUP at
//! each run's best-AUP checkpoint.

use crate::runs::{load_summary, run_seed, RunSummary};
use crate::util::{config_hash, write_atomic};
use anyhow::{bail, Context, Result};
use blockrl::{AdvantageMode, Reduction, TrainConfig};
use std::fmt::Write as _;
use std::path::Path;

/// Validation refusals (mismatched configs, missing runs); mapped to the
/// usage exit code by the caller.
#[derive(Debug)]
pub struct AblateRefusal(pub String);

impl std::fmt::Display for AblateRefusal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for AblateRefusal {}

/// A named configuration delta; everything except the toggled component must
/// match the base config.
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

pub fn expand_variants(base: &TrainConfig, toggles: &[String]) -> Result<Vec<Variant>> {
    let mut variants = vec![Variant {
        name: "full".into(),
        config: base.clone(),
    }];
    for toggle in toggles {
        match toggle.as_str() {
            "nll" => {
                let mut config = base.clone();
                config.loss.nll_coeff = 0.0;
                variants.push(Variant {
                    name: "no-nll".into(),
                    config,
                });
            }
            "decoupled" => {
                let mut config = base.clone();
                config.advantage_mode = AdvantageMode::Grpo;
                variants.push(Variant {
                    name: "no-decoupled".into(),
                    config,
                });
            }
            "filtering" => {
                let mut config = base.clone();
                config.filter.enabled = false;
                variants.push(Variant {
                    name: "no-filtering".into(),
                    config,
                });
            }
            "advantage" => {
                let mut grpo = base.clone();
                grpo.advantage_mode = AdvantageMode::Grpo;
                variants.push(Variant {
                    name: "adv-grpo".into(),
                    config: grpo,
                });
                let mut gae = base.clone();
                gae.advantage_mode = AdvantageMode::Gae;
                variants.push(Variant {
                    name: "adv-gae".into(),
                    config: gae,
                });
            }
            "reductions" => {
                for (label, reductions) in [
                    ("red-seq-seq-seq", (Reduction::Seq, Reduction::Seq, Reduction::Seq)),
                    ("red-seq-tok-seq", (Reduction::Seq, Reduction::Tok, Reduction::Seq)),
                    ("red-seq-tok-tok", (Reduction::Seq, Reduction::Tok, Reduction::Tok)),
                    ("red-tok-tok-tok", (Reduction::Tok, Reduction::Tok, Reduction::Tok)),
                ] {
                    let mut config = base.clone();
                    config.loss.policy_reduction = reductions.0;
                    config.loss.kl_reduction = reductions.1;
                    config.loss.nll_reduction = reductions.2;
                    variants.push(Variant {
                        name: label.into(),
                        config,
                    });
                }
            }
            other => bail!("unknown ablation toggle {other:?} (expected nll, decoupled, filtering, advantage, reductions)"),
        }
    }
    Ok(variants)
}

fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run (or reuse) every variant x seed and write the comparison table.
/// Pre-existing runs are reused only when their config hash matches the base
/// experiment; with `reuse_only` no training happens and missing runs are an
/// error.
pub fn run_ablation(
    name: &str,
    base: &TrainConfig,
    toggles: &[String],
    seeds: &[u64],
    out_dir: &Path,
    reuse_only: bool,
) -> Result<std::path::PathBuf> {
    let variants = expand_variants(base, toggles)?;
    let expected_hash = config_hash(base)?;
    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut missing: Vec<String> = Vec::new();

    for variant in &variants {
        for &seed in seeds {
            let dir = out_dir
                .join(name)
                .join(&variant.name)
                .join(format!("seed-{seed}"));
            match load_summary(&dir)? {
                Some(existing) => {
                    if existing.config_hash != expected_hash {
                        return Err(anyhow::Error::new(AblateRefusal(format!(
                            "run {} was produced by a different base config (hash {} != {}); refusing to compare",
                            dir.display(),
                            existing.config_hash,
                            expected_hash
                        ))));
                    }
                    summaries.push(existing);
                }
                None if reuse_only => {
                    missing.push(format!("{}/seed-{seed}", variant.name));
                }
                None => {
                    println!("[ablate] training {}/{} seed {seed}", name, variant.name);
                    let summary = run_seed(name, &variant.name, &variant.config, seed, &dir)
                        .with_context(|| format!("variant {} seed {seed}", variant.name))?;
                    summaries.push(summary);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(anyhow::Error::new(AblateRefusal(format!(
            "missing runs (train them first or drop --reuse-only): {}",
            missing.join(", ")
        ))));
    }

    let mut table =
        String::from("variant,seed,accuracy_pct,mean_tpf,aup,accuracy_std,tpf_std,aup_std\n");
    for variant in &variants {
        let rows: Vec<&RunSummary> = summaries
            .iter()
            .filter(|s| s.variant == variant.name)
            .collect();
        for s in &rows {
            let _ = writeln!(
                table,
                "{},{},{},{},{},,,",
                variant.name,
                s.seed,
                s.best_eval.accuracy_pct,
                s.best_eval.mean_tpf,
                s.best_eval.aup
            );
        }
        let (acc_mean, acc_std) = mean_and_pop_std(
            &rows
                .iter()
                .map(|s| s.best_eval.accuracy_pct)
                .collect::<Vec<_>>(),
        );
        let (tpf_mean, tpf_std) = mean_and_pop_std(
            &rows
                .iter()
                .map(|s| s.best_eval.mean_tpf)
                .collect::<Vec<_>>(),
        );
        let (aup_mean, aup_std) =
            mean_and_pop_std(&rows.iter().map(|s| s.best_eval.aup).collect::<Vec<_>>());
        let _ = writeln!(
            table,
            "{},aggregate,{acc_mean},{tpf_mean},{aup_mean},{acc_std},{tpf_std},{aup_std}",
            variant.name
        );
    }
    let path = out_dir.join(name).join("ablation.csv");
    write_atomic(&path, &table)?;
    Ok(path)
}
