//! Shared helpers: atomic writes, config hashing, seed parsing.

use anyhow::{Context, Result};
use std::fs;
use std::path::Path;

/// Write via a temp file and rename, so readers never observe partial output.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))?;
    Ok(())
}

/// FNV-1a over a canonical serialization of the config with every ablation
/// toggle neutralized; variants of one base experiment share this hash.
pub fn config_hash(config: &blockrl::TrainConfig) -> Result<String> {
    let mut neutral = config.clone();
    neutral.loss.nll_coeff = 0.0;
    neutral.advantage_mode = blockrl::AdvantageMode::Decoupled;
    neutral.filter.enabled = true;
    neutral.loss.policy_reduction = blockrl::Reduction::Seq;
    neutral.loss.kl_reduction = blockrl::Reduction::Tok;
    neutral.loss.nll_reduction = blockrl::Reduction::Tok;
    let canonical = toml::to_string(&neutral).context("serializing config for hashing")?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    Ok(format!("{hash:016x}"))
}

pub fn parse_seeds(csv: &str) -> Result<Vec<u64>> {
    let seeds: Result<Vec<u64>, _> = csv.split(',').map(|s| s.trim().parse::<u64>()).collect();
    let seeds = seeds.with_context(|| format!("parsing seed list {csv:?}"))?;
    anyhow::ensure!(!seeds.is_empty(), "seed list is empty");
    Ok(seeds)
}
