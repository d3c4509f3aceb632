//! Reward assembly and group-relative advantage estimation.
//!
//! Supports the coupled baseline (standardize the summed reward within each
//! group) and the decoupled scheme (standardize each reward component
//! independently, sum the standardized signals, then batch-normalize), plus
//! the collapse-ratio diagnostic that motivates decoupling, a tabular critic
//! with generalized advantage estimation, and dynamic sampling with
//! spread-aware group filtering.
//!
//! All standardizations use population statistics and guard the denominator
//! with `max(std, epsilon)`, which keeps z-scores exactly invariant to a
//! positive rescaling of any single reward component whenever the group has
//! real spread, and maps zero-spread groups to zero signal.

mod critic;
mod sampling;

pub use critic::{gae_advantages, CriticTable, GaeConfig};
pub use sampling::{
    dynamic_sample, group_passes, FilterConfig, FilterCriterion, SampleDiagnostics,
};

use crate::decoder::tpf;
use crate::domain::{verify, Prompt, RewardVector, TaskError, Trajectory, VerifierMode, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("group too small: need at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("collapse ratio needs at least one within-group pair")]
    NoPairs,
    #[error("resample budget exhausted after {candidates} candidate groups ({accepted} accepted, acceptance rate {acceptance_rate:.4})")]
    ResampleExhausted {
        candidates: usize,
        accepted: usize,
        acceptance_rate: f64,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// How raw rewards are produced from a finished trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub verifier: VerifierMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            verifier: VerifierMode::Binary,
        }
    }
}

/// Accuracy from the verifier, speed as the raw tokens-per-forward.
pub fn assemble_rewards(
    trajectory: &Trajectory,
    prompt: &Prompt,
    config: &RewardConfig,
    vocab: Vocab,
) -> Result<RewardVector, TaskError> {
    let (accuracy, correct) = verify(prompt, &trajectory.final_tokens, config.verifier, vocab)?;
    Ok(RewardVector {
        accuracy,
        speed: tpf(trajectory),
        correct,
    })
}

/// G rollouts of one prompt with their raw rewards; advantages are filled in
/// after normalization.
#[derive(Debug, Clone)]
pub struct Group {
    pub prompt_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardVector>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(prompt_id: u64, trajectories: Vec<Trajectory>, rewards: Vec<RewardVector>) -> Self {
        debug_assert_eq!(trajectories.len(), rewards.len());
        Group {
            prompt_id,
            trajectories,
            rewards,
            advantages: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    pub fn tpf_values(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.speed).collect()
    }

    pub fn correct_count(&self) -> usize {
        self.rewards.iter().filter(|r| r.correct).count()
    }

    /// Largest minus smallest TPF within the group.
    pub fn tpf_spread(&self) -> f64 {
        let tpfs = self.tpf_values();
        let max = tpfs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = tpfs.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Standardize the summed reward within each group.
    Coupled,
    /// Standardize each component within the group, then sum.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormConfig {
    pub mode: NormMode,
    /// When false (the training-time default) the accuracy component passes
    /// through raw instead of being standardized.
    pub normalize_accuracy: bool,
    pub epsilon: f64,
    pub std_kind: StdKind,
    /// Apply the final batch-wise standardization across every
    /// (group, member) pair.
    pub batch_norm: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            mode: NormMode::Decoupled,
            normalize_accuracy: false,
            epsilon: 1e-8,
            std_kind: StdKind::Population,
            batch_norm: true,
        }
    }
}

fn mean_std(values: &[f64], kind: StdKind) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match kind {
        StdKind::Population => n,
        StdKind::Sample => (n - 1.0).max(1.0),
    };
    (mean, (ss / denom).sqrt())
}

fn zscores(values: &[f64], kind: StdKind, epsilon: f64) -> Vec<f64> {
    let (mean, std) = mean_std(values, kind);
    let denom = std.max(epsilon);
    values.iter().map(|v| (v - mean) / denom).collect()
}

/// Vanilla group-relative advantages: standardize the coupled total reward
/// (accuracy + speed) within one group.
pub fn grpo_advantages(group: &Group, epsilon: f64) -> Result<Vec<f64>, RlError> {
    if group.size() < 2 {
        return Err(RlError::GroupTooSmall(group.size()));
    }
    let totals: Vec<f64> = group.rewards.iter().map(|r| r.accuracy + r.speed).collect();
    Ok(zscores(&totals, StdKind::Population, epsilon))
}

/// Advantages for a whole batch of groups, per member.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAdvantages {
    /// Final advantages (after batch normalization when enabled).
    pub advantages: Vec<Vec<f64>>,
    /// Per-group composite signal before batch normalization; a group whose
    /// composite is constant carries no within-group gradient preference.
    pub composite: Vec<Vec<f64>>,
}

impl BatchAdvantages {
    /// Fraction of groups whose within-group composite spread is below `tol`.
    pub fn zero_signal_fraction(&self, tol: f64) -> f64 {
        if self.composite.is_empty() {
            return 0.0;
        }
        let degenerate = self
            .composite
            .iter()
            .filter(|c| {
                let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = c.iter().cloned().fold(f64::INFINITY, f64::min);
                max - min < tol
            })
            .count();
        degenerate as f64 / self.composite.len() as f64
    }
}

/// Group-then-batch reward normalization.
///
/// Decoupled mode standardizes each component within the group (accuracy
/// passes through raw unless `normalize_accuracy`), sums the standardized
/// components, and optionally standardizes the sums across the whole batch.
/// Coupled mode standardizes the summed raw reward within the group and then
/// applies the same optional batch stage.
pub fn compute_advantages(
    groups: &[Group],
    config: &NormConfig,
) -> Result<BatchAdvantages, RlError> {
    if groups.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    for g in groups {
        if g.size() < 2 {
            return Err(RlError::GroupTooSmall(g.size()));
        }
    }
    let composite: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| match config.mode {
            NormMode::Coupled => {
                let totals: Vec<f64> = g.rewards.iter().map(|r| r.accuracy + r.speed).collect();
                zscores(&totals, config.std_kind, config.epsilon)
            }
            NormMode::Decoupled => {
                let acc_raw: Vec<f64> = g.rewards.iter().map(|r| r.accuracy).collect();
                let acc = if config.normalize_accuracy {
                    zscores(&acc_raw, config.std_kind, config.epsilon)
                } else {
                    acc_raw
                };
                let speed: Vec<f64> = g.rewards.iter().map(|r| r.speed).collect();
                let speed_z = zscores(&speed, config.std_kind, config.epsilon);
                acc.iter().zip(&speed_z).map(|(a, s)| a + s).collect()
            }
        })
        .collect();

    let advantages = if config.batch_norm {
        let flat: Vec<f64> = composite.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&flat, config.std_kind);
        let denom = std.max(config.epsilon);
        composite
            .iter()
            .map(|g| g.iter().map(|a| (a - mean) / denom).collect())
            .collect()
    } else {
        composite.clone()
    };

    Ok(BatchAdvantages {
        advantages,
        composite,
    })
}

/// Fraction of within-group unordered pairs whose advantage difference is
/// below the threshold. Diagnoses vanishing preference resolution.
pub fn collapse_ratio(grouped_advantages: &[Vec<f64>], threshold: f64) -> Result<f64, RlError> {
    let mut pairs = 0usize;
    let mut collapsed = 0usize;
    for group in grouped_advantages {
        for i in 0..group.len() {
            for j in (i + 1)..group.len() {
                pairs += 1;
                if (group[i] - group[j]).abs() < threshold {
                    collapsed += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(RlError::NoPairs);
    }
    Ok(collapsed as f64 / pairs as f64)
}

#[cfg(test)]
pub(crate) fn test_group(prompt_id: u64, rewards: Vec<RewardVector>) -> Group {
    // Filter- and advantage-level tests only read the reward vectors; a
    // minimal one-step trajectory per member keeps the structure honest.
    let trajectories = rewards
        .iter()
        .map(|_| Trajectory {
            prompt_id,
            block_size: 1,
            steps: Vec::new(),
            final_tokens: vec![0],
            forwards: 1,
            decoded_tokens: 1,
            seed: 0,
        })
        .collect();
    Group::new(prompt_id, trajectories, rewards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn rv(accuracy: f64, speed: f64) -> RewardVector {
        RewardVector {
            accuracy,
            speed,
            correct: accuracy >= 1.0,
        }
    }

    /// Straightforward scalar-loop recomputation of the decoupled pipeline,
    /// kept deliberately independent of the implementation above.
    fn decoupled_oracle(groups: &[Group], config: &NormConfig) -> Vec<Vec<f64>> {
        let mut composites: Vec<Vec<f64>> = Vec::new();
        for g in groups {
            let n = g.rewards.len() as f64;
            let mut acc_sum = 0.0;
            let mut spd_sum = 0.0;
            for r in &g.rewards {
                acc_sum += r.accuracy;
                spd_sum += r.speed;
            }
            let acc_mean = acc_sum / n;
            let spd_mean = spd_sum / n;
            let mut acc_ss = 0.0;
            let mut spd_ss = 0.0;
            for r in &g.rewards {
                acc_ss += (r.accuracy - acc_mean) * (r.accuracy - acc_mean);
                spd_ss += (r.speed - spd_mean) * (r.speed - spd_mean);
            }
            let acc_var = acc_ss / n;
            let spd_var = spd_ss / n;
            let acc_den = acc_var.sqrt().max(config.epsilon);
            let spd_den = spd_var.sqrt().max(config.epsilon);
            let mut comp = Vec::new();
            for r in &g.rewards {
                let a = if config.normalize_accuracy {
                    (r.accuracy - acc_mean) / acc_den
                } else {
                    r.accuracy
                };
                let s = (r.speed - spd_mean) / spd_den;
                comp.push(a + s);
            }
            composites.push(comp);
        }
        if !config.batch_norm {
            return composites;
        }
        let mut count = 0.0;
        let mut mean = 0.0;
        for c in &composites {
            for &x in c {
                mean += x;
                count += 1.0;
            }
        }
        mean /= count;
        let mut var = 0.0;
        for c in &composites {
            for &x in c {
                var += (x - mean) * (x - mean);
            }
        }
        var /= count;
        let den = var.sqrt().max(config.epsilon);
        composites
            .iter()
            .map(|c| c.iter().map(|x| (x - mean) / den).collect())
            .collect()
    }

    #[test]
    fn assemble_rewards_composes_verifier_and_tpf() {
        use crate::decoder::{decode, DecodeConfig, DecodeMode};
        use crate::domain::{make_prompt_set, Vocab};
        use crate::policy::{snapshot, FeatureSpec, PolicyParams};
        let vocab = Vocab::with_trailing_mask(5).unwrap();
        let spec = FeatureSpec::new(4, vocab);
        let policy = snapshot(&PolicyParams::zeros(spec));
        let prompt = make_prompt_set(crate::domain::TaskKind::Copy, 1, 4, vocab, 8)
            .unwrap()
            .remove(0);
        let config = DecodeConfig {
            block_size: 4,
            confidence_threshold: 1.1,
            max_steps_per_block: 4,
            temperature: 1.0,
            mode: DecodeMode::Greedy,
        };
        // Fallback-only greedy decode: TPF exactly 1.
        let trajectory = decode(&policy, &prompt, &config, 0).unwrap();
        let binary = RewardConfig::default();
        let reward = assemble_rewards(&trajectory, &prompt, &binary, vocab).unwrap();
        assert_eq!(reward.speed, 1.0);
        assert_eq!(reward.accuracy.abs(), 1.0);
        assert_eq!(reward.correct, reward.accuracy == 1.0);
        // Fractional mode scores matching positions.
        let fractional = RewardConfig {
            verifier: crate::domain::VerifierMode::Fractional,
        };
        let reward = assemble_rewards(&trajectory, &prompt, &fractional, vocab).unwrap();
        let matching = trajectory
            .final_tokens
            .iter()
            .zip(&prompt.target)
            .filter(|(a, b)| a == b)
            .count();
        assert!((reward.accuracy - matching as f64 / 4.0).abs() < 1e-12);
        assert_eq!(reward.correct, matching == 4);
    }

    #[test]
    fn grpo_degenerate_group_is_all_zero() {
        let g = test_group(0, vec![rv(1.0, 2.0), rv(1.0, 2.0), rv(1.0, 2.0)]);
        let adv = grpo_advantages(&g, 1e-8).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn grpo_two_point_standardization() {
        let g = test_group(0, vec![rv(1.0, 0.0), rv(-1.0, 0.0)]);
        let adv = grpo_advantages(&g, 1e-8).unwrap();
        assert_eq!(adv, vec![1.0, -1.0]);
    }

    #[test]
    fn grpo_three_point_standardization() {
        let g = test_group(0, vec![rv(0.0, 1.0), rv(0.0, 2.0), rv(0.0, 3.0)]);
        let adv = grpo_advantages(&g, 1e-8).unwrap();
        let expected = (1.0f64 - 2.0) / (2.0f64 / 3.0).sqrt();
        assert!((adv[0] - expected).abs() < 1e-12);
        assert!((adv[1]).abs() < 1e-12);
        assert!((adv[2] + expected).abs() < 1e-12);
        let mean: f64 = adv.iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    #[allow(clippy::approx_constant)] // frozen 4-decimal expected values
    fn decoupled_single_group_matches_hand_computation() {
        let g = test_group(0, vec![rv(1.0, 2.0), rv(-1.0, 3.0), rv(1.0, 4.0)]);
        let config = NormConfig {
            normalize_accuracy: true,
            ..NormConfig::default()
        };
        let out = compute_advantages(&[g], &config).unwrap();
        let adv = &out.advantages[0];
        assert!((adv[0] - -0.3660).abs() < 1e-4, "got {}", adv[0]);
        assert!((adv[1] - -1.0000).abs() < 1e-4, "got {}", adv[1]);
        assert!((adv[2] - 1.3660).abs() < 1e-4, "got {}", adv[2]);
        // Pre-batch-norm composite matches the hand arithmetic too.
        let comp = &out.composite[0];
        assert!((comp[0] - -0.5176).abs() < 1e-4);
        assert!((comp[1] - -1.4142).abs() < 1e-4);
        assert!((comp[2] - 1.9319).abs() < 1e-4);
    }

    #[test]
    fn constant_accuracy_passes_through_to_batch_centering() {
        // All members correct: with raw accuracy pass-through, the constant
        // shifts out in the batch stage and the result is the TPF z-scores.
        let g = test_group(0, vec![rv(1.0, 2.0), rv(1.0, 3.0), rv(1.0, 4.0)]);
        let config = NormConfig::default();
        let out = compute_advantages(&[g], &config).unwrap();
        let adv = &out.advantages[0];
        let z = (2.0f64 / 3.0).sqrt();
        assert!((adv[0] + 1.0 / z).abs() < 1e-9, "got {}", adv[0]);
        assert!(adv[1].abs() < 1e-9);
        assert!((adv[2] - 1.0 / z).abs() < 1e-9);
    }

    #[test]
    fn identical_rewards_yield_zero_advantages() {
        let g1 = test_group(0, vec![rv(1.0, 2.5); 4]);
        let g2 = test_group(1, vec![rv(1.0, 2.5); 4]);
        for config in [
            NormConfig::default(),
            NormConfig {
                mode: NormMode::Coupled,
                ..NormConfig::default()
            },
        ] {
            let out = compute_advantages(&[g1.clone(), g2.clone()], &config).unwrap();
            for g in &out.advantages {
                assert!(g.iter().all(|&a| a == 0.0));
            }
        }
    }

    #[test]
    fn matches_scalar_loop_oracle_on_random_batches() {
        let mut rng = StreamRng::from_key(&[404]);
        for batch in 0..50 {
            let n_groups = 1 + rng.next_below(4) as usize;
            let groups: Vec<Group> = (0..n_groups)
                .map(|i| {
                    let g = 2 + rng.next_below(6) as usize;
                    let rewards = (0..g)
                        .map(|_| {
                            rv(
                                if rng.next_f64() < 0.5 { 1.0 } else { -1.0 },
                                1.0 + 3.0 * rng.next_f64(),
                            )
                        })
                        .collect();
                    test_group(i as u64, rewards)
                })
                .collect();
            for normalize_accuracy in [false, true] {
                for batch_norm in [false, true] {
                    let config = NormConfig {
                        normalize_accuracy,
                        batch_norm,
                        ..NormConfig::default()
                    };
                    let ours = compute_advantages(&groups, &config).unwrap();
                    let oracle = decoupled_oracle(&groups, &config);
                    for (a, b) in ours
                        .advantages
                        .iter()
                        .flatten()
                        .zip(oracle.iter().flatten())
                    {
                        assert!((a - b).abs() < 1e-12, "batch {batch}: {a} vs {b}");
                    }
                    if batch_norm {
                        let flat: Vec<f64> = ours.advantages.iter().flatten().copied().collect();
                        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
                        assert!(mean.abs() < 1e-9, "batch-normalized mean {mean}");
                    }
                }
            }
        }
    }

    #[test]
    fn speed_rescaling_leaves_decoupled_advantages_unchanged() {
        let mut rng = StreamRng::from_key(&[777]);
        let groups: Vec<Group> = (0..4)
            .map(|i| {
                let rewards = (0..6)
                    .map(|_| {
                        rv(
                            if rng.next_f64() < 0.5 { 1.0 } else { -1.0 },
                            2.0 + rng.next_f64(),
                        )
                    })
                    .collect();
                test_group(i, rewards)
            })
            .collect();
        let config = NormConfig::default();
        let base = compute_advantages(&groups, &config).unwrap();
        let coupled = NormConfig {
            mode: NormMode::Coupled,
            ..config
        };
        let base_coupled = compute_advantages(&groups, &coupled).unwrap();
        for kappa in [0.1, 10.0] {
            let scaled: Vec<Group> = groups
                .iter()
                .map(|g| {
                    let rewards = g
                        .rewards
                        .iter()
                        .map(|r| RewardVector {
                            speed: r.speed * kappa,
                            ..*r
                        })
                        .collect();
                    test_group(g.prompt_id, rewards)
                })
                .collect();
            let out = compute_advantages(&scaled, &config).unwrap();
            for (a, b) in out
                .advantages
                .iter()
                .flatten()
                .zip(base.advantages.iter().flatten())
            {
                assert!((a - b).abs() < 1e-9, "kappa {kappa}: {a} vs {b}");
            }
            // Coupled mode is sensitive to the rescaling; that asymmetry is
            // the point of decoupling.
            let out_coupled = compute_advantages(&scaled, &coupled).unwrap();
            let max_delta = out_coupled
                .advantages
                .iter()
                .flatten()
                .zip(base_coupled.advantages.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_delta > 1e-3, "kappa {kappa}: coupled unchanged");
        }
    }

    #[test]
    fn collapse_ratio_examples() {
        assert!((collapse_ratio(&[vec![0.5, 0.5, 1.0]], 1e-6).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(collapse_ratio(&[vec![0.0, 1.0, 2.0]], 0.5).unwrap(), 0.0);
        assert_eq!(collapse_ratio(&[vec![0.7, 0.7, 0.7]], 1e-9).unwrap(), 1.0);
        assert!(matches!(
            collapse_ratio(&[vec![1.0]], 0.1),
            Err(RlError::NoPairs)
        ));
    }

    #[test]
    fn zero_signal_fraction_counts_degenerate_groups() {
        let g_flat = test_group(0, vec![rv(1.0, 2.0); 3]);
        let g_live = test_group(1, vec![rv(1.0, 2.0), rv(-1.0, 3.0), rv(1.0, 2.5)]);
        let out = compute_advantages(&[g_flat, g_live], &NormConfig::default()).unwrap();
        assert_eq!(out.zero_signal_fraction(1e-9), 0.5);
    }
}
