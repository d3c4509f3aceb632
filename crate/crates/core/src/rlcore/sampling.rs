//! Dynamic sampling: accept-reject over candidate prompt groups.
//!
//! A candidate group is accepted when its TPF spread (or variance) clears the
//! configured threshold and, when required, at least one member is correct.
//! Rejected groups are discarded whole and a fresh prompt is drawn. Candidate
//! chunks roll out in parallel but acceptance is committed in draw order, so
//! the result and the number of prompts consumed are independent of worker
//! count.

use super::{Group, RlError};
use crate::domain::Prompt;
use crate::exec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCriterion {
    /// Accept when `max TPF - min TPF >= delta`.
    Spread,
    /// Accept when the population variance of TPF is at least the threshold.
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Disabled filtering accepts every candidate group (ablation arm).
    pub enabled: bool,
    pub criterion: FilterCriterion,
    pub delta: f64,
    pub variance_threshold: f64,
    pub require_one_correct: bool,
    /// Total candidate budget is `target * max_resamples_per_slot`.
    pub max_resamples_per_slot: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            enabled: true,
            criterion: FilterCriterion::Spread,
            delta: 0.01,
            variance_threshold: 0.01,
            require_one_correct: true,
            max_resamples_per_slot: 64,
        }
    }
}

/// Acceptance-rate bookkeeping, reported per iteration and carried by
/// exhaustion errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    pub candidates: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
}

/// Whether a rolled-out group satisfies the configured criteria.
pub fn group_passes(config: &FilterConfig, group: &Group) -> bool {
    if !config.enabled {
        return true;
    }
    if config.require_one_correct && group.correct_count() == 0 {
        return false;
    }
    let tpfs = group.tpf_values();
    match config.criterion {
        FilterCriterion::Spread => group.tpf_spread() >= config.delta,
        FilterCriterion::Variance => {
            let n = tpfs.len() as f64;
            let mean = tpfs.iter().sum::<f64>() / n;
            let var = tpfs.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
            var >= config.variance_threshold
        }
    }
}

/// Fill `target` accepted groups from a prompt stream.
///
/// `next_prompt` supplies candidates in a deterministic draw order;
/// `rollout` turns a candidate into a group (it runs concurrently across
/// candidates and must derive its own randomness from the prompt, not from
/// shared state). Returns the accepted groups in draw order together with
/// acceptance diagnostics, or an exhaustion error once the candidate budget
/// is spent.
pub fn dynamic_sample<S, F>(
    mut next_prompt: S,
    rollout: F,
    config: &FilterConfig,
    target: usize,
) -> Result<(Vec<Group>, SampleDiagnostics), RlError>
where
    S: FnMut() -> Prompt,
    F: Fn(&Prompt) -> Result<Group, RlError> + Sync,
{
    assert!(target >= 1, "target batch size must be >= 1");
    let budget = target * config.max_resamples_per_slot.max(1);
    let mut accepted: Vec<Group> = Vec::with_capacity(target);
    let mut candidates = 0usize;

    while accepted.len() < target {
        let remaining_budget = budget - candidates;
        if remaining_budget == 0 {
            return Err(RlError::ResampleExhausted {
                candidates,
                accepted: accepted.len(),
                acceptance_rate: accepted.len() as f64 / candidates.max(1) as f64,
            });
        }
        // Chunk size depends only on progress, never on worker count.
        let chunk = (target - accepted.len()).min(remaining_budget);
        let prompts: Vec<Prompt> = (0..chunk).map(|_| next_prompt()).collect();
        candidates += chunk;
        let groups = exec::map_indexed(chunk, |i| rollout(&prompts[i]));
        for group in groups {
            let group = group?;
            if accepted.len() < target && group_passes(config, &group) {
                accepted.push(group);
            }
        }
    }

    let diagnostics = SampleDiagnostics {
        candidates,
        accepted: accepted.len(),
        acceptance_rate: accepted.len() as f64 / candidates as f64,
    };
    Ok((accepted, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RewardVector, TaskKind};
    use crate::rlcore::test_group;

    fn rv(correct: bool, speed: f64) -> RewardVector {
        RewardVector {
            accuracy: if correct { 1.0 } else { -1.0 },
            speed,
            correct,
        }
    }

    fn prompt(id: u64) -> Prompt {
        Prompt {
            id,
            kind: TaskKind::Copy,
            tokens: vec![1, 2],
            target: vec![1, 2],
        }
    }

    #[test]
    fn near_tied_spread_is_rejected() {
        let config = FilterConfig::default();
        let group = test_group(0, vec![rv(true, 3.0), rv(false, 3.005)]);
        assert!(!group_passes(&config, &group));
    }

    #[test]
    fn all_incorrect_group_is_rejected_despite_spread() {
        let config = FilterConfig::default();
        let group = test_group(0, vec![rv(false, 1.0), rv(false, 6.0)]);
        assert!(!group_passes(&config, &group));
    }

    #[test]
    fn spread_and_correctness_satisfied_is_accepted() {
        let config = FilterConfig::default();
        let group = test_group(0, vec![rv(true, 1.0), rv(true, 4.0)]);
        assert!(group_passes(&config, &group));
    }

    #[test]
    fn variance_criterion() {
        let config = FilterConfig {
            criterion: FilterCriterion::Variance,
            variance_threshold: 0.01,
            ..FilterConfig::default()
        };
        // Variance of {2.0, 2.1} is 0.0025 < 0.01.
        assert!(!group_passes(
            &config,
            &test_group(0, vec![rv(true, 2.0), rv(true, 2.1)])
        ));
        // Variance of {2.0, 2.4} is 0.04 >= 0.01.
        assert!(group_passes(
            &config,
            &test_group(0, vec![rv(true, 2.0), rv(true, 2.4)])
        ));
    }

    #[test]
    fn disabled_filter_accepts_everything() {
        let config = FilterConfig {
            enabled: false,
            ..FilterConfig::default()
        };
        assert!(group_passes(
            &config,
            &test_group(0, vec![rv(false, 2.0), rv(false, 2.0)])
        ));
    }

    #[test]
    fn fills_batch_in_draw_order() {
        let config = FilterConfig::default();
        let mut next_id = 0u64;
        let (groups, diag) = dynamic_sample(
            || {
                let p = prompt(next_id);
                next_id += 1;
                p
            },
            |p| {
                // Odd-id prompts produce degenerate groups.
                if p.id % 2 == 1 {
                    Ok(test_group(p.id, vec![rv(true, 2.0), rv(true, 2.0)]))
                } else {
                    Ok(test_group(p.id, vec![rv(true, 1.0), rv(true, 4.0)]))
                }
            },
            &config,
            3,
        )
        .unwrap();
        let ids: Vec<u64> = groups.iter().map(|g| g.prompt_id).collect();
        assert_eq!(ids, vec![0, 2, 4]);
        assert_eq!(diag.accepted, 3);
        assert!(diag.candidates >= 5);
        assert!((diag.acceptance_rate - 3.0 / diag.candidates as f64).abs() < 1e-12);
    }

    #[test]
    fn exhaustion_carries_diagnostics() {
        let config = FilterConfig {
            max_resamples_per_slot: 4,
            ..FilterConfig::default()
        };
        let mut next_id = 0u64;
        let err = dynamic_sample(
            || {
                let p = prompt(next_id);
                next_id += 1;
                p
            },
            |p| Ok(test_group(p.id, vec![rv(false, 1.0), rv(false, 4.0)])),
            &config,
            2,
        )
        .unwrap_err();
        match err {
            RlError::ResampleExhausted {
                candidates,
                accepted,
                acceptance_rate,
            } => {
                assert_eq!(candidates, 8);
                assert_eq!(accepted, 0);
                assert_eq!(acceptance_rate, 0.0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn emitted_groups_always_satisfy_the_filter() {
        for criterion in [FilterCriterion::Spread, FilterCriterion::Variance] {
            let config = FilterConfig {
                criterion,
                ..FilterConfig::default()
            };
            let mut rng = crate::rng::StreamRng::from_key(&[criterion as u64, 5]);
            let mut next_id = 0u64;
            let mut draw = move || {
                let p = prompt(next_id);
                next_id += 1;
                p
            };
            let (groups, _) = dynamic_sample(
                &mut draw,
                |p| {
                    let mut local = crate::rng::StreamRng::from_key(&[p.id, 99]);
                    let rewards = (0..4)
                        .map(|_| rv(local.next_f64() < 0.5, 1.0 + 3.0 * local.next_f64()))
                        .collect();
                    Ok(test_group(p.id, rewards))
                },
                &config,
                8,
            )
            .unwrap();
            let _ = rng.next_u64();
            assert_eq!(groups.len(), 8);
            for g in &groups {
                assert!(group_passes(&config, g));
            }
        }
    }
}
