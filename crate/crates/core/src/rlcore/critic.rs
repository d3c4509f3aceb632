//! Tabular value baseline and generalized advantage estimation.
//!
//! The critic buckets states by (prompt feature bucket, block index, masked
//! count in the active block) and learns with a half-MSE step per visit:
//! `V <- V - lr * (V - return)`. Rewards are terminal: the coupled total
//! reward lands on the last step, intermediate steps pay zero.

use super::Group;
use crate::domain::{Prompt, Trajectory};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub critic_learning_rate: f64,
    pub prompt_buckets: u64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        GaeConfig {
            gamma: 1.0,
            lambda: 1.0,
            critic_learning_rate: 0.1,
            prompt_buckets: 16,
        }
    }
}

/// Value estimates keyed by (prompt bucket, block index, masked-count bucket),
/// default-initialized to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticTable {
    values: BTreeMap<(u64, usize, usize), f64>,
    pub learning_rate: f64,
    prompt_buckets: u64,
}

impl CriticTable {
    pub fn new(learning_rate: f64, prompt_buckets: u64) -> Self {
        CriticTable {
            values: BTreeMap::new(),
            learning_rate,
            prompt_buckets: prompt_buckets.max(1),
        }
    }

    fn prompt_bucket(&self, prompt: &Prompt) -> u64 {
        // FNV-1a over the prompt tokens.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &t in &prompt.tokens {
            h ^= t as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h % self.prompt_buckets
    }

    fn step_key(
        &self,
        prompt: &Prompt,
        trajectory: &Trajectory,
        step: usize,
    ) -> (u64, usize, usize) {
        let record = &trajectory.steps[step];
        let block = record.masked_indices[0] / trajectory.block_size;
        (
            self.prompt_bucket(prompt),
            block,
            record.masked_indices.len(),
        )
    }

    pub fn value(&self, key: (u64, usize, usize)) -> f64 {
        self.values.get(&key).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.values().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-step advantages for every trajectory in the group, with a critic
/// update per visited state.
///
/// Advantages are computed against the table frozen at entry, then each
/// visited cell takes one half-MSE gradient step toward the discounted
/// return, in trajectory-then-step order. With `gamma = lambda = 1` and a
/// zero critic the per-step advantage equals the terminal total reward.
pub fn gae_advantages(
    group: &Group,
    prompt: &Prompt,
    critic: &mut CriticTable,
    config: &GaeConfig,
) -> Vec<Vec<f64>> {
    let frozen = critic.clone();
    let mut per_trajectory = Vec::with_capacity(group.trajectories.len());

    for (trajectory, reward) in group.trajectories.iter().zip(&group.rewards) {
        let total = reward.accuracy + reward.speed;
        let steps = trajectory.steps.len();
        let values: Vec<f64> = (0..steps)
            .map(|t| frozen.value(frozen.step_key(prompt, trajectory, t)))
            .collect();

        // Terminal reward only; V(s_T) = 0 past the last step.
        let mut advantages = vec![0.0; steps];
        let mut carry = 0.0;
        for t in (0..steps).rev() {
            let reward_t = if t == steps - 1 { total } else { 0.0 };
            let next_value = if t == steps - 1 { 0.0 } else { values[t + 1] };
            let delta = reward_t + config.gamma * next_value - values[t];
            carry = delta + config.gamma * config.lambda * carry;
            advantages[t] = carry;
        }
        per_trajectory.push(advantages);

        // Discounted return from each step (terminal reward only).
        for t in 0..steps {
            let ret = total * config.gamma.powi((steps - 1 - t) as i32);
            let key = critic.step_key(prompt, trajectory, t);
            let v = critic.value(key);
            critic
                .values
                .insert(key, v - critic.learning_rate * (v - ret));
        }
    }
    per_trajectory
}
