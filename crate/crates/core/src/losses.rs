//! Policy optimization losses over replayed decoding trajectories.
//!
//! Each trajectory is replayed against the recorded intermediate masked
//! states; the losses are then pure functions of per-token log-probabilities,
//! which keeps them unit-testable without a policy in hand. Gradients flow
//! only through the current-policy log-probabilities, and only through
//! accepted tokens at their recorded states; predictions at positions that
//! were re-masked carry no realized token and contribute no loss.
//!
//! Reduction conventions:
//! - Policy and KL terms live on the prediction universe. `Seq` divides each
//!   trajectory's sum by its total prediction count (masked slots summed over
//!   steps) and averages trajectories; `Tok` divides the batch sum by the
//!   batch-wide prediction count. The two coincide whenever all trajectories
//!   have equal prediction counts.
//! - The NLL anchor is normalized by accepted-token counts: per-trajectory
//!   mean then trajectory average under `Seq`, global token mean under `Tok`.
//!   It is exactly zero when no trajectory is verifier-correct.

use crate::domain::{MaskedState, Prompt, TokenId, Trajectory};
use crate::exec;
use crate::policy::{Features, GradAccumulator, PolicyParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("trajectory corrupted: {0}")]
    Corruption(String),
    #[error(transparent)]
    Task(#[from] crate::domain::TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Seq,
    Tok,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Per-token `r - log r - 1` with `r = p_ref / p_theta`; nonnegative and
    /// unbiased for the exact KL divergence.
    K3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub kl_estimator: KlEstimator,
    pub nll_coeff: f64,
    pub policy_reduction: Reduction,
    pub kl_reduction: Reduction,
    pub nll_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            clip_eps: 0.2,
            kl_coeff: 0.01,
            kl_estimator: KlEstimator::K3,
            nll_coeff: 0.1,
            policy_reduction: Reduction::Seq,
            kl_reduction: Reduction::Tok,
            nll_reduction: Reduction::Tok,
        }
    }
}

/// One accepted token with everything the losses need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenLossRecord {
    /// Index of the owning trajectory within the batch.
    pub trajectory: usize,
    pub step: usize,
    pub position: usize,
    pub new_logprob: f64,
    pub old_logprob: f64,
    pub ref_logprob: f64,
    /// Trajectory advantage, shared across its tokens (per-step under GAE).
    pub advantage: f64,
}

/// Per-trajectory counts the reductions divide by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajMeta {
    pub prediction_count: usize,
    pub accepted_count: usize,
    pub correct: bool,
}

/// A scalar loss with its gradient in record space:
/// `coeffs[i] = d value / d new_logprob[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub coeffs: Vec<f64>,
}

impl LossTerm {
    fn zeros(n: usize) -> Self {
        LossTerm {
            value: 0.0,
            coeffs: vec![0.0; n],
        }
    }
}

fn prediction_weights(
    records: &[TokenLossRecord],
    meta: &[TrajMeta],
    reduction: Reduction,
) -> Vec<f64> {
    match reduction {
        Reduction::Seq => {
            let n_traj = meta.len() as f64;
            records
                .iter()
                .map(|r| 1.0 / (n_traj * meta[r.trajectory].prediction_count as f64))
                .collect()
        }
        Reduction::Tok => {
            let total: usize = meta.iter().map(|m| m.prediction_count).sum();
            vec![1.0 / total as f64; records.len()]
        }
    }
}

/// Clipped-surrogate policy loss. The per-token term is
/// `min(rho * A, clip(rho, 1-eps, 1+eps) * A)`; gradient flows only where the
/// min selects the unclipped branch (ties included, so the on-policy point
/// keeps its score-function gradient).
pub fn policy_loss(
    records: &[TokenLossRecord],
    meta: &[TrajMeta],
    config: &LossConfig,
) -> LossTerm {
    if records.is_empty() {
        return LossTerm::zeros(0);
    }
    let weights = prediction_weights(records, meta, config.policy_reduction);
    let mut value = 0.0;
    let mut coeffs = vec![0.0; records.len()];
    for (i, r) in records.iter().enumerate() {
        let ratio = (r.new_logprob - r.old_logprob).exp();
        let clipped_ratio = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
        let unclipped = ratio * r.advantage;
        let clipped = clipped_ratio * r.advantage;
        if unclipped <= clipped {
            value -= weights[i] * unclipped;
            coeffs[i] = -weights[i] * ratio * r.advantage;
        } else {
            value -= weights[i] * clipped;
        }
    }
    LossTerm { value, coeffs }
}

/// Fraction of records where the clip was strictly active, plus the mean
/// absolute deviation of the importance ratio from 1.
pub fn ratio_diagnostics(records: &[TokenLossRecord], config: &LossConfig) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let mut clipped = 0usize;
    let mut dev = 0.0;
    for r in records {
        let ratio = (r.new_logprob - r.old_logprob).exp();
        let clipped_ratio = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
        if clipped_ratio * r.advantage < ratio * r.advantage {
            clipped += 1;
        }
        dev += (ratio - 1.0).abs();
    }
    (
        clipped as f64 / records.len() as f64,
        dev / records.len() as f64,
    )
}

/// KL penalty against the reference policy via the k3 estimator, unscaled;
/// the combined loss applies the beta coefficient.
pub fn kl_penalty(records: &[TokenLossRecord], meta: &[TrajMeta], config: &LossConfig) -> LossTerm {
    if records.is_empty() {
        return LossTerm::zeros(0);
    }
    let KlEstimator::K3 = config.kl_estimator;
    let weights = prediction_weights(records, meta, config.kl_reduction);
    let mut value = 0.0;
    let mut coeffs = vec![0.0; records.len()];
    for (i, r) in records.iter().enumerate() {
        let log_r = r.ref_logprob - r.new_logprob;
        let ratio = log_r.exp();
        value += weights[i] * (ratio - log_r - 1.0);
        coeffs[i] = weights[i] * (1.0 - ratio);
    }
    LossTerm { value, coeffs }
}

/// Token-level negative log-likelihood over verifier-correct trajectories.
/// Returns exactly zero (value and gradient) when none are correct.
pub fn nll_anchor(records: &[TokenLossRecord], meta: &[TrajMeta], config: &LossConfig) -> LossTerm {
    let n_correct = meta.iter().filter(|m| m.correct).count();
    if n_correct == 0 || records.is_empty() {
        return LossTerm::zeros(records.len());
    }
    let weight_for = |r: &TokenLossRecord| -> f64 {
        if !meta[r.trajectory].correct {
            return 0.0;
        }
        match config.nll_reduction {
            Reduction::Seq => 1.0 / (n_correct as f64 * meta[r.trajectory].accepted_count as f64),
            Reduction::Tok => {
                let total: usize = meta
                    .iter()
                    .filter(|m| m.correct)
                    .map(|m| m.accepted_count)
                    .sum();
                1.0 / total as f64
            }
        }
    };
    let mut value = 0.0;
    let mut coeffs = vec![0.0; records.len()];
    for (i, r) in records.iter().enumerate() {
        let w = weight_for(r);
        if w != 0.0 {
            value -= w * r.new_logprob;
            coeffs[i] = -w;
        }
    }
    LossTerm { value, coeffs }
}

/// Per-minibatch loss diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub policy: f64,
    pub kl: f64,
    pub nll: f64,
    pub clipped_fraction: f64,
    pub mean_ratio_dev: f64,
}

/// Weighted sum of the three components with per-component reductions.
/// Returns the breakdown and the record-space gradient of the total.
pub fn combined_loss(
    records: &[TokenLossRecord],
    meta: &[TrajMeta],
    config: &LossConfig,
) -> (LossBreakdown, Vec<f64>) {
    let policy = policy_loss(records, meta, config);
    let kl = kl_penalty(records, meta, config);
    let nll = nll_anchor(records, meta, config);
    let (clipped_fraction, mean_ratio_dev) = ratio_diagnostics(records, config);
    let coeffs: Vec<f64> = (policy.coeffs.iter())
        .zip(&kl.coeffs)
        .zip(&nll.coeffs)
        .map(|((p, k), n)| p + config.kl_coeff * k + config.nll_coeff * n)
        .collect();
    (
        LossBreakdown {
            total: policy.value + config.kl_coeff * kl.value + config.nll_coeff * nll.value,
            policy: policy.value,
            kl: kl.value,
            nll: nll.value,
            clipped_fraction,
            mean_ratio_dev,
        },
        coeffs,
    )
}

/// One replayed accepted token: the current-policy log-probability plus what
/// the parameter gradient needs (active features and the full softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayedToken {
    pub step: usize,
    pub position: usize,
    pub token: TokenId,
    pub logprob: f64,
    pub probs: Vec<f64>,
    pub features: Features,
}

/// Replay a trajectory under `params`: reconstruct every intermediate state
/// from the accepted history and evaluate the policy on the same masked
/// positions. Any mismatch with the recorded masked sets is a corruption
/// error.
pub fn replay_trajectory(
    params: &PolicyParams,
    prompt: &Prompt,
    trajectory: &Trajectory,
) -> Result<Vec<ReplayedToken>, ReplayError> {
    let vocab = params.vocab();
    let len = trajectory.final_tokens.len();
    let mut state = MaskedState::new_fully_masked(len, trajectory.block_size, vocab)?;
    let mut out = Vec::with_capacity(trajectory.decoded_tokens);

    for record in &trajectory.steps {
        let first = *record.masked_indices.first().ok_or_else(|| {
            ReplayError::Corruption(format!("step {} has empty masked set", record.step_index))
        })?;
        let block = state.block_of(first);
        if record
            .masked_indices
            .iter()
            .any(|&p| state.block_of(p) != block)
        {
            return Err(ReplayError::Corruption(format!(
                "step {} spans multiple blocks",
                record.step_index
            )));
        }
        state.active_block = block;
        let masked = state.masked_in_active_block(vocab);
        if masked != record.masked_indices {
            return Err(ReplayError::Corruption(format!(
                "step {}: reconstructed masked set {:?} != recorded {:?}",
                record.step_index, masked, record.masked_indices
            )));
        }
        for acc in &record.accepted {
            let features = params.spec().extract(prompt, &state, acc.position);
            let probs = params.distribution(prompt, &state, acc.position);
            out.push(ReplayedToken {
                step: record.step_index,
                position: acc.position,
                token: acc.token,
                logprob: probs[acc.token as usize].ln(),
                probs,
                features,
            });
        }
        for acc in &record.accepted {
            if state.tokens[acc.position] != vocab.mask_id() {
                return Err(ReplayError::Corruption(format!(
                    "step {} accepts already-decoded position {}",
                    record.step_index, acc.position
                )));
            }
            state.tokens[acc.position] = acc.token;
        }
    }
    if state.tokens != trajectory.final_tokens {
        return Err(ReplayError::Corruption(
            "replayed tokens do not match final tokens".into(),
        ));
    }
    Ok(out)
}

/// Current-policy log-probabilities of the accepted tokens, in record order.
/// With the behavior snapshot this reproduces the stored values bit-for-bit.
pub fn recompute_logprobs(
    params: &PolicyParams,
    trajectory: &Trajectory,
    prompt: &Prompt,
) -> Result<Vec<f64>, ReplayError> {
    Ok(replay_trajectory(params, prompt, trajectory)?
        .into_iter()
        .map(|t| t.logprob)
        .collect())
}

/// Advantage attachment for one trajectory.
#[derive(Debug, Clone)]
pub enum AdvantageAttach<'a> {
    /// Group-relative advantage shared by every token of the trajectory.
    Shared(f64),
    /// Per-step advantages (critic/GAE mode), indexed by step position
    /// within the trajectory.
    PerStep(&'a [f64]),
}

/// One trajectory ready for loss evaluation.
pub struct BatchItem<'a> {
    pub prompt: &'a Prompt,
    pub trajectory: &'a Trajectory,
    pub advantage: AdvantageAttach<'a>,
    /// Reference-policy log-probabilities in record order.
    pub ref_logprobs: &'a [f64],
    pub correct: bool,
}

/// Records plus everything needed to push the record-space gradient back
/// onto the parameters.
pub struct ReplayBatch {
    pub records: Vec<TokenLossRecord>,
    pub meta: Vec<TrajMeta>,
    grads: Vec<(Features, Vec<f64>, TokenId)>,
}

/// Replay every trajectory under the current parameters (in parallel,
/// collected in batch order) and assemble the loss records.
pub fn build_replay_batch(
    params: &PolicyParams,
    items: &[BatchItem<'_>],
) -> Result<ReplayBatch, ReplayError> {
    let replayed = exec::map_indexed(items.len(), |i| {
        replay_trajectory(params, items[i].prompt, items[i].trajectory)
    });
    let mut records = Vec::new();
    let mut meta = Vec::new();
    let mut grads = Vec::new();
    for (traj_index, (item, tokens)) in items.iter().zip(replayed).enumerate() {
        let tokens = tokens?;
        meta.push(TrajMeta {
            prediction_count: item.trajectory.prediction_count(),
            accepted_count: item.trajectory.accepted_count(),
            correct: item.correct,
        });
        // Stored behavior log-probs in the same accepted-token order.
        let mut step_of_token = Vec::with_capacity(tokens.len());
        let mut old_logprobs = Vec::with_capacity(tokens.len());
        for step in &item.trajectory.steps {
            for acc in &step.accepted {
                old_logprobs.push(acc.logprob);
                step_of_token.push(step.step_index);
            }
        }
        if old_logprobs.len() != tokens.len() {
            return Err(ReplayError::Corruption(
                "replayed token count differs from stored".into(),
            ));
        }
        if item.ref_logprobs.len() != tokens.len() {
            return Err(ReplayError::Corruption(
                "reference logprob count differs from replayed tokens".into(),
            ));
        }
        let step_index_within: Vec<usize> = {
            // Map absolute step index to index within this trajectory.
            let mut map = std::collections::BTreeMap::new();
            for (i, step) in item.trajectory.steps.iter().enumerate() {
                map.insert(step.step_index, i);
            }
            step_of_token.iter().map(|s| map[s]).collect()
        };
        for (k, token) in tokens.into_iter().enumerate() {
            let advantage = match &item.advantage {
                AdvantageAttach::Shared(a) => *a,
                AdvantageAttach::PerStep(steps) => steps[step_index_within[k]],
            };
            records.push(TokenLossRecord {
                trajectory: traj_index,
                step: token.step,
                position: token.position,
                new_logprob: token.logprob,
                old_logprob: old_logprobs[k],
                ref_logprob: item.ref_logprobs[k],
                advantage,
            });
            grads.push((token.features, token.probs, token.token));
        }
    }
    Ok(ReplayBatch {
        records,
        meta,
        grads,
    })
}

impl ReplayBatch {
    /// Push record-space coefficients through the stored per-token softmax
    /// gradients into one parameter-space accumulator. Accumulation runs in
    /// record order so the result is bit-stable.
    pub fn accumulate_gradient(&self, params: &PolicyParams, coeffs: &[f64]) -> GradAccumulator {
        debug_assert_eq!(coeffs.len(), self.records.len());
        let mut grad = GradAccumulator::zeros(params.spec());
        for ((features, probs, token), &coeff) in self.grads.iter().zip(coeffs) {
            if coeff != 0.0 {
                grad.add_logprob_grad(features, probs, *token, coeff);
            }
        }
        grad
    }
}
