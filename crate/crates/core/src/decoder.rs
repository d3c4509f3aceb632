//! Block-wise confidence-driven parallel decoding, plus the parallelism and
//! quality metrics derived from trajectories.
//!
//! Blocks are generated left to right. Within a block, each step runs one
//! forward pass over the currently masked positions, draws a candidate token
//! per position, and commits every candidate whose confidence clears the
//! threshold; the rest stay masked for the next step. When nothing clears the
//! threshold the single highest-confidence candidate is committed so decoding
//! always terminates (ties break toward the lowest position).
//!
//! Confidence and the stored behavior log-probability are the untempered
//! model probability of the drawn token; sampling temperature only shapes the
//! draw. Greedy mode takes the argmax and consumes no randomness.

use crate::domain::{
    verify, AcceptedToken, MaskedState, Prompt, StepRecord, Trajectory, VerifierMode,
};
use crate::exec;
use crate::policy::PolicySnapshot;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("prompt/policy mismatch: {0}")]
    PromptMismatch(String),
    #[error("metric requires a non-empty sample set")]
    EmptySampleSet,
    #[error(transparent)]
    Task(#[from] crate::domain::TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Sample,
    Greedy,
}

/// Decoding hyperparameters. The meaningful threshold range is `(0, 1]`;
/// `0` is the accept-all limit and values above `1` force the one-token
/// fallback on every step, both of which the metrics tests rely on.
/// A `max_steps_per_block` of 0 means "equal to the block size", the tightest
/// bound the progress guarantee allows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub block_size: usize,
    pub confidence_threshold: f64,
    pub max_steps_per_block: usize,
    pub temperature: f64,
    pub mode: DecodeMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            block_size: 4,
            confidence_threshold: 0.9,
            max_steps_per_block: 0,
            temperature: 1.0,
            mode: DecodeMode::Sample,
        }
    }
}

impl DecodeConfig {
    pub fn effective_max_steps(&self) -> usize {
        if self.max_steps_per_block == 0 {
            self.block_size
        } else {
            self.max_steps_per_block
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.block_size == 0 {
            return Err(DecodeError::InvalidConfig("block_size must be >= 1".into()));
        }
        if self.effective_max_steps() < self.block_size {
            return Err(DecodeError::InvalidConfig(format!(
                "max_steps_per_block {} < block_size {} breaks the completion guarantee",
                self.max_steps_per_block, self.block_size
            )));
        }
        if !(self.confidence_threshold >= 0.0 && self.confidence_threshold.is_finite()) {
            return Err(DecodeError::InvalidConfig(
                "confidence_threshold must be finite and >= 0".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DecodeError::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }

    pub fn greedy(&self) -> DecodeConfig {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            ..*self
        }
    }

    pub fn with_threshold(&self, threshold: f64) -> DecodeConfig {
        DecodeConfig {
            confidence_threshold: threshold,
            ..*self
        }
    }
}

fn argmax_content(probs: &[f64], mask: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_p = f64::NEG_INFINITY;
    for (i, &p) in probs.iter().enumerate() {
        if i != mask && p > best_p {
            best = i;
            best_p = p;
        }
    }
    best
}

fn tempered(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return probs.to_vec();
    }
    let inv = 1.0 / temperature;
    let mut out: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { p.powf(inv) } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= sum;
    }
    out
}

/// Decode one full response for a prompt. Deterministic given
/// `(policy, prompt, config, seed)`.
pub fn decode(
    policy: &PolicySnapshot,
    prompt: &Prompt,
    config: &DecodeConfig,
    seed: u64,
) -> Result<Trajectory, DecodeError> {
    config.validate()?;
    let params = policy.params();
    let vocab = params.vocab();
    let len = prompt.response_len();
    if len != params.spec().response_len() {
        return Err(DecodeError::PromptMismatch(format!(
            "prompt response length {len} != policy feature map length {}",
            params.spec().response_len()
        )));
    }
    if !len.is_multiple_of(config.block_size) {
        return Err(DecodeError::PromptMismatch(format!(
            "response length {len} not a multiple of block size {}",
            config.block_size
        )));
    }

    let mut state = MaskedState::new_fully_masked(len, config.block_size, vocab)?;
    let mut rng = StreamRng::from_key(&[seed]);
    let mut steps: Vec<StepRecord> = Vec::new();
    let mask = vocab.mask_id() as usize;

    for block in 0..state.num_blocks() {
        state.active_block = block;
        let mut steps_in_block = 0usize;
        loop {
            let masked = state.masked_in_active_block(vocab);
            if masked.is_empty() {
                break;
            }
            // The fallback commits at least one token per step, so a block of
            // size B always completes within B steps.
            assert!(
                steps_in_block < config.effective_max_steps(),
                "block {block} not completed within {} steps",
                config.effective_max_steps()
            );

            let dists = params
                .forward(prompt, &state)
                .map_err(|e| DecodeError::PromptMismatch(e.to_string()))?;
            let mut candidates: Vec<AcceptedToken> = Vec::with_capacity(dists.len());
            for d in &dists {
                let token = match config.mode {
                    DecodeMode::Greedy => argmax_content(&d.probs, mask),
                    DecodeMode::Sample => {
                        let draw_probs = tempered(&d.probs, config.temperature);
                        rng.sample_categorical(&draw_probs)
                    }
                };
                let confidence = d.probs[token];
                candidates.push(AcceptedToken {
                    position: d.position,
                    token: token as u32,
                    logprob: confidence.ln(),
                    confidence,
                });
            }

            let mut accepted: Vec<AcceptedToken> = candidates
                .iter()
                .copied()
                .filter(|c| c.confidence >= config.confidence_threshold)
                .collect();
            if accepted.is_empty() {
                // Highest confidence wins; candidates are position-ascending,
                // so strict comparison keeps the lowest position on ties.
                let best = candidates
                    .iter()
                    .copied()
                    .reduce(|a, b| if b.confidence > a.confidence { b } else { a })
                    .expect("masked set is non-empty");
                accepted.push(best);
            }

            steps.push(StepRecord {
                step_index: steps.len(),
                masked_indices: masked.clone(),
                accepted: accepted.clone(),
                rejected_count: masked.len() - accepted.len(),
            });
            for acc in &accepted {
                state.tokens[acc.position] = acc.token;
            }
            steps_in_block += 1;
            debug_assert!(state.validate(vocab).is_ok());
        }
    }
    state.active_block = state.num_blocks();
    debug_assert!(state.validate(vocab).is_ok());

    Ok(Trajectory {
        prompt_id: prompt.id,
        block_size: config.block_size,
        forwards: steps.len(),
        decoded_tokens: len,
        steps,
        final_tokens: state.tokens,
        seed,
    })
}

/// Tokens per forward: committed tokens divided by forward passes.
pub fn tpf(trajectory: &Trajectory) -> f64 {
    trajectory.decoded_tokens as f64 / trajectory.forwards as f64
}

/// Accuracy under parallelism, product form:
/// `100 * mean_i(correct_i * tpf_i)`.
pub fn aup(samples: &[(bool, f64)]) -> Result<f64, DecodeError> {
    if samples.is_empty() {
        return Err(DecodeError::EmptySampleSet);
    }
    let sum: f64 = samples
        .iter()
        .map(|&(correct, tpf)| if correct { tpf } else { 0.0 })
        .sum();
    Ok(100.0 * sum / samples.len() as f64)
}

/// One evaluated operating point of the accuracy/parallelism trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub threshold: f64,
    pub accuracy_pct: f64,
    pub mean_tpf: f64,
    pub aup: f64,
}

/// Greedy-mode evaluation of a policy across an ascending list of confidence
/// thresholds.
pub fn frontier_sweep(
    policy: &PolicySnapshot,
    prompts: &[Prompt],
    verifier: VerifierMode,
    thresholds: &[f64],
    base_config: &DecodeConfig,
) -> Result<Vec<FrontierRow>, DecodeError> {
    if prompts.is_empty() {
        return Err(DecodeError::EmptySampleSet);
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DecodeError::InvalidConfig(
            "thresholds must be strictly increasing".into(),
        ));
    }
    let vocab = policy.params().vocab();
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let config = base_config.greedy().with_threshold(threshold);
        let decoded = exec::map_indexed(prompts.len(), |i| {
            let trajectory = decode(policy, &prompts[i], &config, 0)?;
            let (_, correct) = verify(&prompts[i], &trajectory.final_tokens, verifier, vocab)?;
            Ok::<(bool, f64), DecodeError>((correct, tpf(&trajectory)))
        });
        let mut samples = Vec::with_capacity(decoded.len());
        for d in decoded {
            samples.push(d?);
        }
        let accuracy_pct =
            100.0 * samples.iter().filter(|s| s.0).count() as f64 / samples.len() as f64;
        let mean_tpf = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
        rows.push(FrontierRow {
            threshold,
            accuracy_pct,
            mean_tpf,
            aup: aup(&samples)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_prompt_set, TaskKind, Vocab};
    use crate::policy::{snapshot, FeatureSpec, PolicyParams};

    fn uniform_policy(vocab_size: u32, len: usize) -> (Vocab, PolicySnapshot, Vec<Prompt>) {
        let vocab = Vocab::with_trailing_mask(vocab_size).unwrap();
        let spec = FeatureSpec::new(len, vocab);
        let params = PolicyParams::zeros(spec);
        let prompts = make_prompt_set(TaskKind::Reverse, 4, len, vocab, 7).unwrap();
        (vocab, snapshot(&params), prompts)
    }

    #[test]
    fn accept_all_limit_gives_block_size_tpf() {
        let (vocab, policy, prompts) = uniform_policy(5, 8);
        let config = DecodeConfig {
            block_size: 4,
            confidence_threshold: 0.0,
            max_steps_per_block: 4,
            temperature: 1.0,
            mode: DecodeMode::Sample,
        };
        let traj = decode(&policy, &prompts[0], &config, 3).unwrap();
        traj.validate(vocab).unwrap();
        assert_eq!(traj.forwards, 2);
        assert_eq!(tpf(&traj), 4.0);
    }

    #[test]
    fn accept_none_limit_gives_unit_tpf() {
        let (vocab, policy, prompts) = uniform_policy(5, 8);
        let config = DecodeConfig {
            block_size: 4,
            confidence_threshold: 1.1,
            max_steps_per_block: 4,
            temperature: 1.0,
            mode: DecodeMode::Sample,
        };
        let traj = decode(&policy, &prompts[0], &config, 3).unwrap();
        traj.validate(vocab).unwrap();
        assert_eq!(traj.forwards, 8);
        assert_eq!(tpf(&traj), 1.0);
    }

    #[test]
    fn uniform_policy_fallback_matches_hand_simulation() {
        // Uniform over 4 content tokens: every confidence is 0.25 < 0.9, so
        // the fallback fires each step. Hand simulation for L=4, block 4:
        // masked sets shrink 4,3,2,1; the fallback tie-break picks the lowest
        // masked position each time.
        let (vocab, policy, prompts) = uniform_policy(5, 4);
        let config = DecodeConfig {
            block_size: 4,
            confidence_threshold: 0.9,
            max_steps_per_block: 4,
            temperature: 1.0,
            mode: DecodeMode::Greedy,
        };
        let traj = decode(&policy, &prompts[0], &config, 0).unwrap();
        traj.validate(vocab).unwrap();
        assert_eq!(traj.forwards, 4);
        assert_eq!(tpf(&traj), 1.0);
        assert_eq!(traj.prediction_count(), 10);
        let masked_sizes: Vec<usize> = traj.steps.iter().map(|s| s.masked_indices.len()).collect();
        assert_eq!(masked_sizes, vec![4, 3, 2, 1]);
        for (i, step) in traj.steps.iter().enumerate() {
            assert_eq!(step.accepted.len(), 1);
            assert_eq!(step.accepted[0].position, i);
            assert!((step.accepted[0].confidence - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn tpf_is_a_plain_ratio() {
        let mk = |decoded: usize, forwards: usize| Trajectory {
            prompt_id: 0,
            block_size: 4,
            steps: Vec::new(),
            final_tokens: Vec::new(),
            forwards,
            decoded_tokens: decoded,
            seed: 0,
        };
        assert_eq!(tpf(&mk(32, 8)), 4.0);
        assert_eq!(tpf(&mk(8, 8)), 1.0);
        assert!((tpf(&mk(8, 3)) - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aup_product_form() {
        assert_eq!(aup(&[(true, 2.0), (true, 4.0)]).unwrap(), 300.0);
        assert_eq!(aup(&[(false, 3.0), (false, 9.0)]).unwrap(), 0.0);
        assert!(matches!(aup(&[]), Err(DecodeError::EmptySampleSet)));
    }

    #[test]
    fn aup_product_form_tracks_published_operating_point() {
        // A published operating point of 88.9% accuracy at mean TPF 2.85
        // reports AUP 252.5; the product form with uniform per-sample TPF
        // lands within 1% (per-sample TPF variation explains the rest).
        let samples: Vec<(bool, f64)> = (0..1000).map(|i| (i < 889, 2.85)).collect();
        let value = aup(&samples).unwrap();
        assert!((value - 253.365).abs() < 1e-9);
        assert!((value - 252.5).abs() / 252.5 < 0.01);
    }

    #[test]
    fn decode_is_deterministic_per_seed() {
        let (_vocab, policy, prompts) = uniform_policy(6, 8);
        let config = DecodeConfig::default();
        let a = decode(&policy, &prompts[1], &config, 11).unwrap();
        let b = decode(&policy, &prompts[1], &config, 11).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = decode(&policy, &prompts[1], &config, 12).unwrap();
        assert_ne!(a.final_tokens, c.final_tokens);
    }

    #[test]
    fn trajectory_dump_round_trips() {
        use crate::domain::{read_trajectories_jsonl, write_trajectories_jsonl};
        let (_vocab, policy, prompts) = uniform_policy(6, 8);
        let config = DecodeConfig::default();
        let trajectories: Vec<Trajectory> = prompts
            .iter()
            .enumerate()
            .map(|(i, p)| decode(&policy, p, &config, i as u64).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_trajectories_jsonl(&mut buf, &trajectories).unwrap();
        let back = read_trajectories_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(trajectories, back);
    }

    #[test]
    fn frontier_limits_and_monotonicity() {
        // Tiny instance, exhaustive threshold sweep: mean TPF must never
        // increase as the threshold rises.
        let vocab = Vocab::with_trailing_mask(4).unwrap();
        let spec = FeatureSpec::new(4, vocab);
        let mut params = PolicyParams::zeros(spec);
        // Structured non-uniform policy: favor the prompt token a bit.
        for f in 0..spec.feature_dim() {
            for y in 0..3 {
                *params.weight_mut(f, y) = ((f + y) % 5) as f64 * 0.3;
            }
        }
        let policy = snapshot(&params);
        let prompts = make_prompt_set(TaskKind::Copy, 6, 4, vocab, 3).unwrap();
        let thresholds: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let config = DecodeConfig {
            block_size: 4,
            confidence_threshold: 0.9,
            max_steps_per_block: 4,
            temperature: 1.0,
            mode: DecodeMode::Greedy,
        };
        let rows = frontier_sweep(
            &policy,
            &prompts,
            VerifierMode::Binary,
            &thresholds,
            &config,
        )
        .unwrap();
        assert_eq!(rows[0].mean_tpf, 4.0);
        assert_eq!(rows.last().unwrap().mean_tpf, 1.0);
        for pair in rows.windows(2) {
            assert!(
                pair[1].mean_tpf <= pair[0].mean_tpf + 1e-12,
                "TPF increased from {} to {} at threshold {}",
                pair[0].mean_tpf,
                pair[1].mean_tpf,
                pair[1].threshold
            );
        }
    }

    #[test]
    fn sweep_rejects_non_increasing_thresholds() {
        let (_vocab, policy, prompts) = uniform_policy(5, 4);
        let config = DecodeConfig::default();
        let err = frontier_sweep(
            &policy,
            &prompts,
            VerifierMode::Binary,
            &[0.5, 0.5],
            &config,
        );
        assert!(matches!(err, Err(DecodeError::InvalidConfig(_))));
    }

    #[test]
    fn conservation_invariants_hold_on_sampled_decodes() {
        let (vocab, policy, prompts) = uniform_policy(6, 8);
        let config = DecodeConfig {
            block_size: 4,
            confidence_threshold: 0.35,
            max_steps_per_block: 4,
            temperature: 1.0,
            mode: DecodeMode::Sample,
        };
        for seed in 0..50 {
            let traj = decode(&policy, &prompts[(seed % 4) as usize], &config, seed).unwrap();
            traj.validate(vocab).unwrap();
            let t = tpf(&traj);
            assert!((1.0..=config.block_size as f64).contains(&t));
        }
    }
}
