//! Training orchestration: freeze the behavior policy, fill a batch of
//! accepted rollout groups, normalize rewards into advantages, run K update
//! epochs of the combined loss, and log per-iteration metrics with periodic
//! greedy evaluation on a held-out prompt split.
//!
//! Runs are reproducible: rollout randomness comes from counter-based streams
//! keyed by `(run seed, iteration, prompt id, group member)`, prompt cursors
//! reshuffle deterministically after each full pass, and every floating-point
//! reduction folds in a fixed order, so metrics and checkpoints are
//! byte-identical across worker counts.

use crate::decoder::{self, aup, decode, DecodeConfig};
use crate::domain::{make_prompt_set, Prompt, TaskError, TaskKind, VerifierMode, Vocab};
use crate::exec;
use crate::losses::{
    build_replay_batch, combined_loss, recompute_logprobs, AdvantageAttach, BatchItem,
    LossBreakdown, LossConfig, ReplayError,
};
use crate::policy::{
    apply_update, snapshot, FeatureSpec, GradAccumulator, OptimAlgorithm, OptimizerState,
    PolicyError, PolicyParams, PolicySnapshot,
};
use crate::rlcore::{
    assemble_rewards, collapse_ratio, compute_advantages, dynamic_sample, gae_advantages,
    CriticTable, FilterConfig, GaeConfig, Group, NormConfig, NormMode, RewardConfig, RlError,
    SampleDiagnostics,
};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("iteration {iteration}: sampling failed: {source}")]
    Sampling {
        iteration: usize,
        source: RlError,
        metrics: Vec<IterationMetrics>,
    },
    #[error("iteration {iteration}: non-finite loss/gradient, training aborted")]
    NonFiniteLoss {
        iteration: usize,
        metrics: Vec<IterationMetrics>,
    },
    #[error("iteration {iteration}: behavior-policy integrity violated: {detail}")]
    BehaviorMismatch {
        iteration: usize,
        detail: String,
        metrics: Vec<IterationMetrics>,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Decode(#[from] decoder::DecodeError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl TrainError {
    /// Metrics logged up to the failure, so partial runs can still be flushed.
    pub fn partial_metrics(&self) -> &[IterationMetrics] {
        match self {
            TrainError::Sampling { metrics, .. }
            | TrainError::NonFiniteLoss { metrics, .. }
            | TrainError::BehaviorMismatch { metrics, .. } => metrics,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Per-component group normalization, then batch normalization.
    Decoupled,
    /// Coupled total-reward group normalization.
    Grpo,
    /// Tabular critic with generalized advantage estimation.
    Gae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub response_len: usize,
    /// Token alphabet size including the mask (always the trailing id).
    pub vocab_size: u32,
    pub train_prompts: usize,
    pub eval_prompts: usize,
    pub verifier: VerifierMode,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Reverse,
            response_len: 8,
            vocab_size: 10,
            train_prompts: 192,
            eval_prompts: 48,
            verifier: VerifierMode::Binary,
        }
    }
}

impl TaskConfig {
    pub fn vocab(&self) -> Result<Vocab, TaskError> {
        Vocab::with_trailing_mask(self.vocab_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algorithm: OptimAlgorithm,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: OptimAlgorithm::Adam,
            learning_rate: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> OptimizerState {
        OptimizerState::new(self.algorithm, self.learning_rate, self.max_grad_norm)
    }
}

/// Full experiment configuration. The scalar loop parameters are required in
/// config files; every sub-table falls back to its defaults field by field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training iterations (M).
    pub iterations: usize,
    /// Accepted prompt-groups per iteration (B).
    pub target_groups: usize,
    /// Rollouts per prompt (G).
    pub group_size: usize,
    /// Update epochs per iteration (K).
    pub update_epochs: usize,
    pub eval_every: usize,
    /// Maximum supervised warmup steps; warmup may stop earlier once the
    /// probe targets are met. Zero skips warmup entirely.
    pub warmup_steps: usize,
    #[serde(default = "default_warmup_target_accuracy")]
    pub warmup_target_accuracy: f64,
    /// Keep warming up until greedy probe TPF reaches this floor, so rollouts
    /// start with some parallel acceptances for the spread filter to see.
    #[serde(default = "default_warmup_min_tpf")]
    pub warmup_min_tpf: f64,
    #[serde(default = "default_warmup_batch_size")]
    pub warmup_batch_size: usize,
    #[serde(default = "default_warmup_check_every")]
    pub warmup_check_every: usize,
    #[serde(default = "default_advantage_mode")]
    pub advantage_mode: AdvantageMode,
    /// Threshold for the collapse-ratio diagnostic on final advantages.
    #[serde(default = "default_collapse_epsilon")]
    pub collapse_epsilon: f64,
    #[serde(default = "default_frontier_thresholds")]
    pub frontier_thresholds: Vec<f64>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub norm: NormConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub gae: GaeConfig,
}

fn default_warmup_target_accuracy() -> f64 {
    0.9
}
fn default_warmup_min_tpf() -> f64 {
    1.02
}
fn default_warmup_batch_size() -> usize {
    8
}
fn default_warmup_check_every() -> usize {
    5
}
fn default_advantage_mode() -> AdvantageMode {
    AdvantageMode::Decoupled
}
fn default_collapse_epsilon() -> f64 {
    0.1
}
fn default_frontier_thresholds() -> Vec<f64> {
    vec![0.5, 0.7, 0.9, 0.99]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale defaults: short sequences, small groups, a policy learning
    /// rate that actually moves the toy model.
    pub fn toy() -> Self {
        TrainConfig {
            iterations: 200,
            target_groups: 16,
            group_size: 8,
            update_epochs: 1,
            eval_every: 10,
            warmup_steps: 4000,
            warmup_target_accuracy: default_warmup_target_accuracy(),
            warmup_min_tpf: default_warmup_min_tpf(),
            warmup_batch_size: default_warmup_batch_size(),
            warmup_check_every: default_warmup_check_every(),
            advantage_mode: AdvantageMode::Decoupled,
            collapse_epsilon: default_collapse_epsilon(),
            frontier_thresholds: default_frontier_thresholds(),
            task: TaskConfig::default(),
            decode: DecodeConfig::default(),
            norm: NormConfig::default(),
            filter: FilterConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            gae: GaeConfig::default(),
        }
    }

    /// The published large-scale operating point, kept as a documented preset:
    /// 128 tasks per iteration, 32 rollouts each, block size 32, clip 0.2,
    /// KL beta 0.01, NLL weight 0.1, policy learning rate 1e-6.
    pub fn paper_scale() -> Self {
        let mut config = Self::toy();
        config.target_groups = 128;
        config.group_size = 32;
        config.task.response_len = 64;
        config.task.train_prompts = 2048;
        config.task.eval_prompts = 256;
        config.decode.block_size = 32;
        config.decode.max_steps_per_block = 32;
        config.optimizer.learning_rate = 1e-6;
        config
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations < 1 || self.target_groups < 1 || self.update_epochs < 1 {
            return Err(TrainError::Config(
                "iterations, target_groups, and update_epochs must be >= 1".into(),
            ));
        }
        if self.group_size < 2 {
            return Err(TrainError::Config(
                "group_size must be >= 2 (within-group normalization needs spread)".into(),
            ));
        }
        if self.eval_every < 1 {
            return Err(TrainError::Config("eval_every must be >= 1".into()));
        }
        if !self
            .task
            .response_len
            .is_multiple_of(self.decode.block_size)
        {
            return Err(TrainError::Config(format!(
                "response_len {} must be a multiple of block_size {}",
                self.task.response_len, self.decode.block_size
            )));
        }
        if self.task.eval_prompts >= self.task.train_prompts + self.task.eval_prompts {
            return Err(TrainError::Config(
                "eval prompt split leaves no training prompts".into(),
            ));
        }
        self.decode
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Greedy evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_pct: f64,
    pub mean_tpf: f64,
    pub aup: f64,
}

pub(crate) fn aggregate_eval(samples: &[(bool, f64)]) -> EvalReport {
    let accuracy_pct = 100.0 * samples.iter().filter(|s| s.0).count() as f64 / samples.len() as f64;
    let mean_tpf = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    EvalReport {
        accuracy_pct,
        mean_tpf,
        aup: aup(samples).expect("non-empty samples"),
    }
}

/// Deterministic greedy evaluation over a prompt set.
pub fn evaluate(
    policy: &PolicySnapshot,
    prompts: &[Prompt],
    decode_config: &DecodeConfig,
    verifier: VerifierMode,
) -> Result<EvalReport, TrainError> {
    if prompts.is_empty() {
        return Err(TrainError::Config("evaluation prompt set is empty".into()));
    }
    let config = decode_config.greedy();
    let vocab = policy.params().vocab();
    let samples = exec::map_indexed(prompts.len(), |i| {
        let trajectory = decode(policy, &prompts[i], &config, 0)?;
        let (_, correct) =
            crate::domain::verify(&prompts[i], &trajectory.final_tokens, verifier, vocab)?;
        Ok::<(bool, f64), TrainError>((correct, decoder::tpf(&trajectory)))
    });
    let mut collected = Vec::with_capacity(samples.len());
    for s in samples {
        collected.push(s?);
    }
    Ok(aggregate_eval(&collected))
}

/// One row of the training log. Evaluation columns are only present on
/// iterations where the held-out evaluation ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub acceptance_rate: f64,
    pub mean_tpf_spread: f64,
    pub mean_accuracy_reward: f64,
    pub accuracy_reward_std: f64,
    pub mean_speed_reward: f64,
    pub speed_reward_std: f64,
    pub total_reward: f64,
    pub collapse_ratio: f64,
    pub zero_adv_group_fraction: f64,
    pub policy_loss: f64,
    pub kl_penalty: f64,
    pub nll_loss: f64,
    pub clipped_fraction: f64,
    pub mean_ratio_dev: f64,
    pub grad_norm: f64,
    pub eval: Option<EvalReport>,
}

pub const METRICS_CSV_HEADER: &str = "iteration,acceptance_rate,mean_tpf_spread,mean_accuracy_reward,accuracy_reward_std,mean_speed_reward,speed_reward_std,total_reward,collapse_ratio,zero_adv_group_fraction,policy_loss,kl_penalty,nll_loss,clipped_fraction,mean_ratio_dev,grad_norm,eval_accuracy,eval_tpf,eval_aup";

/// Render the metrics log as CSV with a fixed column order.
pub fn metrics_to_csv(metrics: &[IterationMetrics]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.iteration,
            m.acceptance_rate,
            m.mean_tpf_spread,
            m.mean_accuracy_reward,
            m.accuracy_reward_std,
            m.mean_speed_reward,
            m.speed_reward_std,
            m.total_reward,
            m.collapse_ratio,
            m.zero_adv_group_fraction,
            m.policy_loss,
            m.kl_penalty,
            m.nll_loss,
            m.clipped_fraction,
            m.mean_ratio_dev,
            m.grad_norm
        );
        match &m.eval {
            Some(e) => {
                let _ = write!(out, ",{},{},{}", e.accuracy_pct, e.mean_tpf, e.aup);
            }
            None => out.push_str(",,,"),
        }
        out.push('\n');
    }
    out
}

/// Result of a completed training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub metrics: Vec<IterationMetrics>,
    pub post_warmup: EvalReport,
    pub final_eval: EvalReport,
    /// Best held-out AUP seen during training with its iteration.
    pub best_aup_iteration: usize,
    pub best_eval: EvalReport,
    pub warmup_steps_used: usize,
}

/// Sequential prompt cursor that reshuffles deterministically after each
/// full pass.
struct PromptCursor<'a> {
    prompts: &'a [Prompt],
    order: Vec<usize>,
    next: usize,
    pass: u64,
    seed: u64,
}

impl<'a> PromptCursor<'a> {
    fn new(prompts: &'a [Prompt], seed: u64) -> Self {
        let mut cursor = PromptCursor {
            prompts,
            order: (0..prompts.len()).collect(),
            next: 0,
            pass: 0,
            seed,
        };
        cursor.reshuffle();
        cursor
    }

    fn reshuffle(&mut self) {
        let mut rng = StreamRng::from_key(&[self.seed, 0x5f5f, self.pass]);
        self.order = (0..self.prompts.len()).collect();
        rng.shuffle(&mut self.order);
    }

    fn draw(&mut self) -> Prompt {
        if self.next >= self.order.len() {
            self.pass += 1;
            self.next = 0;
            self.reshuffle();
        }
        let prompt = self.prompts[self.order[self.next]].clone();
        self.next += 1;
        prompt
    }
}

fn derive_seed(parts: &[u64]) -> u64 {
    StreamRng::from_key(parts).next_u64()
}

fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Supervised warmup: cross-entropy on (masked state, target token) pairs
/// sampled from ground-truth completions under random partial maskings.
/// Stops once greedy probe accuracy and TPF clear their configured floors.
/// Returns the trained parameters and the number of steps consumed.
pub fn warmup(
    config: &TrainConfig,
    prompts: &[Prompt],
    seed: u64,
) -> Result<(PolicyParams, usize), TrainError> {
    let vocab = config.task.vocab()?;
    let spec = FeatureSpec::new(config.task.response_len, vocab);
    let mut params = PolicyParams::zeros(spec);
    if config.warmup_steps == 0 {
        return Ok((params, 0));
    }
    let mut opt = config.optimizer.build();
    let mut rng = StreamRng::from_key(&[seed, 0x77a7]);
    let block_size = config.decode.block_size;
    let blocks = config.task.response_len / block_size;
    let probe: Vec<Prompt> = prompts
        .iter()
        .take(32.min(prompts.len()))
        .cloned()
        .collect();

    let mut steps_used = 0;
    for step in 0..config.warmup_steps {
        if step % config.warmup_check_every == 0 && step > 0 {
            let report = evaluate(
                &snapshot(&params),
                &probe,
                &config.decode,
                config.task.verifier,
            )?;
            if report.accuracy_pct >= 100.0 * config.warmup_target_accuracy
                && report.mean_tpf >= config.warmup_min_tpf
            {
                break;
            }
        }
        let mut grad = GradAccumulator::zeros(spec);
        let mut token_total = 0usize;
        let mut examples = Vec::with_capacity(config.warmup_batch_size);
        for _ in 0..config.warmup_batch_size {
            let prompt = &prompts[rng.next_below(prompts.len() as u64) as usize];
            let block = rng.next_below(blocks as u64) as usize;
            let mut state = crate::domain::MaskedState::new_fully_masked(
                config.task.response_len,
                block_size,
                vocab,
            )?;
            state.active_block = block;
            for p in 0..block * block_size {
                state.tokens[p] = prompt.target[p];
            }
            // Random non-empty masked subset of the active block.
            let mut positions: Vec<usize> = state.block_range(block).collect();
            rng.shuffle(&mut positions);
            let keep_decoded = rng.next_below(block_size as u64) as usize;
            for &p in positions.iter().take(keep_decoded) {
                state.tokens[p] = prompt.target[p];
            }
            let masked = state.masked_in_active_block(vocab);
            token_total += masked.len();
            examples.push((prompt.clone(), state, masked));
        }
        for (prompt, state, masked) in &examples {
            for &position in masked {
                let features = spec.extract(prompt, state, position);
                let probs = params.distribution(prompt, state, position);
                // Cross-entropy toward the ground-truth token, mean over the
                // batch tokens.
                grad.add_logprob_grad(
                    &features,
                    &probs,
                    prompt.target[position],
                    -1.0 / token_total as f64,
                );
            }
        }
        apply_update(&mut params, &mut opt, &grad)?;
        steps_used = step + 1;
    }
    Ok((params, steps_used))
}

struct AdvantageBundle {
    /// Final per-group, per-member advantages (trajectory-shared modes).
    shared: Option<Vec<Vec<f64>>>,
    /// Per-group, per-trajectory, per-step advantages (GAE mode).
    per_step: Option<Vec<Vec<Vec<f64>>>>,
    /// Grouped scalars for the collapse diagnostic.
    grouped_scalars: Vec<Vec<f64>>,
    zero_signal_fraction: f64,
}

/// Run the full training loop. See the module docs for the iteration
/// structure; errors abort with all metrics logged so far attached.
pub fn train(
    config: &TrainConfig,
    prompt_pool: &[Prompt],
    seed: u64,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let vocab = config.task.vocab()?;
    if prompt_pool.len() <= config.task.eval_prompts {
        return Err(TrainError::Config(format!(
            "prompt pool of {} cannot spare {} evaluation prompts",
            prompt_pool.len(),
            config.task.eval_prompts
        )));
    }
    for p in prompt_pool {
        if p.response_len() != config.task.response_len
            || p.tokens.len() != config.task.response_len
        {
            return Err(TrainError::Config(format!(
                "prompt {} length mismatch with response_len {}",
                p.id, config.task.response_len
            )));
        }
    }
    // Held-out split by position in the pool; ids are unique so the split is
    // an id partition.
    let (eval_prompts, train_prompts) = prompt_pool.split_at(config.task.eval_prompts);
    let prompt_by_id: BTreeMap<u64, &Prompt> = train_prompts.iter().map(|p| (p.id, p)).collect();
    if prompt_by_id.len() != train_prompts.len() {
        return Err(TrainError::Config("duplicate prompt ids in pool".into()));
    }

    let (mut params, warmup_steps_used) = warmup(config, train_prompts, seed)?;
    let reference = snapshot(&params);
    let post_warmup = evaluate(
        &reference,
        eval_prompts,
        &config.decode,
        config.task.verifier,
    )?;

    let mut opt = config.optimizer.build();
    let mut critic = CriticTable::new(config.gae.critic_learning_rate, config.gae.prompt_buckets);
    let reward_config = RewardConfig {
        verifier: config.task.verifier,
    };
    let mut cursor = PromptCursor::new(train_prompts, seed);
    let mut metrics: Vec<IterationMetrics> = Vec::with_capacity(config.iterations);
    let mut best: Option<(usize, EvalReport)> = None;

    for iteration in 0..config.iterations {
        let behavior = snapshot(&params);

        // Rollout phase: G decodes per candidate prompt, streams keyed by
        // (seed, iteration, prompt id, member).
        let rollout = |prompt: &Prompt| -> Result<Group, RlError> {
            let members = exec::map_indexed(config.group_size, |member| {
                let member_seed =
                    derive_seed(&[seed, 0xD0, iteration as u64, prompt.id, member as u64]);
                let trajectory = decode(&behavior, prompt, &config.decode, member_seed)
                    .map_err(|e| TaskError::Config(e.to_string()))?;
                let reward = assemble_rewards(&trajectory, prompt, &reward_config, vocab)?;
                Ok::<_, TaskError>((trajectory, reward))
            });
            let mut trajectories = Vec::with_capacity(config.group_size);
            let mut rewards = Vec::with_capacity(config.group_size);
            for m in members {
                let (t, r) = m?;
                trajectories.push(t);
                rewards.push(r);
            }
            Ok(Group::new(prompt.id, trajectories, rewards))
        };

        let sampled = dynamic_sample(
            || cursor.draw(),
            rollout,
            &config.filter,
            config.target_groups,
        );
        let (groups, diagnostics): (Vec<Group>, SampleDiagnostics) = match sampled {
            Ok(x) => x,
            Err(source) => {
                return Err(TrainError::Sampling {
                    iteration,
                    source,
                    metrics,
                })
            }
        };

        // Behavior-policy discipline: replaying under the frozen behavior
        // snapshot must reproduce the stored log-probabilities.
        {
            let flat: Vec<(&Prompt, &crate::domain::Trajectory)> = groups
                .iter()
                .flat_map(|g| {
                    let prompt = prompt_by_id[&g.prompt_id];
                    g.trajectories.iter().map(move |t| (prompt, t))
                })
                .collect();
            let checks = exec::map_indexed(flat.len(), |i| {
                let (prompt, trajectory) = flat[i];
                let recomputed = recompute_logprobs(behavior.params(), trajectory, prompt)?;
                let stored: Vec<f64> = trajectory
                    .steps
                    .iter()
                    .flat_map(|s| s.accepted.iter().map(|a| a.logprob))
                    .collect();
                let max_dev = recomputed
                    .iter()
                    .zip(&stored)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                Ok::<f64, ReplayError>(max_dev)
            });
            for c in checks {
                let dev = match c {
                    Ok(dev) => dev,
                    Err(e) => {
                        return Err(TrainError::BehaviorMismatch {
                            iteration,
                            detail: e.to_string(),
                            metrics,
                        })
                    }
                };
                if dev > 1e-12 {
                    return Err(TrainError::BehaviorMismatch {
                        iteration,
                        detail: format!("stored/recomputed logprob deviation {dev}"),
                        metrics,
                    });
                }
            }
        }

        let advantages = match config.advantage_mode {
            AdvantageMode::Decoupled | AdvantageMode::Grpo => {
                let mut norm = config.norm;
                norm.mode = if config.advantage_mode == AdvantageMode::Grpo {
                    NormMode::Coupled
                } else {
                    NormMode::Decoupled
                };
                let batch = match compute_advantages(&groups, &norm) {
                    Ok(batch) => batch,
                    Err(source) => {
                        return Err(TrainError::Sampling {
                            iteration,
                            source,
                            metrics,
                        })
                    }
                };
                AdvantageBundle {
                    zero_signal_fraction: batch.zero_signal_fraction(1e-9),
                    grouped_scalars: batch.advantages.clone(),
                    shared: Some(batch.advantages),
                    per_step: None,
                }
            }
            AdvantageMode::Gae => {
                let per_step: Vec<Vec<Vec<f64>>> = groups
                    .iter()
                    .map(|g| {
                        gae_advantages(g, prompt_by_id[&g.prompt_id], &mut critic, &config.gae)
                    })
                    .collect();
                // Collapse/zero-signal diagnostics use per-trajectory means.
                let grouped_scalars: Vec<Vec<f64>> = per_step
                    .iter()
                    .map(|g| {
                        g.iter()
                            .map(|steps| steps.iter().sum::<f64>() / steps.len().max(1) as f64)
                            .collect()
                    })
                    .collect();
                let degenerate = grouped_scalars
                    .iter()
                    .filter(|g| {
                        let max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let min = g.iter().cloned().fold(f64::INFINITY, f64::min);
                        max - min < 1e-9
                    })
                    .count();
                AdvantageBundle {
                    zero_signal_fraction: degenerate as f64 / grouped_scalars.len() as f64,
                    grouped_scalars,
                    shared: None,
                    per_step: Some(per_step),
                }
            }
        };

        let collapse =
            collapse_ratio(&advantages.grouped_scalars, config.collapse_epsilon).unwrap_or(0.0);

        // Reward statistics over every trajectory in the accepted batch.
        let accuracy_values: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.rewards.iter().map(|r| r.accuracy))
            .collect();
        let speed_values: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.rewards.iter().map(|r| r.speed))
            .collect();
        let (acc_mean, acc_std) = mean_and_pop_std(&accuracy_values);
        let (speed_mean, speed_std) = mean_and_pop_std(&speed_values);
        let mean_tpf_spread =
            groups.iter().map(|g| g.tpf_spread()).sum::<f64>() / groups.len() as f64;

        // Reference log-probabilities are fixed per iteration.
        let flat_trajectories: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| (0..g.trajectories.len()).map(move |ti| (gi, ti)))
            .collect();
        let ref_logprobs: Vec<Vec<f64>> = {
            let computed = exec::map_indexed(flat_trajectories.len(), |i| {
                let (gi, ti) = flat_trajectories[i];
                let g = &groups[gi];
                recompute_logprobs(
                    reference.params(),
                    &g.trajectories[ti],
                    prompt_by_id[&g.prompt_id],
                )
            });
            let mut out = Vec::with_capacity(computed.len());
            for c in computed {
                out.push(c?);
            }
            out
        };

        // K update epochs over the full accepted batch.
        let mut last_breakdown = LossBreakdown {
            total: 0.0,
            policy: 0.0,
            kl: 0.0,
            nll: 0.0,
            clipped_fraction: 0.0,
            mean_ratio_dev: 0.0,
        };
        let mut grad_norm = 0.0;
        for _epoch in 0..config.update_epochs {
            let items: Vec<BatchItem<'_>> = flat_trajectories
                .iter()
                .enumerate()
                .map(|(flat_index, &(gi, ti))| {
                    let g = &groups[gi];
                    let advantage = match (&advantages.shared, &advantages.per_step) {
                        (Some(shared), _) => AdvantageAttach::Shared(shared[gi][ti]),
                        (None, Some(per_step)) => AdvantageAttach::PerStep(&per_step[gi][ti]),
                        _ => unreachable!(),
                    };
                    BatchItem {
                        prompt: prompt_by_id[&g.prompt_id],
                        trajectory: &g.trajectories[ti],
                        advantage,
                        ref_logprobs: &ref_logprobs[flat_index],
                        correct: g.rewards[ti].correct,
                    }
                })
                .collect();
            let batch = build_replay_batch(&params, &items)?;
            let (breakdown, coeffs) = combined_loss(&batch.records, &batch.meta, &config.loss);
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { iteration, metrics });
            }
            let grad = batch.accumulate_gradient(&params, &coeffs);
            grad_norm = grad.l2_norm();
            if let Err(PolicyError::NonFiniteGradient { .. }) =
                apply_update(&mut params, &mut opt, &grad)
            {
                return Err(TrainError::NonFiniteLoss { iteration, metrics });
            }
            last_breakdown = breakdown;
        }

        let eval = if (iteration + 1) % config.eval_every == 0 || iteration + 1 == config.iterations
        {
            let report = evaluate(
                &snapshot(&params),
                eval_prompts,
                &config.decode,
                config.task.verifier,
            )?;
            if best.map(|(_, b)| report.aup > b.aup).unwrap_or(true) {
                best = Some((iteration, report));
            }
            Some(report)
        } else {
            None
        };

        metrics.push(IterationMetrics {
            iteration,
            acceptance_rate: diagnostics.acceptance_rate,
            mean_tpf_spread,
            mean_accuracy_reward: acc_mean,
            accuracy_reward_std: acc_std,
            mean_speed_reward: speed_mean,
            speed_reward_std: speed_std,
            total_reward: acc_mean + speed_mean,
            collapse_ratio: collapse,
            zero_adv_group_fraction: advantages.zero_signal_fraction,
            policy_loss: last_breakdown.policy,
            kl_penalty: last_breakdown.kl,
            nll_loss: last_breakdown.nll,
            clipped_fraction: last_breakdown.clipped_fraction,
            mean_ratio_dev: last_breakdown.mean_ratio_dev,
            grad_norm,
            eval,
        });
    }

    let final_eval = metrics
        .last()
        .and_then(|m| m.eval)
        .expect("final iteration always evaluates");
    let (best_aup_iteration, best_eval) = best.expect("at least one evaluation ran");
    Ok(TrainOutput {
        params,
        metrics,
        post_warmup,
        final_eval,
        best_aup_iteration,
        best_eval,
        warmup_steps_used,
    })
}

/// Build the prompt pool a config describes: eval prompts first, then the
/// training pool, all drawn from one deterministic generator.
pub fn build_prompt_pool(config: &TrainConfig, seed: u64) -> Result<Vec<Prompt>, TrainError> {
    let vocab = config.task.vocab()?;
    let total = config.task.train_prompts + config.task.eval_prompts;
    Ok(make_prompt_set(
        config.task.kind,
        total,
        config.task.response_len,
        vocab,
        derive_seed(&[seed, 0x9001]),
    )?)
}
