//! blockrl: a desk-scale laboratory for RL-tuned block-wise parallel decoding.
//!
//! The crate simulates the full loop end to end on synthetic verifier tasks:
//!
//! - [`domain`]: masked sequences, block structure, trajectories, and the
//!   Copy/Reverse/ModSum verifier tasks that supply exact rewards.
//! - [`policy`]: a linear-softmax toy policy with analytic log-probability
//!   gradients, snapshots, and SGD/Adam updates under global norm clipping.
//! - [`decoder`]: confidence-driven block-wise parallel decoding plus the
//!   tokens-per-forward and accuracy-under-parallelism metrics.
//! - [`rlcore`]: reward assembly, coupled and decoupled group-relative
//!   advantage normalization, the collapse-ratio diagnostic, a tabular critic
//!   with GAE, and dynamic sampling with spread-aware filtering.
//! - [`losses`]: trajectory replay, the clipped surrogate objective, the k3
//!   KL penalty, the token-level NLL anchor on correct rollouts, and their
//!   configurable reductions.
//! - [`trainer`]: the training loop, supervised warmup, greedy evaluation,
//!   and the metrics log.
//!
//! Rollouts, replays, and evaluation fan out over rayon when the default
//! `parallel` feature is enabled and fall back to sequential execution
//! without it; results are bit-identical either way.

pub mod decoder;
pub mod domain;
pub mod exec;
pub mod losses;
pub mod policy;
pub mod rlcore;
pub mod rng;
pub mod trainer;

pub use decoder::{aup, decode, frontier_sweep, tpf, DecodeConfig, DecodeMode, FrontierRow};
pub use domain::{
    make_prompt_set, verify, MaskedState, Prompt, RewardVector, StepRecord, TaskKind, Trajectory,
    VerifierMode, Vocab,
};
pub use losses::{
    build_replay_batch, combined_loss, kl_penalty, nll_anchor, policy_loss, recompute_logprobs,
    LossBreakdown, LossConfig, Reduction, TokenLossRecord,
};
pub use policy::{
    apply_update, load_checkpoint, save_checkpoint, snapshot, FeatureSpec, GradAccumulator,
    OptimAlgorithm, OptimizerState, PolicyParams, PolicySnapshot,
};
pub use rlcore::{
    assemble_rewards, collapse_ratio, compute_advantages, dynamic_sample, gae_advantages,
    grpo_advantages, CriticTable, FilterConfig, FilterCriterion, GaeConfig, Group, NormConfig,
    NormMode, RewardConfig,
};
pub use rng::StreamRng;
pub use trainer::{
    build_prompt_pool, evaluate, metrics_to_csv, train, warmup, AdvantageMode, EvalReport,
    IterationMetrics, TaskConfig, TrainConfig, TrainError, TrainOutput,
};
