//! Domain types for masked sequences, rollouts, and the synthetic verifier
//! tasks that supply ground-truth rewards.
//!
//! A task instance is a [`Prompt`] whose `target` is the exact answer the
//! verifier expects. Decoding operates on the response region only: the
//! prompt conditions the policy but is never masked. All types here are
//! immutable after construction and safe to share across rollout workers.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::ops::Range;

pub type TokenId = u32;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("invalid vocab: {0}")]
    InvalidVocab(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("mask token present in decoded output at position {position}")]
    MaskInOutput { position: usize },
    #[error("masked-state invariant violated: {0}")]
    StateInvariant(String),
    #[error("serialization error: {0}")]
    Serde(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Token alphabet: ids `0..size`, with one id reserved for `[MASK]`.
/// The mask id never appears in prompts, targets, or decoded outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
    mask_id: TokenId,
}

impl Vocab {
    pub fn new(size: u32, mask_id: TokenId) -> Result<Self, TaskError> {
        if size < 3 {
            return Err(TaskError::InvalidVocab(format!(
                "vocab size {size} < 3 (need mask plus at least two content symbols)"
            )));
        }
        if mask_id >= size {
            return Err(TaskError::InvalidVocab(format!(
                "mask_id {mask_id} out of range for vocab size {size}"
            )));
        }
        Ok(Vocab { size, mask_id })
    }

    /// Conventional layout: the highest id is the mask.
    pub fn with_trailing_mask(size: u32) -> Result<Self, TaskError> {
        Self::new(size, size - 1)
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    /// Number of content (non-mask) symbols.
    pub fn content_size(&self) -> u32 {
        self.size - 1
    }

    pub fn is_content(&self, token: TokenId) -> bool {
        token < self.size && token != self.mask_id
    }

    /// Rank of a content token among content tokens (its "digit").
    pub fn content_digit(&self, token: TokenId) -> u32 {
        debug_assert!(self.is_content(token));
        if token < self.mask_id {
            token
        } else {
            token - 1
        }
    }

    /// Inverse of [`Vocab::content_digit`].
    pub fn content_token(&self, digit: u32) -> TokenId {
        debug_assert!(digit < self.content_size());
        if digit < self.mask_id {
            digit
        } else {
            digit + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Target equals the prompt.
    Copy,
    /// Target is the prompt reversed.
    Reverse,
    /// Target digit i is `(digit(prompt[i]) + digit(prompt[(i+1) mod L])) mod A`
    /// where `A` is the content alphabet size; requires cross-position context.
    ModSum,
}

/// One task instance: conditioning tokens plus the reference answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub kind: TaskKind,
    pub tokens: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Prompt {
    pub fn response_len(&self) -> usize {
        self.target.len()
    }
}

fn target_for(kind: TaskKind, tokens: &[TokenId], vocab: Vocab) -> Vec<TokenId> {
    match kind {
        TaskKind::Copy => tokens.to_vec(),
        TaskKind::Reverse => tokens.iter().rev().copied().collect(),
        TaskKind::ModSum => {
            let len = tokens.len();
            let base = vocab.content_size();
            (0..len)
                .map(|i| {
                    let a = vocab.content_digit(tokens[i]);
                    let b = vocab.content_digit(tokens[(i + 1) % len]);
                    vocab.content_token((a + b) % base)
                })
                .collect()
        }
    }
}

/// Deterministically generate `count` prompts with exact targets.
/// Prompt ids are `0..count`; the same `(kind, count, len, vocab, seed)`
/// always produces the identical set.
pub fn make_prompt_set(
    kind: TaskKind,
    count: usize,
    response_len: usize,
    vocab: Vocab,
    seed: u64,
) -> Result<Vec<Prompt>, TaskError> {
    if count == 0 {
        return Err(TaskError::Config("prompt count must be >= 1".into()));
    }
    if response_len == 0 {
        return Err(TaskError::Config("response length must be >= 1".into()));
    }
    let mut rng = crate::rng::StreamRng::from_key(&[seed, kind_tag(kind), response_len as u64]);
    let prompts = (0..count as u64)
        .map(|id| {
            let tokens: Vec<TokenId> = (0..response_len)
                .map(|_| vocab.content_token(rng.next_below(vocab.content_size() as u64) as u32))
                .collect();
            let target = target_for(kind, &tokens, vocab);
            Prompt {
                id,
                kind,
                tokens,
                target,
            }
        })
        .collect();
    Ok(prompts)
}

fn kind_tag(kind: TaskKind) -> u64 {
    match kind {
        TaskKind::Copy => 1,
        TaskKind::Reverse => 2,
        TaskKind::ModSum => 3,
    }
}

/// How the verifier scores a fully decoded response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierMode {
    /// `+1.0` on exact match, `-1.0` otherwise.
    Binary,
    /// Fraction of positions matching the target, in `[0, 1]`.
    Fractional,
}

/// Score a decoded response against the prompt's target.
/// Returns `(accuracy, correct)`; `correct` holds iff accuracy is maximal for
/// the mode. A mask token in the output is a decoder bug, not a wrong answer.
pub fn verify(
    prompt: &Prompt,
    final_tokens: &[TokenId],
    mode: VerifierMode,
    vocab: Vocab,
) -> Result<(f64, bool), TaskError> {
    if let Some(position) = final_tokens.iter().position(|&t| t == vocab.mask_id()) {
        return Err(TaskError::MaskInOutput { position });
    }
    if final_tokens.len() != prompt.target.len() {
        return Err(TaskError::Config(format!(
            "output length {} != target length {}",
            final_tokens.len(),
            prompt.target.len()
        )));
    }
    match mode {
        VerifierMode::Binary => {
            let correct = final_tokens == prompt.target.as_slice();
            Ok((if correct { 1.0 } else { -1.0 }, correct))
        }
        VerifierMode::Fractional => {
            let matching = final_tokens
                .iter()
                .zip(&prompt.target)
                .filter(|(a, b)| a == b)
                .count();
            let fraction = matching as f64 / prompt.target.len() as f64;
            Ok((fraction, matching == prompt.target.len()))
        }
    }
}

/// Partially decoded response with block structure: blocks before
/// `active_block` are fully decoded, blocks after it are fully masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedState {
    pub tokens: Vec<TokenId>,
    pub block_size: usize,
    pub active_block: usize,
}

impl MaskedState {
    pub fn new_fully_masked(
        len: usize,
        block_size: usize,
        vocab: Vocab,
    ) -> Result<Self, TaskError> {
        if block_size == 0 || len == 0 || !len.is_multiple_of(block_size) {
            return Err(TaskError::Config(format!(
                "response length {len} must be a positive multiple of block size {block_size}"
            )));
        }
        Ok(MaskedState {
            tokens: vec![vocab.mask_id(); len],
            block_size,
            active_block: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_blocks(&self) -> usize {
        self.tokens.len() / self.block_size
    }

    pub fn block_of(&self, position: usize) -> usize {
        position / self.block_size
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        block * self.block_size..(block + 1) * self.block_size
    }

    /// Masked positions within the active block, ascending.
    pub fn masked_in_active_block(&self, vocab: Vocab) -> Vec<usize> {
        if self.active_block >= self.num_blocks() {
            return Vec::new();
        }
        self.block_range(self.active_block)
            .filter(|&p| self.tokens[p] == vocab.mask_id())
            .collect()
    }

    pub fn is_fully_decoded(&self, vocab: Vocab) -> bool {
        self.tokens.iter().all(|&t| t != vocab.mask_id())
    }

    /// Check the block invariant: completed blocks contain no mask, pending
    /// blocks are all mask, and the active block index is in range.
    pub fn validate(&self, vocab: Vocab) -> Result<(), TaskError> {
        let blocks = self.num_blocks();
        if !self.tokens.len().is_multiple_of(self.block_size) {
            return Err(TaskError::StateInvariant(format!(
                "length {} not a multiple of block size {}",
                self.tokens.len(),
                self.block_size
            )));
        }
        if self.active_block > blocks {
            return Err(TaskError::StateInvariant(format!(
                "active block {} out of range 0..={}",
                self.active_block, blocks
            )));
        }
        for b in 0..blocks {
            let range = self.block_range(b);
            if b < self.active_block {
                if let Some(p) = range.clone().find(|&p| self.tokens[p] == vocab.mask_id()) {
                    return Err(TaskError::StateInvariant(format!(
                        "completed block {b} holds mask at position {p}"
                    )));
                }
            } else if b > self.active_block {
                if let Some(p) = range.clone().find(|&p| self.tokens[p] != vocab.mask_id()) {
                    return Err(TaskError::StateInvariant(format!(
                        "pending block {b} holds content at position {p}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A token committed during one denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptedToken {
    pub position: usize,
    pub token: TokenId,
    /// Log-probability under the behavior policy at the recorded state.
    pub logprob: f64,
    /// Model probability of the accepted token, in `(0, 1]`.
    pub confidence: f64,
}

/// One forward pass over the masked positions of the active block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    /// Positions that were masked when the forward ran, ascending.
    pub masked_indices: Vec<usize>,
    /// Committed predictions, ascending by position; never empty.
    pub accepted: Vec<AcceptedToken>,
    pub rejected_count: usize,
}

/// Full record of one decode: every intermediate masked set, every committed
/// token with its behavior log-probability, and the completed response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub block_size: usize,
    pub steps: Vec<StepRecord>,
    pub final_tokens: Vec<TokenId>,
    /// Total forward passes; one per step.
    pub forwards: usize,
    /// Total committed tokens; equals the response length.
    pub decoded_tokens: usize,
    pub seed: u64,
}

impl Trajectory {
    /// Total parallel token predictions: sum over steps of the masked-set
    /// size. Each slot is predicted at every step it remains masked, so this
    /// is at least the response length.
    pub fn prediction_count(&self) -> usize {
        self.steps.iter().map(|s| s.masked_indices.len()).sum()
    }

    pub fn accepted_count(&self) -> usize {
        self.steps.iter().map(|s| s.accepted.len()).sum()
    }

    /// Consistency checks used by tests and debug assertions.
    pub fn validate(&self, vocab: Vocab) -> Result<(), TaskError> {
        let len = self.final_tokens.len();
        if self.decoded_tokens != len {
            return Err(TaskError::StateInvariant(format!(
                "decoded_tokens {} != response length {}",
                self.decoded_tokens, len
            )));
        }
        if self.forwards != self.steps.len() {
            return Err(TaskError::StateInvariant(format!(
                "forwards {} != step count {}",
                self.forwards,
                self.steps.len()
            )));
        }
        if self.accepted_count() != len {
            return Err(TaskError::StateInvariant(format!(
                "accepted tokens {} != response length {}",
                self.accepted_count(),
                len
            )));
        }
        if self.prediction_count() < len {
            return Err(TaskError::StateInvariant(
                "prediction count below response length".into(),
            ));
        }
        for step in &self.steps {
            if step.accepted.is_empty() {
                return Err(TaskError::StateInvariant(format!(
                    "step {} accepted nothing",
                    step.step_index
                )));
            }
            if step.rejected_count != step.masked_indices.len() - step.accepted.len() {
                return Err(TaskError::StateInvariant(format!(
                    "step {} rejected_count inconsistent",
                    step.step_index
                )));
            }
            for acc in &step.accepted {
                if !step.masked_indices.contains(&acc.position) {
                    return Err(TaskError::StateInvariant(format!(
                        "step {} accepted position {} outside masked set",
                        step.step_index, acc.position
                    )));
                }
                if !(acc.logprob <= 0.0 && acc.logprob.is_finite()
                    || acc.logprob == f64::NEG_INFINITY)
                {
                    return Err(TaskError::StateInvariant(format!(
                        "step {} stores invalid logprob {}",
                        step.step_index, acc.logprob
                    )));
                }
                if !(acc.confidence > 0.0 && acc.confidence <= 1.0) {
                    return Err(TaskError::StateInvariant(format!(
                        "step {} stores invalid confidence {}",
                        step.step_index, acc.confidence
                    )));
                }
            }
        }
        if self.final_tokens.iter().any(|&t| t == vocab.mask_id()) {
            return Err(TaskError::StateInvariant("mask in final tokens".into()));
        }
        Ok(())
    }
}

/// Per-trajectory raw objective values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    /// Verifier score: `±1.0` binary or `[0, 1]` fractional.
    pub accuracy: f64,
    /// Tokens per forward of the trajectory.
    pub speed: f64,
    pub correct: bool,
}

/// Write prompts as line-delimited JSON, one record per line.
pub fn write_prompts_jsonl<W: Write>(writer: &mut W, prompts: &[Prompt]) -> Result<(), TaskError> {
    for p in prompts {
        let line = serde_json::to_string(p).map_err(|e| TaskError::Serde(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn read_prompts_jsonl<R: BufRead>(reader: R) -> Result<Vec<Prompt>, TaskError> {
    let mut prompts = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        prompts.push(serde_json::from_str(&line).map_err(|e| TaskError::Serde(e.to_string()))?);
    }
    Ok(prompts)
}

/// Trajectory dump format used for debugging and test oracles.
pub fn write_trajectories_jsonl<W: Write>(
    writer: &mut W,
    trajectories: &[Trajectory],
) -> Result<(), TaskError> {
    for t in trajectories {
        let line = serde_json::to_string(t).map_err(|e| TaskError::Serde(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn read_trajectories_jsonl<R: BufRead>(reader: R) -> Result<Vec<Trajectory>, TaskError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TaskError::Serde(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab10() -> Vocab {
        Vocab::with_trailing_mask(11).unwrap()
    }

    #[test]
    fn reverse_target() {
        let vocab = vocab10();
        assert_eq!(
            target_for(TaskKind::Reverse, &[2, 3, 4], vocab),
            vec![4, 3, 2]
        );
    }

    #[test]
    fn copy_target() {
        let vocab = vocab10();
        assert_eq!(target_for(TaskKind::Copy, &[5, 5, 7], vocab), vec![5, 5, 7]);
    }

    #[test]
    fn modsum_target_digits() {
        // Content alphabet of 10 digits; mask is the trailing id, so content
        // tokens coincide with their digits.
        let vocab = vocab10();
        assert_eq!(vocab.content_size(), 10);
        assert_eq!(
            target_for(TaskKind::ModSum, &[1, 2, 9], vocab),
            vec![3, 1, 0]
        );
    }

    #[test]
    fn modsum_target_remaps_around_mask() {
        // Mask at id 0: digit d maps to token d+1.
        let vocab = Vocab::new(11, 0).unwrap();
        let tokens = [
            vocab.content_token(1),
            vocab.content_token(2),
            vocab.content_token(9),
        ];
        let target = target_for(TaskKind::ModSum, &tokens, vocab);
        assert_eq!(
            target,
            vec![
                vocab.content_token(3),
                vocab.content_token(1),
                vocab.content_token(0)
            ]
        );
    }

    #[test]
    fn verify_binary_and_fractional() {
        let vocab = vocab10();
        let prompt = Prompt {
            id: 0,
            kind: TaskKind::Reverse,
            tokens: vec![2, 3, 4],
            target: vec![4, 3, 2],
        };
        let (acc, correct) = verify(&prompt, &[4, 3, 2], VerifierMode::Binary, vocab).unwrap();
        assert_eq!((acc, correct), (1.0, true));
        let (acc, correct) = verify(&prompt, &[4, 3, 5], VerifierMode::Binary, vocab).unwrap();
        assert_eq!((acc, correct), (-1.0, false));
        let (acc, correct) = verify(&prompt, &[4, 3, 5], VerifierMode::Fractional, vocab).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        assert!(!correct);
    }

    #[test]
    fn verify_rejects_mask_in_output() {
        let vocab = vocab10();
        let prompt = Prompt {
            id: 0,
            kind: TaskKind::Copy,
            tokens: vec![1, 2, 3],
            target: vec![1, 2, 3],
        };
        let err = verify(
            &prompt,
            &[1, vocab.mask_id(), 3],
            VerifierMode::Binary,
            vocab,
        );
        assert!(matches!(err, Err(TaskError::MaskInOutput { position: 1 })));
    }

    #[test]
    fn generated_targets_round_trip_through_verifier() {
        let vocab = vocab10();
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::ModSum] {
            let prompts = make_prompt_set(kind, 20, 8, vocab, 99).unwrap();
            for p in &prompts {
                for mode in [VerifierMode::Binary, VerifierMode::Fractional] {
                    let (acc, correct) = verify(p, &p.target, mode, vocab).unwrap();
                    assert!(correct);
                    assert_eq!(acc, 1.0);
                }
                assert!(p.tokens.iter().all(|&t| vocab.is_content(t)));
                assert!(p.target.iter().all(|&t| vocab.is_content(t)));
            }
        }
    }

    #[test]
    fn prompt_sets_are_deterministic() {
        let vocab = vocab10();
        let a = make_prompt_set(TaskKind::ModSum, 16, 8, vocab, 5).unwrap();
        let b = make_prompt_set(TaskKind::ModSum, 16, 8, vocab, 5).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_prompts_jsonl(&mut buf_a, &a).unwrap();
        write_prompts_jsonl(&mut buf_b, &b).unwrap();
        assert_eq!(buf_a, buf_b);
        let c = make_prompt_set(TaskKind::ModSum, 16, 8, vocab, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prompts_jsonl_round_trip() {
        let vocab = vocab10();
        let prompts = make_prompt_set(TaskKind::Copy, 5, 4, vocab, 1).unwrap();
        let mut buf = Vec::new();
        write_prompts_jsonl(&mut buf, &prompts).unwrap();
        let back = read_prompts_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(prompts, back);
    }

    #[test]
    fn masked_state_validator_catches_violations() {
        let vocab = vocab10();
        let mut state = MaskedState::new_fully_masked(8, 4, vocab).unwrap();
        state.validate(vocab).unwrap();

        // Content in a pending block.
        state.tokens[5] = 3;
        assert!(state.validate(vocab).is_err());
        state.tokens[5] = vocab.mask_id();

        // Mask left behind in a completed block.
        state.active_block = 1;
        assert!(state.validate(vocab).is_err());
        for p in 0..4 {
            state.tokens[p] = 1;
        }
        state.validate(vocab).unwrap();

        // Active block may equal the block count once everything is decoded.
        for p in 4..8 {
            state.tokens[p] = 2;
        }
        state.active_block = 2;
        state.validate(vocab).unwrap();
        state.active_block = 3;
        assert!(state.validate(vocab).is_err());
    }

    #[test]
    fn masked_positions_report_active_block_only() {
        let vocab = vocab10();
        let mut state = MaskedState::new_fully_masked(8, 4, vocab).unwrap();
        state.tokens[1] = 7;
        assert_eq!(state.masked_in_active_block(vocab), vec![0, 2, 3]);
    }
}
