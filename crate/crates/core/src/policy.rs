//! Differentiable toy policy: a linear-softmax model over a fixed sparse
//! feature map, with closed-form log-probability gradients and no autodiff.
//!
//! The feature map for a masked position concatenates one-hot segments for
//! the position index, the prompt token at that position, the prompt token at
//! the mirrored position, the pair of prompt digits at this and the next
//! position, and the current tokens of the in-block neighbors (with a shared
//! bucket for masked or out-of-block neighbors). Exactly six features are
//! active per query, so logits and gradients stay sparse in the feature
//! dimension while dense over the vocabulary.
//!
//! The pair segment carries the cross-position signal a plain per-position
//! one-hot cannot: a linear scorer over separate marginals cannot represent
//! modular addition, so the joint feature is what makes the ModSum task
//! learnable at all.
//!
//! The mask token is excluded from the softmax support; the policy can never
//! emit it.

use crate::domain::{MaskedState, Prompt, TaskError, TokenId, Vocab};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite gradient (norm {norm})")]
    NonFiniteGradient { norm: f64 },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shape of the feature map; fixed per experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    response_len: usize,
    vocab: Vocab,
}

/// Active feature indices for one (prompt, state, position) query.
/// All active features have weight 1.
pub type Features = [usize; 6];

impl FeatureSpec {
    pub fn new(response_len: usize, vocab: Vocab) -> Self {
        FeatureSpec {
            response_len,
            vocab,
        }
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn feature_dim(&self) -> usize {
        let len = self.response_len;
        let v = self.vocab.size() as usize;
        let content = self.vocab.content_size() as usize;
        len + v + v + content * content + 2 * (v + 1)
    }

    fn neighbor_bucket(&self, state: &MaskedState, position: usize, offset: isize) -> usize {
        let v = self.vocab.size() as usize;
        let neighbor = position as isize + offset;
        if neighbor < 0 || neighbor as usize >= state.len() {
            return v;
        }
        let neighbor = neighbor as usize;
        if state.block_of(neighbor) != state.block_of(position) {
            return v;
        }
        let token = state.tokens[neighbor];
        if token == self.vocab.mask_id() {
            v
        } else {
            token as usize
        }
    }

    /// Extract the six active feature indices for a masked position.
    pub fn extract(&self, prompt: &Prompt, state: &MaskedState, position: usize) -> Features {
        debug_assert_eq!(prompt.tokens.len(), self.response_len);
        debug_assert!(position < self.response_len);
        let len = self.response_len;
        let v = self.vocab.size() as usize;
        let content = self.vocab.content_size() as usize;

        let mut offset = 0;
        let f_position = offset + position;
        offset += len;
        let f_prompt = offset + prompt.tokens[position] as usize;
        offset += v;
        let f_mirror = offset + prompt.tokens[len - 1 - position] as usize;
        offset += v;
        let a = self.vocab.content_digit(prompt.tokens[position]) as usize;
        let b = self
            .vocab
            .content_digit(prompt.tokens[(position + 1) % len]) as usize;
        let f_pair = offset + a * content + b;
        offset += content * content;
        let f_left = offset + self.neighbor_bucket(state, position, -1);
        offset += v + 1;
        let f_right = offset + self.neighbor_bucket(state, position, 1);

        [f_position, f_prompt, f_mirror, f_pair, f_left, f_right]
    }
}

/// Categorical distribution over the vocabulary at one masked position.
/// The mask entry is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDistribution {
    pub position: usize,
    pub probs: Vec<f64>,
}

/// Policy parameters: a `(feature_dim x vocab_size)` weight matrix plus the
/// feature map shape and a version counter bumped on every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    spec: FeatureSpec,
    weights: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    pub fn zeros(spec: FeatureSpec) -> Self {
        let dim = spec.feature_dim() * spec.vocab().size() as usize;
        PolicyParams {
            spec,
            weights: vec![0.0; dim],
            version: 0,
        }
    }

    pub fn spec(&self) -> FeatureSpec {
        self.spec
    }

    pub fn vocab(&self) -> Vocab {
        self.spec.vocab
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, feature: usize, token: usize) -> f64 {
        self.weights[feature * self.spec.vocab.size() as usize + token]
    }

    pub fn weight_mut(&mut self, feature: usize, token: usize) -> &mut f64 {
        &mut self.weights[feature * self.spec.vocab.size() as usize + token]
    }

    /// Raw logits over the full vocabulary for a set of active features.
    fn logits(&self, features: &Features) -> Vec<f64> {
        let v = self.spec.vocab.size() as usize;
        let mut logits = vec![0.0; v];
        for &f in features {
            let row = &self.weights[f * v..(f + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += w;
            }
        }
        logits
    }

    /// Softmax over content tokens; the mask slot is exactly zero.
    fn content_softmax(&self, logits: &[f64]) -> Vec<f64> {
        let mask = self.spec.vocab.mask_id() as usize;
        let mut max = f64::NEG_INFINITY;
        for (i, &l) in logits.iter().enumerate() {
            if i != mask && l > max {
                max = l;
            }
        }
        let mut probs = vec![0.0; logits.len()];
        let mut sum = 0.0;
        for (i, &l) in logits.iter().enumerate() {
            if i != mask {
                let e = (l - max).exp();
                probs[i] = e;
                sum += e;
            }
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        probs
    }

    /// Distribution at one masked position of the state's active block.
    pub fn distribution(&self, prompt: &Prompt, state: &MaskedState, position: usize) -> Vec<f64> {
        let features = self.spec.extract(prompt, state, position);
        self.content_softmax(&self.logits(&features))
    }

    /// One forward pass: distributions for every masked position of the
    /// active block. Errors if nothing is masked there.
    pub fn forward(
        &self,
        prompt: &Prompt,
        state: &MaskedState,
    ) -> Result<Vec<PositionDistribution>, PolicyError> {
        let masked = state.masked_in_active_block(self.spec.vocab);
        if masked.is_empty() {
            return Err(PolicyError::Contract(
                "forward requires at least one masked position in the active block".into(),
            ));
        }
        Ok(masked
            .into_iter()
            .map(|position| PositionDistribution {
                position,
                probs: self.distribution(prompt, state, position),
            })
            .collect())
    }

    /// Log-probability of a content token at a masked position.
    pub fn logprob(
        &self,
        prompt: &Prompt,
        state: &MaskedState,
        position: usize,
        token: TokenId,
    ) -> f64 {
        self.distribution(prompt, state, position)[token as usize].ln()
    }

    /// Log-probability together with its exact analytic parameter gradient:
    /// for each active feature f and content token y,
    /// `d logp / d w[f][y] = 1[y == token] - p[y]`.
    pub fn logprob_and_grad(
        &self,
        prompt: &Prompt,
        state: &MaskedState,
        position: usize,
        token: TokenId,
    ) -> Result<(f64, GradAccumulator), PolicyError> {
        let vocab = self.spec.vocab;
        if token == vocab.mask_id() {
            return Err(PolicyError::Contract(
                "mask token has no log-probability".into(),
            ));
        }
        if state.tokens[position] != vocab.mask_id() {
            return Err(PolicyError::Contract(format!(
                "position {position} is not masked"
            )));
        }
        let features = self.spec.extract(prompt, state, position);
        let probs = self.content_softmax(&self.logits(&features));
        let mut grad = GradAccumulator::zeros(self.spec);
        grad.add_logprob_grad(&features, &probs, token, 1.0);
        Ok((probs[token as usize].ln(), grad))
    }
}

/// Frozen copy of the policy used as a behavior or reference policy.
/// No mutating access is exposed; the underlying parameters can only change
/// through [`apply_update`] on a live `PolicyParams`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    params: PolicyParams,
}

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.params.version
    }
}

/// Freeze the current parameters.
pub fn snapshot(params: &PolicyParams) -> PolicySnapshot {
    PolicySnapshot {
        params: params.clone(),
    }
}

/// Gradient buffer with the same shape as the weights. Supports merge by
/// summation from independently computed contributions; token/sequence
/// bookkeeping lives with the loss reductions, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    spec: FeatureSpec,
    grad: Vec<f64>,
}

impl GradAccumulator {
    pub fn zeros(spec: FeatureSpec) -> Self {
        GradAccumulator {
            spec,
            grad: vec![0.0; spec.feature_dim() * spec.vocab().size() as usize],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.grad
    }

    pub fn entry(&self, feature: usize, token: usize) -> f64 {
        self.grad[feature * self.spec.vocab().size() as usize + token]
    }

    pub fn reset(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Accumulate `coeff * d logp(token) / d w` for a query whose softmax
    /// probabilities are `probs`.
    pub fn add_logprob_grad(
        &mut self,
        features: &Features,
        probs: &[f64],
        token: TokenId,
        coeff: f64,
    ) {
        let v = self.spec.vocab().size() as usize;
        let mask = self.spec.vocab().mask_id() as usize;
        for &f in features {
            let row = &mut self.grad[f * v..(f + 1) * v];
            for (y, slot) in row.iter_mut().enumerate() {
                if y == mask {
                    continue;
                }
                let indicator = if y == token as usize { 1.0 } else { 0.0 };
                *slot += coeff * (indicator - probs[y]);
            }
        }
    }

    pub fn merge(&mut self, other: &GradAccumulator) {
        debug_assert_eq!(self.grad.len(), other.grad.len());
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grad.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimAlgorithm {
    Sgd,
    Adam,
}

/// Optimizer state; gradients are clipped to `max_grad_norm` (global L2)
/// before the update rule runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub algorithm: OptimAlgorithm,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(algorithm: OptimAlgorithm, learning_rate: f64, max_grad_norm: f64) -> Self {
        OptimizerState {
            algorithm,
            learning_rate,
            max_grad_norm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Clip the gradient to the configured norm, apply one optimizer step, and
/// bump the parameter version. Non-finite gradients abort with a diagnostic.
pub fn apply_update(
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    grad: &GradAccumulator,
) -> Result<(), PolicyError> {
    if !grad.is_finite() {
        return Err(PolicyError::NonFiniteGradient { norm: f64::NAN });
    }
    debug_assert_eq!(grad.grad.len(), params.weights.len());
    let norm = grad.l2_norm();
    let scale = if norm > opt.max_grad_norm && norm > 0.0 {
        opt.max_grad_norm / norm
    } else {
        1.0
    };
    match opt.algorithm {
        OptimAlgorithm::Sgd => {
            for (w, g) in params.weights.iter_mut().zip(&grad.grad) {
                *w -= opt.learning_rate * scale * g;
            }
        }
        OptimAlgorithm::Adam => {
            if opt.m.is_empty() {
                opt.m = vec![0.0; params.weights.len()];
                opt.v = vec![0.0; params.weights.len()];
            }
            opt.t += 1;
            let bias1 = 1.0 - opt.beta1.powi(opt.t as i32);
            let bias2 = 1.0 - opt.beta2.powi(opt.t as i32);
            for i in 0..params.weights.len() {
                let g = grad.grad[i] * scale;
                opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
                opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g;
                let m_hat = opt.m[i] / bias1;
                let v_hat = opt.v[i] / bias2;
                params.weights[i] -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
    }
    params.version += 1;
    Ok(())
}

/// Versioned text checkpoint: a header line with the feature map shape and
/// parameter version, then row-major weights one feature row per line.
/// Floats use the shortest round-trip representation, so a save/load cycle
/// is bit-exact.
pub fn save_checkpoint<W: Write>(writer: &mut W, params: &PolicyParams) -> Result<(), PolicyError> {
    let spec = params.spec;
    writeln!(writer, "blockrl-checkpoint v1")?;
    writeln!(
        writer,
        "response_len={} vocab_size={} mask_id={} version={}",
        spec.response_len,
        spec.vocab.size(),
        spec.vocab.mask_id(),
        params.version
    )?;
    let v = spec.vocab.size() as usize;
    for row in params.weights.chunks(v) {
        let line: Vec<String> = row.iter().map(|w| format!("{w}")).collect();
        writeln!(writer, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(reader: R) -> Result<PolicyParams, PolicyError> {
    let mut lines = reader.lines();
    let magic = lines
        .next()
        .ok_or_else(|| PolicyError::Checkpoint("empty file".into()))??;
    if magic.trim() != "blockrl-checkpoint v1" {
        return Err(PolicyError::Checkpoint(format!("bad magic line: {magic}")));
    }
    let header = lines
        .next()
        .ok_or_else(|| PolicyError::Checkpoint("missing header".into()))??;
    let mut response_len = None;
    let mut vocab_size = None;
    let mut mask_id = None;
    let mut version = None;
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| PolicyError::Checkpoint(format!("bad header field: {field}")))?;
        let value: u64 = value
            .parse()
            .map_err(|_| PolicyError::Checkpoint(format!("bad header value: {field}")))?;
        match key {
            "response_len" => response_len = Some(value as usize),
            "vocab_size" => vocab_size = Some(value as u32),
            "mask_id" => mask_id = Some(value as u32),
            "version" => version = Some(value),
            _ => {
                return Err(PolicyError::Checkpoint(format!(
                    "unknown header key: {key}"
                )))
            }
        }
    }
    let (response_len, vocab_size, mask_id, version) =
        match (response_len, vocab_size, mask_id, version) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(PolicyError::Checkpoint("incomplete header".into())),
        };
    let vocab = Vocab::new(vocab_size, mask_id)
        .map_err(|e: TaskError| PolicyError::Checkpoint(e.to_string()))?;
    let spec = FeatureSpec::new(response_len, vocab);
    let expected = spec.feature_dim() * vocab_size as usize;
    let mut weights = Vec::with_capacity(expected);
    for line in lines {
        let line = line?;
        for tok in line.split_whitespace() {
            let w: f64 = tok
                .parse()
                .map_err(|_| PolicyError::Checkpoint(format!("bad weight: {tok}")))?;
            weights.push(w);
        }
    }
    if weights.len() != expected {
        return Err(PolicyError::Checkpoint(format!(
            "expected {expected} weights, found {}",
            weights.len()
        )));
    }
    Ok(PolicyParams {
        spec,
        weights,
        version,
    })
}
