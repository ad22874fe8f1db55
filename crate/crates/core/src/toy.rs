//! A desk-scale trainable policy for exercising the hybrid loss and the
//! clipped PPO objective end to end.
//!
//! The policy is log-linear: the next-token logits are the sum of two
//! parameter rows, one indexed by the previous two tokens (an order-2 Markov
//! context) and one indexed by a hash of the prompt's content tokens together
//! with the previous token. Gradients of the softmax NLL are exact and cheap,
//! so they can be checked against finite differences.
//!
//! The task is single-digit addition modulo 10. The reasoning target spells
//! the sum out inside a think block, marking a carry with `c`:
//!
//! ```text
//! prompt (max):    7 + 5 /think <sep>
//! reasoning:       <think> 7 + 5 = c 2 </think> 2 <eos>
//! prompt (direct): 7 + 5 <sep>
//! direct:          2 <eos>
//! ```

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::marker::{parse_response, validate, ReasoningMode};
use crate::train_math::{
    hybrid_loss, ppo_term_grad, reward, HybridExample, MathError, PpoStep, RewardInput,
    TokenLogProbs,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToyError {
    #[error("token {0:?} is not in the toy vocabulary")]
    Vocab(String),
    #[error("token index {0} is out of range")]
    Index(usize),
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Math(#[from] MathError),
}

const TOKENS: [&str; 30] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "=", "c", "<think>", "</think>",
    "/think", "/short", "/medium", "/long", "<sep>", "<eos>", "a", "b", "d", "e", "f", "g", "h",
    "i", "j",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyVocab {
    tokens: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for ToyVocab {
    fn default() -> Self {
        let tokens = TOKENS.to_vec();
        let index = tokens.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        Self { tokens, index }
    }
}

impl ToyVocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize, ToyError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| ToyError::Vocab(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&'static str, ToyError> {
        self.tokens.get(id).copied().ok_or(ToyError::Index(id))
    }

    /// Splits on whitespace and maps every piece to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ToyError> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, stopping at `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> Result<String, ToyError> {
        let eos = self.eos();
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == eos {
                break;
            }
            parts.push(self.token(id)?);
        }
        Ok(parts.join(" "))
    }

    pub fn eos(&self) -> usize {
        self.index["<eos>"]
    }

    pub fn sep(&self) -> usize {
        self.index["<sep>"]
    }

    fn is_control(&self, id: usize) -> bool {
        matches!(
            self.tokens.get(id),
            Some(&"/think" | &"/short" | &"/medium" | &"/long" | &"<sep>")
        )
    }

    /// Token ids of the mode's marker sequence.
    pub fn marker_ids(&self, mode: ReasoningMode) -> Vec<usize> {
        mode.marker()
            .map(|m| self.encode(m).expect("markers are in the vocabulary"))
            .unwrap_or_default()
    }
}

/// Prompt and target token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySequence {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

/// Token-level counterpart of [`HybridExample`]: both targets, plus the
/// indicator saying which one the loss uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridSource {
    pub reason: Option<ToySequence>,
    pub direct: Option<ToySequence>,
    pub reasoning: bool,
}

impl HybridSource {
    fn selected(&self) -> Result<&ToySequence, ToyError> {
        let branch = if self.reasoning {
            self.reason.as_ref()
        } else {
            self.direct.as_ref()
        };
        branch.ok_or(ToyError::Math(MathError::MissingBranch(if self.reasoning {
            "reasoning"
        } else {
            "direct"
        })))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyItem {
    pub a: u8,
    pub b: u8,
}

impl ToyItem {
    pub fn sum(&self) -> u8 {
        (self.a + self.b) % 10
    }

    pub fn carry(&self) -> bool {
        self.a + self.b >= 10
    }

    pub fn instruction(&self) -> String {
        format!("{} + {}", self.a, self.b)
    }

    pub fn prompt(&self, vocab: &ToyVocab, mode: ReasoningMode) -> Vec<usize> {
        let mut p = vocab.encode(&self.instruction()).expect("digits are in vocab");
        p.extend(vocab.marker_ids(mode));
        p.push(vocab.sep());
        p
    }

    pub fn direct_target(&self, vocab: &ToyVocab) -> Vec<usize> {
        vocab
            .encode(&format!("{} <eos>", self.sum()))
            .expect("in vocab")
    }

    pub fn reasoning_target(&self, vocab: &ToyVocab) -> Vec<usize> {
        let carry = if self.carry() { "c " } else { "" };
        let s = self.sum();
        let text = format!(
            "<think> {} + {} = {carry}{s} </think> {s} <eos>",
            self.a, self.b
        );
        vocab.encode(&text).expect("in vocab")
    }

    pub fn hybrid_source(&self, vocab: &ToyVocab, reasoning: bool) -> HybridSource {
        HybridSource {
            reason: Some(ToySequence {
                prompt: self.prompt(vocab, ReasoningMode::Max),
                target: self.reasoning_target(vocab),
            }),
            direct: Some(ToySequence {
                prompt: self.prompt(vocab, ReasoningMode::Direct),
                target: self.direct_target(vocab),
            }),
            reasoning,
        }
    }
}

/// Seeded generator of addition items.
#[derive(Debug, Clone)]
pub struct ToyTask {
    rng: ChaCha8Rng,
}

impl ToyTask {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_item(&mut self) -> ToyItem {
        ToyItem {
            a: self.rng.gen_range(0..10),
            b: self.rng.gen_range(0..10),
        }
    }

    pub fn items(&mut self, n: usize) -> Vec<ToyItem> {
        (0..n).map(|_| self.next_item()).collect()
    }
}

/// Sparse gradient: parameter row index to a dense row of length V.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub rows: HashMap<usize, Vec<f64>>,
}

impl Gradient {
    fn add(&mut self, row: usize, width: usize, f: impl Fn(usize) -> f64) {
        let r = self.rows.entry(row).or_insert_with(|| vec![0.0; width]);
        for (j, g) in r.iter_mut().enumerate() {
            *g += f(j);
        }
    }

    pub fn get(&self, param: usize, width: usize) -> f64 {
        self.rows
            .get(&(param / width))
            .map_or(0.0, |r| r[param % width])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: ToyVocab,
    prompt_buckets: usize,
    params: Vec<f64>,
}

pub const DEFAULT_PROMPT_BUCKETS: usize = 1024;

impl ToyPolicy {
    /// All-zero parameters: the uniform policy.
    pub fn uniform() -> Self {
        Self::with_buckets(DEFAULT_PROMPT_BUCKETS)
    }

    pub fn with_buckets(prompt_buckets: usize) -> Self {
        let vocab = ToyVocab::default();
        let v = vocab.len();
        let rows = v * v + prompt_buckets.max(1) * v;
        Self {
            vocab,
            prompt_buckets: prompt_buckets.max(1),
            params: vec![0.0; rows * v],
        }
    }

    /// Parameters drawn uniformly from `[-scale, scale]`.
    pub fn random(seed: u64, scale: f64) -> Self {
        let mut p = Self::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut p.params {
            *w = rng.gen_range(-scale..=scale);
        }
        p
    }

    pub fn vocab(&self) -> &ToyVocab {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn width(&self) -> usize {
        self.vocab.len()
    }

    /// FNV-1a over the prompt's content tokens, ignoring markers and `<sep>`.
    fn bucket(&self, prompt: &[usize]) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &t in prompt.iter().filter(|&&t| !self.vocab.is_control(t)) {
            h ^= t as u64 + 1;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (h % self.prompt_buckets as u64) as usize
    }

    fn feature_rows(&self, bucket: usize, history: &[usize]) -> [usize; 2] {
        let v = self.width();
        let sep = self.vocab.sep();
        let n = history.len();
        let prev1 = if n >= 1 { history[n - 1] } else { sep };
        let prev2 = if n >= 2 { history[n - 2] } else { sep };
        [prev2 * v + prev1, v * v + bucket * v + prev1]
    }

    fn row(&self, r: usize) -> &[f64] {
        let v = self.width();
        &self.params[r * v..(r + 1) * v]
    }

    fn logits_for_rows(&self, rows: [usize; 2]) -> Vec<f64> {
        let (a, b) = (self.row(rows[0]), self.row(rows[1]));
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    /// Next-token logits after `history` (prompt followed by generated tokens).
    pub fn next_logits(&self, prompt: &[usize], history: &[usize]) -> Vec<f64> {
        self.logits_for_rows(self.feature_rows(self.bucket(prompt), history))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ToyError> {
        match ids.iter().find(|&&t| t >= self.width()) {
            Some(&t) => Err(ToyError::Index(t)),
            None => Ok(()),
        }
    }

    /// Teacher-forced per-token log-probabilities of `target` after `prompt`.
    pub fn logprob_of(&self, prompt: &[usize], target: &[usize]) -> Result<TokenLogProbs, ToyError> {
        if target.is_empty() {
            return Err(ToyError::EmptyTarget);
        }
        self.check_ids(prompt)?;
        self.check_ids(target)?;
        let bucket = self.bucket(prompt);
        let mut history = prompt.to_vec();
        let mut out = Vec::with_capacity(target.len());
        for &y in target {
            let logits = self.logits_for_rows(self.feature_rows(bucket, &history));
            out.push(log_softmax_at(&logits, y));
            history.push(y);
        }
        Ok(TokenLogProbs::new(out)?)
    }

    /// Hybrid loss of a batch, evaluated through the log-probability route.
    pub fn hybrid_loss(&self, batch: &[HybridSource]) -> Result<f64, ToyError> {
        let examples = batch
            .iter()
            .map(|src| {
                let lp = |s: &Option<ToySequence>| {
                    s.as_ref()
                        .map(|s| self.logprob_of(&s.prompt, &s.target))
                        .transpose()
                };
                Ok(HybridExample {
                    reason_logprobs: lp(&src.reason)?,
                    direct_logprobs: lp(&src.direct)?,
                    reasoning: src.reasoning,
                })
            })
            .collect::<Result<Vec<_>, ToyError>>()?;
        Ok(hybrid_loss(&examples)?)
    }

    /// Analytic gradient of the hybrid loss: `(softmax - onehot) / N` on
    /// every active feature row at every target position.
    pub fn hybrid_gradient(&self, batch: &[HybridSource]) -> Result<Gradient, ToyError> {
        if batch.is_empty() {
            return Err(MathError::EmptyBatch.into());
        }
        let scale = 1.0 / batch.len() as f64;
        let v = self.width();
        let mut grad = Gradient::default();
        for src in batch {
            let seq = src.selected()?;
            if seq.target.is_empty() {
                return Err(ToyError::EmptyTarget);
            }
            self.check_ids(&seq.prompt)?;
            self.check_ids(&seq.target)?;
            let bucket = self.bucket(&seq.prompt);
            let mut history = seq.prompt.clone();
            for &y in &seq.target {
                let rows = self.feature_rows(bucket, &history);
                let probs = softmax_vec(&self.logits_for_rows(rows));
                for r in rows {
                    grad.add(r, v, |j| scale * (probs[j] - f64::from(u8::from(j == y))));
                }
                history.push(y);
            }
        }
        Ok(grad)
    }

    fn apply(&mut self, grad: &Gradient, step: f64) {
        let v = self.width();
        for (&r, g) in &grad.rows {
            for (w, d) in self.params[r * v..(r + 1) * v].iter_mut().zip(g) {
                *w += step * d;
            }
        }
    }

    /// Generates up to `max_len` tokens, stopping after `<eos>`. Returns the
    /// tokens and their log-probabilities under this policy.
    pub fn generate(
        &self,
        prompt: &[usize],
        max_len: usize,
        decoding: Decoding,
        rng: &mut impl Rng,
    ) -> (Vec<usize>, Vec<f64>) {
        let bucket = self.bucket(prompt);
        let eos = self.vocab.eos();
        let mut history = prompt.to_vec();
        let mut out = Vec::new();
        let mut lps = Vec::new();
        while out.len() < max_len {
            let logits = self.logits_for_rows(self.feature_rows(bucket, &history));
            let probs = softmax_vec(&logits);
            let tok = match decoding {
                Decoding::Greedy => argmax(&probs),
                Decoding::Sample => sample_from(&probs, rng),
            };
            lps.push(log_softmax_at(&logits, tok));
            out.push(tok);
            history.push(tok);
            if tok == eos {
                break;
            }
        }
        (out, lps)
    }
}

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    (logits[idx] - lse).min(0.0)
}

/// Lowest index among the maxima.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn sample_from(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// One gradient-descent step on the hybrid loss. Returns the pre-step loss.
pub fn sft_step(
    policy: &mut ToyPolicy,
    batch: &[HybridSource],
    learning_rate: f64,
) -> Result<f64, ToyError> {
    if learning_rate.is_nan() || learning_rate < 0.0 {
        return Err(ToyError::Precondition("learning rate must be >= 0".into()));
    }
    let loss = policy.hybrid_loss(batch)?;
    if learning_rate > 0.0 {
        let grad = policy.hybrid_gradient(batch)?;
        policy.apply(&grad, -learning_rate);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that an example uses its reasoning target.
    pub reasoning_fraction: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 0.1,
            reasoning_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Hybrid SFT on freshly sampled batches; returns the per-step loss curve.
pub fn sft_train(policy: &mut ToyPolicy, cfg: &SftConfig) -> Result<Vec<f64>, ToyError> {
    if cfg.batch_size == 0 {
        return Err(ToyError::Precondition("batch size must be >= 1".into()));
    }
    let mut task = ToyTask::new(cfg.seed);
    let mut coin = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c01d);
    let vocab = policy.vocab().clone();
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<HybridSource> = (0..cfg.batch_size)
            .map(|_| {
                let item = task.next_item();
                item.hybrid_source(&vocab, coin.gen_bool(cfg.reasoning_fraction))
            })
            .collect();
        curve.push(sft_step(policy, &batch, cfg.learning_rate)?);
    }
    Ok(curve)
}

/// Compares the analytic hybrid-loss gradient to central finite differences
/// on up to `n_params` randomly chosen parameters of the example's active
/// rows. Returns the maximum relative error.
pub fn grad_check(
    policy: &ToyPolicy,
    example: &HybridSource,
    epsilon_fd: f64,
    n_params: usize,
    seed: u64,
) -> Result<f64, ToyError> {
    if !(1e-6..=1e-3).contains(&epsilon_fd) {
        return Err(ToyError::Precondition(format!(
            "finite-difference epsilon {epsilon_fd} outside [1e-6, 1e-3]"
        )));
    }
    let batch = std::slice::from_ref(example);
    let grad = policy.hybrid_gradient(batch)?;
    let v = policy.width();
    let mut active: Vec<usize> = grad
        .rows
        .keys()
        .flat_map(|&r| (r * v)..((r + 1) * v))
        .collect();
    active.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, active.len(), n_params.min(active.len()));
    let mut probe = policy.clone();
    let mut worst: f64 = 0.0;
    for i in picks {
        let k = active[i];
        let orig = probe.params[k];
        probe.params[k] = orig + epsilon_fd;
        let up = probe.hybrid_loss(batch)?;
        probe.params[k] = orig - epsilon_fd;
        let down = probe.hybrid_loss(batch)?;
        probe.params[k] = orig;
        let numeric = (up - down) / (2.0 * epsilon_fd);
        let analytic = grad.get(k, v);
        let denom = analytic.abs().max(numeric.abs());
        if denom > 1e-10 {
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// A sampled response to one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub item: ToyItem,
    pub mode: ReasoningMode,
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub text: String,
}

impl Rollout {
    pub fn is_valid(&self) -> bool {
        parse_response(&self.text).is_ok_and(|p| validate(&p, self.mode))
    }

    /// Answer text after the think block (or the whole text).
    pub fn answer(&self) -> Option<String> {
        parse_response(&self.text).ok().map(|p| p.answer)
    }
}

/// Reward-model stand-in that accepts every answer, so the binary reward
/// reduces to structural validity.
pub fn validity_reward(r: &Rollout) -> RewardInput {
    RewardInput {
        correct_prob: 1.0,
        valid: r.is_valid(),
    }
}

/// Reward-model stand-in that checks the final answer against the sum.
pub fn exact_answer_reward(r: &Rollout) -> RewardInput {
    let correct = r.answer().is_some_and(|a| a.trim() == r.item.sum().to_string());
    RewardInput {
        correct_prob: if correct { 1.0 } else { 0.0 },
        valid: r.is_valid(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub epochs: usize,
    pub rollouts_per_epoch: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub seed: u64,
    pub max_len: usize,
    /// EMA decay of the reward baseline.
    pub baseline_decay: f64,
    /// Gradient steps per batch of rollouts.
    pub updates_per_batch: usize,
    pub mode: ReasoningMode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            rollouts_per_epoch: 64,
            learning_rate: 100.0,
            clip_epsilon: 0.2,
            seed: 0,
            max_len: 16,
            baseline_decay: 0.9,
            updates_per_batch: 1,
            mode: ReasoningMode::Max,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoCurve {
    pub mean_reward: Vec<f64>,
    pub rejected_updates: usize,
}

/// Gradient of the mean clipped surrogate over all rollout tokens with
/// respect to the policy parameters. Advantages are per rollout and broadcast
/// to every token.
pub fn ppo_gradient(
    policy: &ToyPolicy,
    rollouts: &[Rollout],
    advantages: &[f64],
    epsilon: f64,
) -> Result<Gradient, ToyError> {
    let total: usize = rollouts.iter().map(|r| r.tokens.len()).sum();
    let mut grad = Gradient::default();
    if total == 0 {
        return Ok(grad);
    }
    let scale = 1.0 / total as f64;
    let v = policy.width();
    for (ro, &adv) in rollouts.iter().zip(advantages) {
        let bucket = policy.bucket(&ro.prompt);
        let mut history = ro.prompt.clone();
        for (&tok, &old) in ro.tokens.iter().zip(&ro.old_logprobs) {
            let rows = policy.feature_rows(bucket, &history);
            let logits = policy.logits_for_rows(rows);
            let step = PpoStep {
                old_logprob: old,
                new_logprob: log_softmax_at(&logits, tok),
                advantage: adv,
                epsilon,
            };
            let d = ppo_term_grad(&step)? * scale;
            if d != 0.0 {
                let probs = softmax_vec(&logits);
                for r in rows {
                    grad.add(r, v, |j| d * (f64::from(u8::from(j == tok)) - probs[j]));
                }
            }
            history.push(tok);
        }
    }
    Ok(grad)
}

/// PPO with a binary reward and an EMA baseline. Returns the mean reward of
/// each epoch's rollouts. Updates that would overflow the probability ratio
/// are skipped and counted.
pub fn ppo_train<F>(
    policy: &mut ToyPolicy,
    reward_fn: F,
    cfg: &PpoConfig,
) -> Result<PpoCurve, ToyError>
where
    F: Fn(&Rollout) -> RewardInput,
{
    if !(cfg.clip_epsilon > 0.0 && cfg.clip_epsilon < 1.0) {
        return Err(MathError::InvalidEpsilon(cfg.clip_epsilon).into());
    }
    let mut task = ToyTask::new(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut baseline = 0.0;
    let mut curve = PpoCurve::default();
    for _ in 0..cfg.epochs {
        let vocab = policy.vocab().clone();
        let rollouts: Vec<Rollout> = (0..cfg.rollouts_per_epoch)
            .map(|_| {
                let item = task.next_item();
                let prompt = item.prompt(&vocab, cfg.mode);
                let (tokens, old_logprobs) =
                    policy.generate(&prompt, cfg.max_len, Decoding::Sample, &mut rng);
                let text = vocab.decode(&tokens).expect("policy emits vocab ids");
                Rollout {
                    item,
                    mode: cfg.mode,
                    prompt,
                    tokens,
                    old_logprobs,
                    text,
                }
            })
            .collect();
        let rewards: Vec<f64> = rollouts
            .iter()
            .map(|r| f64::from(reward(reward_fn(r))))
            .collect();
        let mean = if rewards.is_empty() {
            0.0
        } else {
            rewards.iter().sum::<f64>() / rewards.len() as f64
        };
        let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
        for _ in 0..cfg.updates_per_batch.max(1) {
            match ppo_gradient(policy, &rollouts, &advantages, cfg.clip_epsilon) {
                Ok(g) => policy.apply(&g, cfg.learning_rate),
                Err(ToyError::Math(MathError::RatioOverflow(x))) => {
                    tracing::warn!(log_ratio = x, "ratio overflow, update rejected");
                    curve.rejected_updates += 1;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        baseline = cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * mean;
        curve.mean_reward.push(mean);
    }
    Ok(curve)
}

/// Fraction of greedy outputs whose think-block presence matches the mode,
/// over `n_prompts` prompts each decoded in direct and max form.
pub fn mode_conditioning_eval(
    policy: &ToyPolicy,
    task: &mut ToyTask,
    n_prompts: usize,
    max_len: usize,
) -> Result<f64, ToyError> {
    if n_prompts == 0 {
        return Err(ToyError::Precondition("n_prompts must be >= 1".into()));
    }
    let vocab = policy.vocab().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hits = 0usize;
    for item in task.items(n_prompts) {
        for mode in [ReasoningMode::Direct, ReasoningMode::Max] {
            let prompt = item.prompt(&vocab, mode);
            let (tokens, _) = policy.generate(&prompt, max_len, Decoding::Greedy, &mut rng);
            let text = vocab.decode(&tokens)?;
            if parse_response(&text).is_ok_and(|p| validate(&p, mode)) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (2 * n_prompts) as f64)
}
