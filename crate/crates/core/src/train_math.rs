//! Loss and reward arithmetic over plain log-probability sequences.
//!
//! * hybrid objective: batch mean of the reasoning-target NLL or the
//!   direct-target NLL, chosen per example by an indicator;
//! * binary reward: 1 iff the reward model's "correct" probability is
//!   strictly above 0.4 and the response is structurally valid;
//! * clipped surrogate: `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
//!
//! The surrogate is an objective to maximize. Trainers ascend it, or descend
//! its negation.

use serde::{Deserialize, Serialize};

pub use crate::guard::softmax;

/// Reward-model probability must exceed this for a positive reward.
pub const REWARD_THRESHOLD: f64 = 0.4;

/// Largest allowed `new - old` log-ratio before `exp` is considered unsafe.
pub const MAX_LOG_RATIO: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MathError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("log-probability sequence is empty")]
    EmptySequence,
    #[error("log-probability {value} at position {index} is not a finite value <= 0")]
    InvalidLogProb { index: usize, value: f64 },
    #[error("example selects the {0} branch but has no log-probabilities for it")]
    MissingBranch(&'static str),
    #[error("clip epsilon {0} outside (0, 1)")]
    InvalidEpsilon(f64),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("log-ratio {0} exceeds {MAX_LOG_RATIO} nats")]
    RatioOverflow(f64),
    #[error("non-finite log-probability in PPO step")]
    NonFinite,
}

/// Per-token log-probabilities of one target sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenLogProbs(Vec<f64>);

impl TokenLogProbs {
    pub fn new(values: Vec<f64>) -> Result<Self, MathError> {
        if values.is_empty() {
            return Err(MathError::EmptySequence);
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v > 0.0)
        {
            return Err(MathError::InvalidLogProb { index, value });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for TokenLogProbs {
    type Error = MathError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<TokenLogProbs> for Vec<f64> {
    fn from(t: TokenLogProbs) -> Self {
        t.0
    }
}

/// Sequence negative log-likelihood, `-sum(log p)`.
pub fn nll(seq: &TokenLogProbs) -> f64 {
    -seq.0.iter().sum::<f64>()
}

/// One training example for the hybrid objective. `reasoning` plays the role
/// of the mode indicator: true selects the reasoning target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridExample {
    pub reason_logprobs: Option<TokenLogProbs>,
    pub direct_logprobs: Option<TokenLogProbs>,
    pub reasoning: bool,
}

impl HybridExample {
    pub fn reason(lp: TokenLogProbs) -> Self {
        Self {
            reason_logprobs: Some(lp),
            direct_logprobs: None,
            reasoning: true,
        }
    }

    pub fn direct(lp: TokenLogProbs) -> Self {
        Self {
            reason_logprobs: None,
            direct_logprobs: Some(lp),
            reasoning: false,
        }
    }

    /// NLL of the branch the indicator selects.
    pub fn selected_nll(&self) -> Result<f64, MathError> {
        if self.reasoning {
            self.reason_logprobs
                .as_ref()
                .map(nll)
                .ok_or(MathError::MissingBranch("reasoning"))
        } else {
            self.direct_logprobs
                .as_ref()
                .map(nll)
                .ok_or(MathError::MissingBranch("direct"))
        }
    }
}

/// Batch mean of each example's selected NLL.
pub fn hybrid_loss(batch: &[HybridExample]) -> Result<f64, MathError> {
    if batch.is_empty() {
        return Err(MathError::EmptyBatch);
    }
    let mut total = 0.0;
    for ex in batch {
        total += ex.selected_nll()?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardInput {
    /// Reward-model probability of the "correct" label.
    pub correct_prob: f64,
    /// Structural validity of the response for its mode.
    pub valid: bool,
}

impl RewardInput {
    pub fn new(correct_prob: f64, valid: bool) -> Result<Self, MathError> {
        if !(0.0..=1.0).contains(&correct_prob) {
            return Err(MathError::InvalidProbability(correct_prob));
        }
        Ok(Self {
            correct_prob,
            valid,
        })
    }
}

pub fn reward(input: RewardInput) -> u8 {
    u8::from(input.correct_prob > REWARD_THRESHOLD && input.valid)
}

/// Probability of class `correct` under a softmax over reward-model logits.
pub fn correct_prob_from_logits(logits: &[f64], correct: usize) -> Option<f64> {
    softmax(logits).ok()?.get(correct).copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoStep {
    pub old_logprob: f64,
    pub new_logprob: f64,
    pub advantage: f64,
    pub epsilon: f64,
}

impl PpoStep {
    fn check(&self) -> Result<(), MathError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(MathError::InvalidEpsilon(self.epsilon));
        }
        if !self.old_logprob.is_finite() || !self.new_logprob.is_finite() {
            return Err(MathError::NonFinite);
        }
        let log_ratio = self.new_logprob - self.old_logprob;
        if log_ratio > MAX_LOG_RATIO {
            return Err(MathError::RatioOverflow(log_ratio));
        }
        Ok(())
    }

    pub fn ratio(&self) -> Result<f64, MathError> {
        self.check()?;
        Ok((self.new_logprob - self.old_logprob).exp())
    }
}

/// Clipped surrogate value of one step.
pub fn ppo_term(step: &PpoStep) -> Result<f64, MathError> {
    let r = step.ratio()?;
    let clipped = r.clamp(1.0 - step.epsilon, 1.0 + step.epsilon);
    Ok((r * step.advantage).min(clipped * step.advantage))
}

/// Derivative of [`ppo_term`] with respect to `new_logprob`.
///
/// Zero where the clipped branch is strictly smaller (the clip is active);
/// `r * A` otherwise.
pub fn ppo_term_grad(step: &PpoStep) -> Result<f64, MathError> {
    let r = step.ratio()?;
    let a = step.advantage;
    let clipped = r.clamp(1.0 - step.epsilon, 1.0 + step.epsilon);
    if clipped * a < r * a {
        Ok(0.0)
    } else {
        Ok(r * a)
    }
}

/// Mean clipped surrogate over steps.
pub fn ppo_objective(steps: &[PpoStep]) -> Result<f64, MathError> {
    if steps.is_empty() {
        return Err(MathError::EmptyBatch);
    }
    let mut total = 0.0;
    for s in steps {
        total += ppo_term(s)?;
    }
    Ok(total / steps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lp(v: &[f64]) -> TokenLogProbs {
        TokenLogProbs::new(v.to_vec()).unwrap()
    }

    fn step(r: f64, a: f64, eps: f64) -> PpoStep {
        PpoStep {
            old_logprob: -1.0,
            new_logprob: -1.0 + r.ln(),
            advantage: a,
            epsilon: eps,
        }
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll(&lp(&[-0.5, -1.5])), 2.0);
        assert_eq!(nll(&lp(&[0.0])), 0.0);
        let uniform = (1.0f64 / 10.0).ln();
        let got = nll(&lp(&[uniform; 4]));
        assert!((got - 4.0 * 10f64.ln()).abs() < 1e-12);
        assert!((got - 9.2103).abs() < 1e-4);
    }

    #[test]
    fn logprob_validation() {
        assert_eq!(TokenLogProbs::new(vec![]), Err(MathError::EmptySequence));
        assert!(TokenLogProbs::new(vec![0.1]).is_err());
        assert!(TokenLogProbs::new(vec![f64::NEG_INFINITY]).is_err());
        assert!(serde_json::from_str::<TokenLogProbs>("[0.5]").is_err());
    }

    #[test]
    fn hybrid_examples() {
        let batch = [HybridExample::reason(lp(&[-2.0])), HybridExample::direct(lp(&[-4.0]))];
        assert_eq!(hybrid_loss(&batch).unwrap(), 3.0);

        let all_reason = [
            HybridExample::reason(lp(&[-1.0, -0.5])),
            HybridExample::reason(lp(&[-3.0])),
        ];
        assert_eq!(hybrid_loss(&all_reason).unwrap(), (1.5 + 3.0) / 2.0);

        assert_eq!(hybrid_loss(&[HybridExample::direct(lp(&[-7.7]))]).unwrap(), 7.7);
        assert_eq!(hybrid_loss(&[]), Err(MathError::EmptyBatch));

        let broken = HybridExample {
            reason_logprobs: None,
            direct_logprobs: Some(lp(&[-1.0])),
            reasoning: true,
        };
        assert_eq!(hybrid_loss(&[broken]), Err(MathError::MissingBranch("reasoning")));
    }

    #[test]
    fn reward_table() {
        let r = |p, v| reward(RewardInput::new(p, v).unwrap());
        assert_eq!(r(0.9, true), 1);
        assert_eq!(r(0.39, true), 0);
        assert_eq!(r(0.40, true), 0);
        assert_eq!(r(0.41, true), 1);
        assert_eq!(r(0.9, false), 0);
        assert!(RewardInput::new(1.2, true).is_err());
    }

    #[test]
    fn correct_prob_helper() {
        let p = correct_prob_from_logits(&[0.0, 0.0], 1).unwrap();
        assert!((p - 0.5).abs() < 1e-15);
        assert_eq!(correct_prob_from_logits(&[0.0], 3), None);
    }

    #[test]
    fn ppo_examples() {
        let s = PpoStep {
            old_logprob: -0.3,
            new_logprob: -0.3,
            advantage: 0.7,
            epsilon: 0.2,
        };
        assert!((ppo_term(&s).unwrap() - 0.7).abs() < 1e-12);
        assert!((ppo_term(&step(1.5, 1.0, 0.2)).unwrap() - 1.2).abs() < 1e-12);
        assert!((ppo_term(&step(0.5, -1.0, 0.2)).unwrap() + 0.8).abs() < 1e-12);
    }

    #[test]
    fn ppo_objective_examples() {
        let a = step(1.5, 1.0, 0.2);
        let b = step(0.5, -1.0, 0.2);
        assert_eq!(ppo_objective(&[a]).unwrap(), ppo_term(&a).unwrap());
        assert!((ppo_objective(&[a, b]).unwrap() - 0.2).abs() < 1e-12);
        let zero = [step(1.7, 0.0, 0.2), step(0.3, 0.0, 0.1)];
        assert_eq!(ppo_objective(&zero).unwrap(), 0.0);
        assert_eq!(ppo_objective(&[]), Err(MathError::EmptyBatch));
    }

    #[test]
    fn ppo_errors() {
        let s = PpoStep {
            old_logprob: -100.0,
            new_logprob: -1.0,
            advantage: 1.0,
            epsilon: 0.2,
        };
        assert!(matches!(ppo_term(&s), Err(MathError::RatioOverflow(_))));
        assert!(matches!(
            ppo_term(&step(1.0, 1.0, 1.0)),
            Err(MathError::InvalidEpsilon(_))
        ));
    }

    #[test]
    fn grad_matches_finite_difference() {
        for (r, a) in [(1.0, 0.7), (1.5, 1.0), (0.5, -1.0), (1.1, -2.0), (0.7, 3.0), (1.3, -0.5)] {
            let s = step(r, a, 0.2);
            let h = 1e-6;
            let mut up = s;
            up.new_logprob += h;
            let mut dn = s;
            dn.new_logprob -= h;
            let fd = (ppo_term(&up).unwrap() - ppo_term(&dn).unwrap()) / (2.0 * h);
            assert!((fd - ppo_term_grad(&s).unwrap()).abs() < 1e-6, "r={r} a={a}");
        }
    }

    fn arb_step() -> impl Strategy<Value = PpoStep> {
        (-20.0f64..0.0, -3.0f64..3.0, -5.0f64..5.0, 0.01f64..0.99).prop_map(
            |(old, delta, adv, eps)| PpoStep {
                old_logprob: old,
                new_logprob: old + delta,
                advantage: adv,
                epsilon: eps,
            },
        )
    }

    proptest! {
        #[test]
        fn pessimism_and_inactive_clip(s in arb_step()) {
            let v = ppo_term(&s).unwrap();
            let r = s.ratio().unwrap();
            let clipped = r.clamp(1.0 - s.epsilon, 1.0 + s.epsilon);
            prop_assert!(v <= r * s.advantage);
            prop_assert!(v <= clipped * s.advantage);
            if (r - 1.0).abs() <= s.epsilon {
                prop_assert_eq!(v, r * s.advantage);
            }
        }

        #[test]
        fn reward_monotone(p in 0.0f64..1.0, q in 0.0f64..1.0, valid: bool) {
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            prop_assert!(reward(RewardInput::new(lo, valid).unwrap())
                <= reward(RewardInput::new(hi, valid).unwrap()));
            prop_assert_eq!(reward(RewardInput::new(p, false).unwrap()), 0);
        }

        #[test]
        fn hybrid_ignores_unused_branch(
            used in proptest::collection::vec(-5.0f64..0.0, 1..6),
            a in proptest::collection::vec(-5.0f64..0.0, 1..6),
            b in proptest::collection::vec(-5.0f64..0.0, 1..6),
        ) {
            let x = HybridExample { reason_logprobs: Some(lp(&used)), direct_logprobs: Some(lp(&a)), reasoning: true };
            let y = HybridExample { direct_logprobs: Some(lp(&b)), ..x.clone() };
            prop_assert_eq!(hybrid_loss(std::slice::from_ref(&x)).unwrap(), hybrid_loss(&[y]).unwrap());
            prop_assert!(hybrid_loss(&[x]).unwrap() >= 0.0);
        }
    }
}
