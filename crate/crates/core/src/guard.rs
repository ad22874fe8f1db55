//! Logit-level language restriction.
//!
//! Tokens whose text contains a character from a restricted Unicode script get
//! their logit replaced by [`MASKED`] before the softmax, so they receive
//! exactly zero probability. [`guarded_sample`] applies the mask at every
//! decoding step.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unicode_script::{Script, UnicodeScript};

/// Stand-in for negative infinity. `exp(MASKED - max)` underflows to 0.
pub const MASKED: f64 = f64::MIN;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GuardError {
    #[error("unknown or non-restrictable script {0:?} (supported: {SUPPORTED})")]
    UnknownScript(String),
    #[error("banned index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("logit vector has length {got}, vocabulary has {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("logit at index {0} is not finite")]
    NonFinite(usize),
    #[error("every token is masked; no probability mass remains")]
    DegenerateDistribution,
    #[error("vocabulary must contain at least one token")]
    EmptyVocabulary,
}

const SUPPORTED: &str =
    "arabic, cyrillic, greek, hebrew, thai, devanagari, armenian, georgian, hiragana, katakana";

/// Scripts that may be restricted. Latin, Hangul, Han and script-neutral
/// characters (digits, punctuation) are never restrictable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RestrictableScript {
    Arabic,
    Cyrillic,
    Greek,
    Hebrew,
    Thai,
    Devanagari,
    Armenian,
    Georgian,
    Hiragana,
    Katakana,
}

impl RestrictableScript {
    pub const DEFAULT_BANNED: [RestrictableScript; 2] =
        [RestrictableScript::Arabic, RestrictableScript::Cyrillic];

    fn unicode(self) -> Script {
        match self {
            RestrictableScript::Arabic => Script::Arabic,
            RestrictableScript::Cyrillic => Script::Cyrillic,
            RestrictableScript::Greek => Script::Greek,
            RestrictableScript::Hebrew => Script::Hebrew,
            RestrictableScript::Thai => Script::Thai,
            RestrictableScript::Devanagari => Script::Devanagari,
            RestrictableScript::Armenian => Script::Armenian,
            RestrictableScript::Georgian => Script::Georgian,
            RestrictableScript::Hiragana => Script::Hiragana,
            RestrictableScript::Katakana => Script::Katakana,
        }
    }

    fn name(self) -> &'static str {
        match self {
            RestrictableScript::Arabic => "arabic",
            RestrictableScript::Cyrillic => "cyrillic",
            RestrictableScript::Greek => "greek",
            RestrictableScript::Hebrew => "hebrew",
            RestrictableScript::Thai => "thai",
            RestrictableScript::Devanagari => "devanagari",
            RestrictableScript::Armenian => "armenian",
            RestrictableScript::Georgian => "georgian",
            RestrictableScript::Hiragana => "hiragana",
            RestrictableScript::Katakana => "katakana",
        }
    }
}

impl fmt::Display for RestrictableScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RestrictableScript {
    type Err = GuardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase();
        let script = match key.as_str() {
            "arabic" => RestrictableScript::Arabic,
            "cyrillic" | "russian" => RestrictableScript::Cyrillic,
            "greek" => RestrictableScript::Greek,
            "hebrew" => RestrictableScript::Hebrew,
            "thai" => RestrictableScript::Thai,
            "devanagari" => RestrictableScript::Devanagari,
            "armenian" => RestrictableScript::Armenian,
            "georgian" => RestrictableScript::Georgian,
            "hiragana" => RestrictableScript::Hiragana,
            "katakana" => RestrictableScript::Katakana,
            _ => return Err(GuardError::UnknownScript(s.to_string())),
        };
        Ok(script)
    }
}

/// Parses a comma-separated script list such as `arabic,cyrillic`.
pub fn parse_script_list(list: &str) -> Result<Vec<RestrictableScript>, GuardError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self, GuardError> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(GuardError::EmptyVocabulary);
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RestrictedSet {
    banned: BTreeSet<usize>,
    scripts: Vec<RestrictableScript>,
}

impl RestrictedSet {
    /// Bans explicit indices, checked against a vocabulary size.
    pub fn from_indices(
        indices: impl IntoIterator<Item = usize>,
        vocab_size: usize,
    ) -> Result<Self, GuardError> {
        let banned: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&index) = banned.iter().find(|&&i| i >= vocab_size) {
            return Err(GuardError::IndexOutOfRange {
                index,
                size: vocab_size,
            });
        }
        Ok(Self {
            banned,
            scripts: Vec::new(),
        })
    }

    pub fn contains(&self, index: usize) -> bool {
        self.banned.contains(&index)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.banned.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.banned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banned.is_empty()
    }

    pub fn scripts(&self) -> &[RestrictableScript] {
        &self.scripts
    }
}

/// True when any character of `text` belongs to one of `scripts`.
pub fn contains_restricted(text: &str, scripts: &[RestrictableScript]) -> bool {
    text.chars()
        .any(|c| scripts.iter().any(|s| c.script() == s.unicode()))
}

/// Bans every token containing at least one character of a listed script.
pub fn derive_restricted_set(vocab: &Vocabulary, scripts: &[RestrictableScript]) -> RestrictedSet {
    let banned = vocab
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, tok)| contains_restricted(tok, scripts))
        .map(|(i, _)| i)
        .collect();
    RestrictedSet {
        banned,
        scripts: scripts.to_vec(),
    }
}

/// Replaces banned logits with [`MASKED`], leaving the rest untouched.
pub fn mask_logits(logits: &[f64], banned: &RestrictedSet) -> Result<Vec<f64>, GuardError> {
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(GuardError::NonFinite(i));
    }
    if let Some(index) = banned.indices().find(|&i| i >= logits.len()) {
        return Err(GuardError::IndexOutOfRange {
            index,
            size: logits.len(),
        });
    }
    let mut out = logits.to_vec();
    for i in banned.indices() {
        out[i] = MASKED;
    }
    Ok(out)
}

fn is_masked(z: f64) -> bool {
    z <= MASKED || z == f64::NEG_INFINITY
}

/// Numerically stable softmax that gives masked entries exactly zero.
pub fn masked_softmax(masked: &[f64]) -> Result<Vec<f64>, GuardError> {
    let max = masked
        .iter()
        .copied()
        .filter(|&z| !is_masked(z))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(GuardError::DegenerateDistribution);
    }
    let mut probs: Vec<f64> = masked
        .iter()
        .map(|&z| if is_masked(z) { 0.0 } else { (z - max).exp() })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Plain softmax over finite logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, GuardError> {
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(GuardError::NonFinite(i));
    }
    masked_softmax(logits)
}

/// Options for [`guarded_sample`] beyond the core arguments.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleOptions {
    /// Token that ends generation early; it is included in the output.
    pub stop_token: Option<usize>,
}

/// Autoregressively samples up to `max_len` token indices, masking banned
/// tokens at every step. Deterministic for a fixed seed.
pub fn guarded_sample<F>(
    mut next_logits: F,
    vocab: &Vocabulary,
    banned: &RestrictedSet,
    max_len: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<Vec<usize>, GuardError>
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = Vec::with_capacity(max_len);
    // Logit vectors are frequently identical between steps (e.g. context-free
    // sources); reuse the sampler in that case.
    let mut cache: Option<(Vec<f64>, WeightedIndex<f64>)> = None;
    while seq.len() < max_len {
        let logits = next_logits(&seq);
        if logits.len() != vocab.len() {
            return Err(GuardError::LengthMismatch {
                got: logits.len(),
                expected: vocab.len(),
            });
        }
        let reuse = matches!(&cache, Some((prev, _)) if *prev == logits);
        if !reuse {
            let probs = masked_softmax(&mask_logits(&logits, banned)?)?;
            let dist =
                WeightedIndex::new(&probs).map_err(|_| GuardError::DegenerateDistribution)?;
            cache = Some((logits, dist));
        }
        let (_, dist) = cache.as_ref().expect("sampler cached above");
        let tok = dist.sample(&mut rng);
        seq.push(tok);
        if opts.stop_token == Some(tok) {
            break;
        }
    }
    Ok(seq)
}

/// A small mixed-script vocabulary for demonstrating the guard.
pub fn demo_vocabulary() -> Vocabulary {
    Vocabulary::new([
        "the", "patient", "has", "fever", "and", "cough", ".", ",", "환자", "는", "발열", "이",
        "있다", "기침", "폐렴", "의심", "мир", "болезнь", "врач", "и", "مريض", "طبيب", "حمى",
        "في", "Ωμέγα", "שלום", "ไข้", "医", "123", "<eos>",
    ])
    .expect("non-empty")
}
