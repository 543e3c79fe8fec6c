//! Synthetic verifiable tasks: modular-arithmetic chains rendered as token
//! sequences, with exact answer checking.
//!
//! A query such as `7 + 3 * 5 mod 6` is evaluated left to right with every
//! intermediate result reduced modulo `m`. Answers are written by the policy
//! as digit tokens between the answer delimiter and end-of-sequence.

use alloc::vec::Vec;

use crate::error::config_err;
use crate::rng::{self, Domain};
use crate::Result;

pub type TokenId = u32;

/// Token layout. Ids `0..digit_base` are digits; `eos` and `answer_delim`
/// are distinct special tokens outside the digit range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
    eos: TokenId,
    answer_delim: TokenId,
    digit_base: u32,
}

/// Operators appearing in prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Mod,
}

impl Operator {
    const ALL: [Operator; 4] = [Operator::Add, Operator::Sub, Operator::Mul, Operator::Mod];

    fn offset(self) -> u32 {
        match self {
            Operator::Add => 0,
            Operator::Sub => 1,
            Operator::Mul => 2,
            Operator::Mod => 3,
        }
    }
}

impl Vocabulary {
    pub fn new(size: u32, eos: TokenId, answer_delim: TokenId, digit_base: u32) -> Result<Self> {
        if size < 4 {
            return Err(config_err("vocabulary size must be at least 4"));
        }
        if eos == answer_delim {
            return Err(config_err("eos and answer delimiter must differ"));
        }
        if eos >= size || answer_delim >= size {
            return Err(config_err("special token ids must be below the vocabulary size"));
        }
        if digit_base < 2 || digit_base > size - 2 {
            return Err(config_err("digit base must be in [2, size - 2]"));
        }
        if eos < digit_base || answer_delim < digit_base {
            return Err(config_err("special tokens must not overlap the digit range"));
        }
        Ok(Self { size, eos, answer_delim, digit_base })
    }

    /// Sixteen tokens: digits `0-9`, `+ - * mod`, delimiter `14`, eos `15`.
    pub fn arithmetic() -> Self {
        Self { size: 16, eos: 15, answer_delim: 14, digit_base: 10 }
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn answer_delim(&self) -> TokenId {
        self.answer_delim
    }

    pub fn digit_base(&self) -> u32 {
        self.digit_base
    }

    pub fn is_digit(&self, token: TokenId) -> bool {
        token < self.digit_base
    }

    /// Operators sit right after the digits, when the layout has room.
    pub fn operator_token(&self, op: Operator) -> Option<TokenId> {
        let id = self.digit_base + op.offset();
        (id < self.size && id != self.eos && id != self.answer_delim).then_some(id)
    }

    /// Most-significant digit first.
    pub fn encode_number(&self, mut value: u64) -> Vec<TokenId> {
        let base = u64::from(self.digit_base);
        let mut digits = Vec::new();
        loop {
            digits.push((value % base) as TokenId);
            value /= base;
            if value == 0 {
                break;
            }
        }
        digits.reverse();
        digits
    }

    /// Response tokens that state `answer` and stop.
    pub fn answer_tokens(&self, answer: u64) -> Vec<TokenId> {
        let mut tokens = Vec::with_capacity(4);
        tokens.push(self.answer_delim);
        tokens.extend(self.encode_number(answer));
        tokens.push(self.eos);
        tokens
    }
}

/// Generator parameters recorded with each query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DifficultyMeta {
    /// Number of binary operations before the final `mod`.
    pub steps: u32,
    /// Operands are drawn from `0..=max_operand`.
    pub max_operand: u64,
    pub modulus: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub answer: u64,
    pub difficulty: DifficultyMeta,
}

/// A sampled continuation with the sampling policy's per-token log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub logprobs_old: Vec<f64>,
    /// Set when no eos was emitted within the length budget.
    pub truncated: bool,
    pub extracted_answer: Option<u64>,
}

impl Response {
    pub fn new(tokens: Vec<TokenId>, logprobs_old: Vec<f64>, vocab: &Vocabulary) -> Self {
        debug_assert_eq!(tokens.len(), logprobs_old.len());
        let truncated = tokens.last() != Some(&vocab.eos());
        let extracted_answer = extract_answer(&tokens, vocab);
        Self { tokens, logprobs_old, truncated, extracted_answer }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Decode the digits between the last answer delimiter and the first eos.
pub fn extract_answer(tokens: &[TokenId], vocab: &Vocabulary) -> Option<u64> {
    let eos = tokens.iter().position(|&t| t == vocab.eos())?;
    let head = &tokens[..eos];
    let delim = head.iter().rposition(|&t| t == vocab.answer_delim())?;
    let span = &head[delim + 1..];
    if span.is_empty() || span.len() > 18 || !span.iter().all(|&t| vocab.is_digit(t)) {
        return None;
    }
    let base = u64::from(vocab.digit_base());
    span.iter().try_fold(0u64, |acc, &d| acc.checked_mul(base)?.checked_add(u64::from(d)))
}

/// Outcome reward: 1.0 for an exactly matching answer, 0.0 otherwise.
pub fn verify(query: &Query, response: &Response) -> f64 {
    match response.extracted_answer {
        Some(a) if a == query.answer => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub count: usize,
    pub min_steps: u32,
    pub max_steps: u32,
    pub max_operand: u64,
    pub min_modulus: u64,
    pub max_modulus: u64,
    pub vocab: Vocabulary,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            count: 200,
            min_steps: 1,
            max_steps: 3,
            max_operand: 9,
            min_modulus: 5,
            max_modulus: 13,
            vocab: Vocabulary::arithmetic(),
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(config_err("dataset count must be positive"));
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return Err(config_err("step range must be non-empty and start at 1 or more"));
        }
        if self.min_modulus < 2 || self.min_modulus > self.max_modulus {
            return Err(config_err("modulus range must be non-empty and start at 2 or more"));
        }
        if self.max_operand == 0 {
            return Err(config_err("max operand must be positive"));
        }
        if Operator::ALL.iter().any(|&op| self.vocab.operator_token(op).is_none()) {
            return Err(config_err("vocabulary has no room for operator tokens"));
        }
        Ok(())
    }
}

/// Deterministic dataset for `(spec, seed)`. Step counts cycle through the
/// requested range so every difficulty level is represented.
pub fn generate_dataset(spec: &GeneratorSpec, seed: u64) -> Result<Vec<Query>> {
    spec.validate()?;
    let vocab = spec.vocab;
    let span = u64::from(spec.max_steps - spec.min_steps + 1);
    let ops = [Operator::Add, Operator::Sub, Operator::Mul];
    let mut rng = rng::stream(seed, Domain::Dataset, 0);
    let mut queries = Vec::with_capacity(spec.count);
    for i in 0..spec.count as u64 {
        let steps = spec.min_steps + (i % span) as u32;
        let modulus = spec.min_modulus + rng::below(&mut rng, spec.max_modulus - spec.min_modulus + 1);
        let mut operand = || rng::below(&mut rng, spec.max_operand + 1);
        let first = operand();
        let mut terms = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            terms.push(operand());
        }
        let mut prompt = vocab.encode_number(first);
        let mut acc = first % modulus;
        for &b in &terms {
            let op = ops[rng::below(&mut rng, 3) as usize];
            prompt.push(vocab.operator_token(op).expect("validated"));
            prompt.extend(vocab.encode_number(b));
            acc = apply_mod(acc, op, b, modulus);
        }
        prompt.push(vocab.operator_token(Operator::Mod).expect("validated"));
        prompt.extend(vocab.encode_number(modulus));
        queries.push(Query {
            id: i,
            prompt_tokens: prompt,
            answer: acc,
            difficulty: DifficultyMeta { steps, max_operand: spec.max_operand, modulus },
        });
    }
    Ok(queries)
}

fn apply_mod(acc: u64, op: Operator, b: u64, m: u64) -> u64 {
    let (a, b, m) = (i128::from(acc), i128::from(b), i128::from(m));
    let v = match op {
        Operator::Add => a + b,
        Operator::Sub => a - b,
        Operator::Mul => a * b,
        Operator::Mod => a,
    };
    v.rem_euclid(m) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn response(tokens: &[TokenId]) -> Response {
        let n = tokens.len();
        Response::new(tokens.to_vec(), alloc::vec![-0.5; n], &Vocabulary::arithmetic())
    }

    fn query(answer: u64) -> Query {
        Query {
            id: 0,
            prompt_tokens: alloc::vec![1],
            answer,
            difficulty: DifficultyMeta { steps: 1, max_operand: 9, modulus: 50 },
        }
    }

    #[test]
    fn vocabulary_validation() {
        assert!(Vocabulary::new(3, 1, 2, 2).is_err());
        assert!(Vocabulary::new(16, 15, 15, 10).is_err());
        assert!(Vocabulary::new(16, 16, 14, 10).is_err());
        assert!(Vocabulary::new(16, 5, 14, 10).is_err());
        assert!(Vocabulary::new(4, 3, 2, 2).is_ok());
    }

    #[test]
    fn extraction_cases() {
        let v = Vocabulary::arithmetic();
        assert_eq!(extract_answer(&[3, 4, 15], &v), None);
        assert_eq!(extract_answer(&[7, 14, 4, 2, 15], &v), Some(42));
        assert_eq!(extract_answer(&[14, 15], &v), None);
        assert_eq!(extract_answer(&[14, 4, 2], &v), None);
        assert_eq!(extract_answer(&[14, 4, 10, 15], &v), None);
        // last delimiter wins
        assert_eq!(extract_answer(&[14, 1, 14, 7, 15], &v), Some(7));
    }

    #[test]
    fn verification_cases() {
        assert_eq!(verify(&query(42), &response(&[14, 4, 2, 15])), 1.0);
        assert_eq!(verify(&query(42), &response(&[14, 15])), 0.0);
        assert_eq!(verify(&query(42), &response(&[14, 4, 1, 15])), 0.0);
    }

    #[test]
    fn truncation_flag() {
        assert!(response(&[14, 4, 2]).truncated);
        assert!(!response(&[14, 4, 2, 15]).truncated);
    }

    #[test]
    fn generation_is_deterministic_with_increasing_ids() {
        let spec = GeneratorSpec { count: 2, ..GeneratorSpec::default() };
        assert_eq!(generate_dataset(&spec, 7).unwrap(), generate_dataset(&spec, 7).unwrap());
        let spec = GeneratorSpec { count: 200, ..GeneratorSpec::default() };
        let data = generate_dataset(&spec, 1).unwrap();
        assert_eq!(data.len(), 200);
        assert!(data.windows(2).all(|w| w[0].id < w[1].id));
        let steps: alloc::collections::BTreeSet<u32> = data.iter().map(|q| q.difficulty.steps).collect();
        assert_eq!(steps.into_iter().collect::<Vec<_>>(), alloc::vec![1, 2, 3]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = GeneratorSpec { count: 0, ..GeneratorSpec::default() };
        assert!(matches!(generate_dataset(&bad, 1), Err(crate::Error::Config(_))));
        let bad = GeneratorSpec { min_steps: 3, max_steps: 2, ..GeneratorSpec::default() };
        assert!(generate_dataset(&bad, 1).is_err());
        let small = Vocabulary::new(6, 5, 4, 2).unwrap();
        let bad = GeneratorSpec { vocab: small, ..GeneratorSpec::default() };
        assert!(generate_dataset(&bad, 1).is_err());
    }
}
