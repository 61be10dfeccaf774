//! Programmable synthetic reward and procedural corpus generators.
//!
//! The reward is an exactly computable rule over prompt/response pairs:
//! a weighted blend of preferred-style fraction, distinct prompt-content
//! coverage, and EOS termination, minus a penalty for disfavored-style
//! tokens, clamped to [0, 1]. Corpus generators produce base-model training
//! pairs whose style statistics are set per generator, which is how base
//! models of differing alignment levels come to exist.

use crate::model::{ModelConfig, VocabSpec, EOS, PAD};
use crate::util::derive_seed;
use crate::{Token, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Scoring rule weights. The three positive weights sum to one; the
/// disfavored penalty is applied before clamping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub w_style: f64,
    pub w_content: f64,
    pub w_eos: f64,
    pub w_neg: f64,
    pub vocab: VocabSpec,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { w_style: 0.5, w_content: 0.3, w_eos: 0.2, w_neg: 0.5, vocab: VocabSpec::default() }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<(), RewardError> {
        let sum = self.w_style + self.w_content + self.w_eos;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RewardError::InvalidArgument(format!(
                "style + content + eos weights sum to {sum}, expected 1"
            )));
        }
        if self.w_style < 0.0 || self.w_content < 0.0 || self.w_eos < 0.0 || self.w_neg < 0.0 {
            return Err(RewardError::InvalidArgument("negative weight".into()));
        }
        Ok(())
    }
}

/// Reward components before weighting, exposed for the monotonicity checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParts {
    pub f_style: f64,
    pub f_content: f64,
    pub f_eos: f64,
    pub f_neg: f64,
}

pub fn reward_parts(spec: &RewardSpec, prompt: &[Token], response: &[Token]) -> RewardParts {
    let body: Vec<Token> = response
        .iter()
        .take_while(|&&t| t != EOS)
        .copied()
        .filter(|&t| t != PAD)
        .collect();
    let has_eos = response.contains(&EOS);
    let (f_style, f_neg) = if body.is_empty() {
        (0.0, 0.0)
    } else {
        let plus = body.iter().filter(|&&t| spec.vocab.is_style_plus(t)).count();
        let minus = body.iter().filter(|&&t| spec.vocab.is_style_minus(t)).count();
        (plus as f64 / body.len() as f64, minus as f64 / body.len() as f64)
    };
    let prompt_content: BTreeSet<Token> =
        prompt.iter().copied().filter(|&t| spec.vocab.is_content(t)).collect();
    let f_content = if prompt_content.is_empty() {
        1.0
    } else {
        let echoed = prompt_content.iter().filter(|t| body.contains(t)).count();
        echoed as f64 / prompt_content.len() as f64
    };
    RewardParts { f_style, f_content, f_eos: if has_eos { 1.0 } else { 0.0 }, f_neg }
}

/// The unclamped score. Linear in the bag-of-token statistics, so style
/// monotonicity can be asserted even where the public value saturates.
pub fn reward_pre_clamp(spec: &RewardSpec, prompt: &[Token], response: &[Token]) -> f64 {
    let p = reward_parts(spec, prompt, response);
    spec.w_style * p.f_style + spec.w_content * p.f_content + spec.w_eos * p.f_eos
        - spec.w_neg * p.f_neg
}

/// r(x, y) in [0, 1].
pub fn reward(spec: &RewardSpec, prompt: &[Token], response: &[Token]) -> f64 {
    reward_pre_clamp(spec, prompt, response).clamp(0.0, 1.0)
}

/// Per-generator emission mix: at every response position one of a
/// preferred-style token, a disfavored-style token, or an echo of a prompt
/// content token is drawn. The three probabilities sum to one. Response
/// body lengths are uniform on `len_range` and every response terminates
/// with EOS inside the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleMix {
    pub p_plus: f64,
    pub p_minus: f64,
    pub p_content: f64,
    pub len_range: (usize, usize),
}

impl StyleMix {
    /// Mix with the given conditional probability of choosing the preferred
    /// style over the disfavored one, at the default content-echo rate.
    pub fn with_plus_probability(plus: f64) -> Self {
        Self::with_rates(plus, 0.25)
    }

    pub fn with_rates(plus: f64, content_rate: f64) -> Self {
        let style = 1.0 - content_rate;
        Self {
            p_plus: style * plus,
            p_minus: style * (1.0 - plus),
            p_content: content_rate,
            len_range: (8, 24),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let sum = self.p_plus + self.p_minus + self.p_content;
        if (sum - 1.0).abs() > 1e-9 || self.p_plus < 0.0 || self.p_minus < 0.0 || self.p_content < 0.0
        {
            return Err(RewardError::InvalidArgument(format!("mix probabilities sum to {sum}")));
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return Err(RewardError::InvalidArgument(format!(
                "bad length range {:?}",
                self.len_range
            )));
        }
        Ok(())
    }
}

/// A prompt of `m` tokens drawn uniformly from the content range.
pub fn gen_prompt(vocab: &VocabSpec, seed: u64, m: usize) -> TokenSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| rng.gen_range(vocab.content.0..=vocab.content.1)).collect()
}

/// Procedural pretraining pairs for one base generator. Responses echo a
/// random subset of prompt content tokens interleaved with style tokens per
/// the mix, and always end with EOS within the response budget.
pub fn gen_corpus(
    mix: &StyleMix,
    cfg: &ModelConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<(TokenSeq, TokenSeq)>, RewardError> {
    mix.validate()?;
    if count == 0 {
        return Err(RewardError::InvalidArgument("count must be at least 1".into()));
    }
    let vocab = &cfg.vocab;
    let max_body = mix.len_range.1.min(cfg.response_len - 1);
    let min_body = mix.len_range.0.min(max_body);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let prompt = gen_prompt(vocab, derive_seed(seed, "corpus-prompt", i as u64), cfg.prompt_len);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpus-response", i as u64));
        let len = rng.gen_range(min_body..=max_body);
        let mut response = Vec::with_capacity(len + 1);
        for _ in 0..len {
            let u: f64 = rng.gen();
            let tok = if u < mix.p_content {
                prompt[rng.gen_range(0..prompt.len())]
            } else if u < mix.p_content + mix.p_plus {
                rng.gen_range(vocab.style_plus.0..=vocab.style_plus.1)
            } else {
                rng.gen_range(vocab.style_minus.0..=vocab.style_minus.1)
            };
            response.push(tok);
        }
        response.push(EOS);
        pairs.push((prompt, response));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> RewardSpec {
        let s = RewardSpec::default();
        s.validate().unwrap();
        s
    }

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn eos_only_response_scores_exactly_the_eos_weight() {
        let s = spec();
        let prompt = vec![10, 11, 12];
        assert_eq!(reward(&s, &prompt, &[EOS]), 0.2);
    }

    #[test]
    fn pure_preferred_style_response_scores_style_plus_eos() {
        let s = spec();
        let prompt = vec![10, 11, 12];
        // All style tokens, no content echo possible: 0.5 + 0 + 0.2.
        let response = vec![44, 45, 46, 47, EOS];
        assert!((reward(&s, &prompt, &response) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn pure_disfavored_without_eos_clamps_to_zero() {
        let s = spec();
        let response = vec![54, 55, 56, 57];
        assert_eq!(reward(&s, &[10, 11], &response), 0.0);
        assert!(reward_pre_clamp(&s, &[10, 11], &response) < 0.0);
    }

    #[test]
    fn content_coverage_counts_distinct_prompt_tokens() {
        let s = spec();
        let prompt = vec![10, 11, 10, 12]; // three distinct content tokens
        let response = vec![10, 12, 44, EOS];
        let parts = reward_parts(&s, &prompt, &response);
        assert!((parts.f_content - 2.0 / 3.0).abs() < 1e-12);
        // A prompt without content tokens yields full coverage by definition.
        let no_content = vec![44, 45];
        assert_eq!(reward_parts(&s, &no_content, &response).f_content, 1.0);
    }

    #[test]
    fn tokens_after_eos_do_not_count() {
        let s = spec();
        let prompt = vec![10, 11];
        let clean = vec![44, EOS, PAD, PAD];
        let noisy = vec![44, EOS, 54, 10];
        assert_eq!(reward(&s, &prompt, &clean), reward(&s, &prompt, &noisy));
    }

    #[test]
    fn reward_is_bounded_and_style_monotone() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let prompt = gen_prompt(&s.vocab, rng.gen(), 8);
            let len = rng.gen_range(1..20);
            let mut response: TokenSeq = (0..len).map(|_| rng.gen_range(4..64) as Token).collect();
            if rng.gen_bool(0.7) {
                response.push(EOS);
            }
            let r = reward(&s, &prompt, &response);
            assert!((0.0..=1.0).contains(&r));
            // Swap one disfavored token for a preferred one; the pre-clamp
            // value must strictly increase and the public value never drop.
            if let Some(idx) = response.iter().position(|&t| s.vocab.is_style_minus(t)) {
                let before_pre = reward_pre_clamp(&s, &prompt, &response);
                let before = reward(&s, &prompt, &response);
                let mut swapped = response.clone();
                swapped[idx] = 44;
                let after_pre = reward_pre_clamp(&s, &prompt, &swapped);
                let after = reward(&s, &prompt, &swapped);
                assert!(after_pre > before_pre);
                assert!(after >= before);
            }
        }
    }

    #[test]
    fn reward_ignores_body_permutation() {
        let s = spec();
        let prompt = vec![10, 11, 12, 13];
        let response = vec![44, 10, 54, 11, 45, EOS];
        let permuted = vec![45, 11, 44, 10, 54, EOS];
        assert_eq!(reward(&s, &prompt, &response), reward(&s, &prompt, &permuted));
    }

    #[test]
    fn prompts_are_deterministic_and_in_content_range() {
        let v = VocabSpec::default();
        let a = gen_prompt(&v, 5, 16);
        let b = gen_prompt(&v, 5, 16);
        assert_eq!(a, b);
        assert_ne!(a, gen_prompt(&v, 6, 16));
        assert!(a.iter().all(|&t| (4..=43).contains(&t)));
    }

    #[test]
    fn prompt_token_frequencies_are_uniform() {
        let v = VocabSpec::default();
        let m = 16;
        let draws: u64 = 10_000;
        let mut counts = vec![0usize; 64];
        for s in 0..draws {
            for &t in &gen_prompt(&v, s, m) {
                counts[t as usize] += 1;
            }
        }
        let total = (draws * m as u64) as f64;
        let p = 1.0 / 40.0;
        for t in 4..44 {
            let mean = total * p;
            let sigma = (total * p * (1.0 - p)).sqrt();
            assert!(
                (counts[t] as f64 - mean).abs() <= 3.0 * sigma,
                "token {t}: {} vs mean {mean:.0}",
                counts[t]
            );
        }
    }

    #[test]
    fn degenerate_mix_emits_no_disfavored_tokens() {
        let mix = StyleMix::with_plus_probability(1.0);
        let pairs = gen_corpus(&mix, &cfg(), 200, 3).unwrap();
        let v = VocabSpec::default();
        for (_, response) in &pairs {
            assert!(!response.iter().any(|&t| v.is_style_minus(t)));
            assert_eq!(*response.last().unwrap(), EOS);
            assert!(response.len() <= cfg().response_len);
        }
    }

    #[test]
    fn balanced_mix_style_fraction_is_centered() {
        let mix = StyleMix::with_rates(0.5, 0.0);
        let pairs = gen_corpus(&mix, &cfg(), 500, 4).unwrap();
        let v = VocabSpec::default();
        let mut plus = 0usize;
        let mut style = 0usize;
        for (_, response) in &pairs {
            for &t in response {
                if v.is_style_plus(t) {
                    plus += 1;
                    style += 1;
                } else if v.is_style_minus(t) {
                    style += 1;
                }
            }
        }
        let sigma = (style as f64 * 0.25).sqrt();
        assert!(
            (plus as f64 - style as f64 * 0.5).abs() <= 3.0 * sigma,
            "plus {plus} of {style}"
        );
    }

    #[test]
    fn corpus_is_deterministic_per_seed() {
        let mix = StyleMix::with_plus_probability(0.7);
        let a = gen_corpus(&mix, &cfg(), 50, 11).unwrap();
        let b = gen_corpus(&mix, &cfg(), 50, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_corpus(&mix, &cfg(), 50, 12).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = RewardSpec::default();
        s.w_style = 0.9;
        assert!(s.validate().is_err());
        let mut mix = StyleMix::with_plus_probability(0.5);
        mix.p_plus += 0.2;
        assert!(mix.validate().is_err());
        assert!(gen_corpus(&StyleMix::with_plus_probability(0.5), &cfg(), 0, 1).is_err());
    }
}
