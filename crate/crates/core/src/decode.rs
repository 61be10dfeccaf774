//! Autoregressive decoding, Jacobi fixed-point parallel decoding, hybrid
//! block decoding, and trace accounting.
//!
//! A Jacobi sweep evaluates the model once over the whole context and
//! rewrites every response slot with the argmax of its row simultaneously.
//! The greedy rollout is the unique fixed point of that map (ties broken
//! toward the lowest token index), so refinement from any draft terminates
//! on the greedy output; the draft only determines how many sweeps that
//! takes. Hybrid decoding runs the same iteration block by block, left to
//! right, conditioning each block on the finalized ones before it.

use crate::model::{ModelConfig, SequenceModel, EOS, PAD};
use crate::numkit::kernels;
use crate::{Token, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Ar,
    Jacobi,
    Hybrid,
}

/// Per-run record of a Jacobi or hybrid refinement.
///
/// `iterations` holds the working response after every sweep (the initial
/// draft is kept separately in `initial`). `forward_passes` equals the
/// number of sweeps: one full model evaluation each. For pure Jacobi runs,
/// `converged` means the last sweep reproduced its input exactly; for
/// hybrid runs it additionally covers blocks that exhausted their sweep
/// budget, which is the block width and guarantees the block's fixed point
/// by the prefix-stabilization argument.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub mode: DecodeMode,
    pub block_size: usize,
    pub initial: TokenSeq,
    pub iterations: Vec<TokenSeq>,
    pub forward_passes: usize,
    pub converged: bool,
    pub stabilized_prefix_per_iter: Vec<usize>,
}

impl DecodeTrace {
    /// Line-delimited JSON form: one record per run.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&TraceRecord {
            mode: self.mode,
            block_size: self.block_size,
            forward_passes: self.forward_passes,
            converged: self.converged,
            iters: self.iterations.len(),
            prefix_curve: self.stabilized_prefix_per_iter.clone(),
        })
        .expect("trace record serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    mode: DecodeMode,
    block_size: usize,
    forward_passes: usize,
    converged: bool,
    iters: usize,
    prefix_curve: Vec<usize>,
}

/// Total full model evaluations a refinement consumed.
pub fn count_forward_passes(trace: &DecodeTrace) -> usize {
    trace.forward_passes
}

/// Argmax with deterministic tie-breaking: the lowest token index wins.
pub fn greedy_token(row: &[f64]) -> Token {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as Token
}

/// Replaces everything after the first EOS with PAD. Sequences without an
/// EOS are returned unchanged.
pub fn normalize_after_eos(seq: &mut [Token]) {
    if let Some(pos) = seq.iter().position(|&t| t == EOS) {
        for t in seq.iter_mut().skip(pos + 1) {
            *t = PAD;
        }
    }
}

fn assemble_context(prompt: &[Token], response: &[Token], cfg: &ModelConfig) -> TokenSeq {
    debug_assert_eq!(prompt.len(), cfg.prompt_len);
    let mut tokens = Vec::with_capacity(cfg.prompt_len + 2 + response.len());
    tokens.push(crate::model::BOS);
    tokens.extend_from_slice(prompt);
    tokens.push(crate::model::SEP);
    tokens.extend_from_slice(response);
    tokens
}

/// Greedy autoregressive decoding. One forward pass per emitted token over
/// the prefix built so far; stops at the first EOS (inclusive). The result
/// has length at most `N`; callers that need a fixed width pad with PAD.
pub fn ar_greedy<M: SequenceModel>(model: &M, prompt: &[Token], cfg: &ModelConfig) -> TokenSeq {
    let mut out = Vec::with_capacity(cfg.response_len);
    for _ in 0..cfg.response_len {
        let ctx = assemble_context(prompt, &out, cfg);
        let rows = model.logits_rows(&ctx);
        let tok = greedy_token(rows.row(ctx.len() - 1));
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    out
}

/// Temperature sampling with a seeded generator. EOS and length semantics
/// match [`ar_greedy`]; identical seeds give identical outputs.
pub fn ar_sample<M: SequenceModel>(
    model: &M,
    prompt: &[Token],
    cfg: &ModelConfig,
    temperature: f64,
    seed: u64,
) -> Result<TokenSeq, DecodeError> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(DecodeError::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.response_len);
    for _ in 0..cfg.response_len {
        let ctx = assemble_context(prompt, &out, cfg);
        let rows = model.logits_rows(&ctx);
        let mut probs: Vec<f64> = rows.row(ctx.len() - 1).iter().map(|&v| v / temperature).collect();
        kernels::softmax_in_place(&mut probs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut tok = (probs.len() - 1) as Token;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                tok = i as Token;
                break;
            }
        }
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

/// Shared inner loop: Jacobi iteration restricted to response positions
/// `window`, conditioned on the prompt and everything left of the window.
/// Runs until a sweep changes nothing or `sweep_cap` sweeps have run. Each
/// sweep is one forward pass over the prefix ending at the window.
fn refine_window<M: SequenceModel>(
    model: &M,
    prompt: &[Token],
    working: &mut [Token],
    window: std::ops::Range<usize>,
    sweep_cap: usize,
    cfg: &ModelConfig,
    iterations: &mut Vec<TokenSeq>,
) -> (usize, bool) {
    let base = cfg.prompt_len + 2;
    let mut passes = 0;
    let mut converged = false;
    for _ in 0..sweep_cap {
        let ctx = assemble_context(prompt, &working[..window.end], cfg);
        let rows = model.logits_rows(&ctx);
        passes += 1;
        let mut changed = false;
        for i in window.clone() {
            // Row base + i - 1 conditions on everything before slot i.
            let tok = greedy_token(rows.row(base + i - 1));
            if working[i] != tok {
                working[i] = tok;
                changed = true;
            }
        }
        iterations.push(working.to_vec());
        if !changed {
            converged = true;
            break;
        }
    }
    (passes, converged)
}

fn pad_draft(draft: &[Token], n: usize) -> Result<TokenSeq, DecodeError> {
    if draft.len() > n {
        return Err(DecodeError::InvalidArgument(format!(
            "draft length {} exceeds response budget {n}",
            draft.len()
        )));
    }
    let mut out = draft.to_vec();
    out.resize(n, PAD);
    Ok(out)
}

/// Longest common prefix of each snapshot with the final iterate. By the
/// prefix-stabilization property this curve is non-decreasing and reaches
/// at least `k` after sweep `k`.
fn prefix_curve(iterations: &[TokenSeq], final_seq: &[Token]) -> Vec<usize> {
    iterations
        .iter()
        .map(|snap| snap.iter().zip(final_seq).take_while(|(a, b)| a == b).count())
        .collect()
}

/// Jacobi fixed-point refinement of a draft. All `N` positions update
/// simultaneously from the previous iterate, one forward pass per sweep,
/// until two consecutive iterates agree or `max_iters` is reached. EOS/PAD
/// normalization is applied to the converged output only; inside the
/// iteration every position stays live.
pub fn jacobi_refine<M: SequenceModel>(
    model: &M,
    prompt: &[Token],
    draft: &[Token],
    max_iters: usize,
    cfg: &ModelConfig,
) -> Result<(TokenSeq, DecodeTrace), DecodeError> {
    if max_iters == 0 {
        return Err(DecodeError::InvalidArgument("max_iters must be at least 1".into()));
    }
    let n = cfg.response_len;
    let mut working = pad_draft(draft, n)?;
    let initial = working.clone();
    let mut iterations = Vec::new();
    let (passes, converged) =
        refine_window(model, prompt, &mut working, 0..n, max_iters, cfg, &mut iterations);
    let curve = prefix_curve(&iterations, &working);
    let mut output = working.clone();
    normalize_after_eos(&mut output);
    Ok((
        output,
        DecodeTrace {
            mode: DecodeMode::Jacobi,
            block_size: n,
            initial,
            iterations,
            forward_passes: passes,
            converged,
            stabilized_prefix_per_iter: curve,
        },
    ))
}

/// Hybrid block decoding: parallel within blocks, autoregressive between
/// them. Block `b` runs the Jacobi iteration over its `block_size`
/// positions, conditioned on the prompt plus all finalized earlier blocks,
/// initialized from the draft's slice. A block of width `B` reaches its
/// fixed point within `B` sweeps, so that is each block's sweep budget;
/// `block_size == N` reproduces [`jacobi_refine`] exactly and
/// `block_size == 1` degenerates to greedy autoregression with `N` passes.
pub fn hybrid_refine<M: SequenceModel>(
    model: &M,
    prompt: &[Token],
    draft: &[Token],
    block_size: usize,
    cfg: &ModelConfig,
) -> Result<(TokenSeq, DecodeTrace), DecodeError> {
    let n = cfg.response_len;
    if block_size == 0 || block_size > n || n % block_size != 0 {
        return Err(DecodeError::InvalidArgument(format!(
            "block size {block_size} must divide the response budget {n}"
        )));
    }
    let mut working = pad_draft(draft, n)?;
    let initial = working.clone();
    let mut iterations = Vec::new();
    let mut total_passes = 0;
    let mut all_converged = true;
    for b in 0..n / block_size {
        let window = b * block_size..(b + 1) * block_size;
        let (passes, converged) =
            refine_window(model, prompt, &mut working, window, block_size, cfg, &mut iterations);
        total_passes += passes;
        // Hitting the cap without a no-change sweep still means the block is
        // at its fixed point: after B sweeps the whole width is stabilized.
        all_converged &= converged || passes == block_size;
    }
    let curve = prefix_curve(&iterations, &working);
    let mut output = working.clone();
    normalize_after_eos(&mut output);
    Ok((
        output,
        DecodeTrace {
            mode: DecodeMode::Hybrid,
            block_size,
            initial,
            iterations,
            forward_passes: total_passes,
            converged: all_converged,
            stabilized_prefix_per_iter: curve,
        },
    ))
}

/// A response padded to the fixed width `n` with EOS/PAD normalization,
/// the form in which decode outputs are compared and scored.
pub fn standardized(seq: &[Token], n: usize) -> TokenSeq {
    let mut out = seq.to_vec();
    out.truncate(n);
    out.resize(n, PAD);
    normalize_after_eos(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, VocabSpec, BOS, SEP};
    use crate::numkit::DenseArray;
    use rand::Rng;

    /// Fixed-table test model over a 3-token effective alphabet. The next
    /// token distribution depends only on the previous token, via an
    /// explicit logits table.
    struct TableLm {
        vocab: usize,
        /// logits[prev][next]
        table: Vec<Vec<f64>>,
    }

    impl SequenceModel for TableLm {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn logits_rows(&self, tokens: &[Token]) -> DenseArray {
            let mut data = Vec::with_capacity(tokens.len() * self.vocab);
            for &t in tokens {
                data.extend_from_slice(&self.table[t as usize]);
            }
            DenseArray::matrix(tokens.len(), self.vocab, data).unwrap()
        }
    }

    fn tiny_cfg(n: usize) -> ModelConfig {
        let mut cfg = ModelConfig::micro(8, 2, 1, 2, n);
        cfg.vocab = VocabSpec::default();
        cfg
    }

    fn eos_lover(vocab: usize) -> TableLm {
        let mut table = vec![vec![0.0; vocab]; vocab];
        for row in &mut table {
            row[EOS as usize] = 5.0;
        }
        TableLm { vocab, table }
    }

    #[test]
    fn greedy_stops_at_immediate_eos() {
        let cfg = tiny_cfg(4);
        let model = eos_lover(8);
        let out = ar_greedy(&model, &[4, 5], &cfg);
        assert_eq!(out, vec![EOS]);
    }

    #[test]
    fn greedy_is_deterministic() {
        let cfg = tiny_cfg(6);
        let params = init_params(&ModelConfig::micro(8, 2, 1, 2, 6), 3).unwrap();
        let a = ar_greedy(&params, &[10, 11], &cfg);
        let b = ar_greedy(&params, &[10, 11], &cfg);
        assert_eq!(a, b);
    }

    /// Chain model: 4 -> 5 -> 6 -> EOS, anything else restarts at 4. The
    /// greedy trace from an empty response is worked out by hand below.
    fn chain_model(vocab: usize) -> TableLm {
        let mut table = vec![vec![0.0; vocab]; vocab];
        for (prev, row) in table.iter_mut().enumerate() {
            let next = match prev {
                4 => 5,
                5 => 6,
                6 => EOS as usize,
                _ => 4,
            };
            row[next] = 3.0;
        }
        TableLm { vocab, table }
    }

    #[test]
    fn greedy_matches_hand_trace_on_chain_model() {
        let cfg = tiny_cfg(6);
        let model = chain_model(8);
        // Last context token starts as SEP (3) -> 4, then 5, 6, EOS.
        assert_eq!(ar_greedy(&model, &[4, 4], &cfg), vec![4, 5, 6, EOS]);
    }

    #[test]
    fn sampling_at_tiny_temperature_matches_greedy() {
        let params = init_params(&ModelConfig::micro(8, 2, 1, 2, 6), 9).unwrap();
        let cfg = tiny_cfg(6);
        let greedy = ar_greedy(&params, &[20, 21], &cfg);
        let sampled = ar_sample(&params, &[20, 21], &cfg, 1e-6, 17).unwrap();
        assert_eq!(greedy, sampled);
    }

    #[test]
    fn sampling_is_seed_deterministic_and_rejects_bad_temperature() {
        let params = init_params(&ModelConfig::micro(8, 2, 1, 2, 6), 9).unwrap();
        let cfg = tiny_cfg(6);
        let a = ar_sample(&params, &[20, 21], &cfg, 0.7, 123).unwrap();
        let b = ar_sample(&params, &[20, 21], &cfg, 0.7, 123).unwrap();
        assert_eq!(a, b);
        assert!(ar_sample(&params, &[20, 21], &cfg, 0.0, 1).is_err());
        assert!(ar_sample(&params, &[20, 21], &cfg, -1.0, 1).is_err());
    }

    #[test]
    fn first_token_frequencies_match_softmax() {
        // 10k draws from a fixed-table model; empirical first-token
        // frequencies within 3 sigma of the multinomial expectation.
        let vocab = 8;
        let mut table = vec![vec![0.0; vocab]; vocab];
        table[SEP as usize] = vec![0.0, 0.0, 0.5, 0.0, 1.0, 1.5, -0.5, 0.25];
        let model = TableLm { vocab, table };
        let cfg = tiny_cfg(4);
        let temperature = 0.9;
        let logits: Vec<f64> =
            model.table[SEP as usize].iter().map(|&v| v / temperature).collect();
        let probs = crate::numkit::softmax_row(&logits).unwrap();
        let draws = 10_000;
        let mut counts = vec![0usize; vocab];
        for s in 0..draws {
            let out = ar_sample(&model, &[4, 5], &cfg, temperature, s as u64).unwrap();
            counts[out[0] as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let mean = probs[i] * draws as f64;
            let sigma = (draws as f64 * probs[i] * (1.0 - probs[i])).sqrt();
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma + 1e-9,
                "token {i}: {c} vs mean {mean:.1} sigma {sigma:.1}"
            );
        }
    }

    #[test]
    fn jacobi_from_greedy_output_converges_in_one_sweep() {
        let params = init_params(&ModelConfig::micro(8, 2, 1, 2, 6), 21).unwrap();
        let cfg = tiny_cfg(6);
        let greedy = standardized(&ar_greedy(&params, &[30, 31], &cfg), 6);
        // Feed the raw fixed point: greedy continuation instead of PAD tail.
        let fixed = raw_fixed_point(&params, &[30, 31], &cfg);
        let (out, trace) = jacobi_refine(&params, &[30, 31], &fixed, 6, &cfg).unwrap();
        assert_eq!(trace.forward_passes, 1);
        assert!(trace.converged);
        assert_eq!(out, greedy);
    }

    /// The greedy rollout continued past EOS to the full budget: the raw
    /// fixed point of the sweep map.
    fn raw_fixed_point<M: SequenceModel>(model: &M, prompt: &[Token], cfg: &ModelConfig) -> TokenSeq {
        let mut out = Vec::new();
        for _ in 0..cfg.response_len {
            let ctx = assemble_context(prompt, &out, cfg);
            let rows = model.logits_rows(&ctx);
            out.push(greedy_token(rows.row(ctx.len() - 1)));
        }
        out
    }

    #[test]
    fn jacobi_from_all_pad_matches_greedy_on_many_random_prompts() {
        let params = init_params(&ModelConfig::micro(16, 4, 1, 2, 8), 33).unwrap();
        let mut cfg = tiny_cfg(8);
        cfg.prompt_len = 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let prompt: Vec<Token> = (0..2).map(|_| rng.gen_range(4..44)).collect();
            let greedy = standardized(&ar_greedy(&params, &prompt, &cfg), 8);
            let (out, trace) = jacobi_refine(&params, &prompt, &[], 8, &cfg).unwrap();
            assert_eq!(out, greedy);
            assert!(trace.forward_passes <= 8);
        }
    }

    #[test]
    fn jacobi_sweeps_match_hand_executed_iteration_table() {
        // Chain model, N = 3, adversarial draft [6, 4, 5].
        // Contexts index by previous token; sweep map per position:
        //   slot 0 sees SEP(3) -> 4; slot 1 sees draft[0]; slot 2 sees draft[1].
        // Hand table, next[prev]: 3->4, 4->5, 5->6, 6->2, else 4.
        //   y0 = [6, 4, 5]
        //   y1 = [f(3), f(6), f(4)] = [4, 2, 5]
        //   y2 = [4, f(4), f(2)] = [4, 5, 4]
        //   y3 = [4, 5, f(5)] = [4, 5, 6]
        //   y4 = [4, 5, 6] -> converged, 4 passes.
        let model = chain_model(8);
        let cfg = tiny_cfg(3);
        let (out, trace) = jacobi_refine(&model, &[4, 4], &[6, 4, 5], 3 + 1, &cfg).unwrap();
        assert_eq!(
            trace.iterations,
            vec![vec![4, 2, 5], vec![4, 5, 4], vec![4, 5, 6], vec![4, 5, 6]]
        );
        assert_eq!(trace.forward_passes, 4);
        assert!(trace.converged);
        // Prefix after sweep k covers at least k positions.
        for (k, &p) in trace.stabilized_prefix_per_iter.iter().enumerate() {
            assert!(p >= (k + 1).min(3), "sweep {} prefix {}", k + 1, p);
        }
        assert_eq!(out, vec![4, 5, 6]);
    }

    #[test]
    fn prefix_curve_is_monotone() {
        let params = init_params(&ModelConfig::micro(16, 4, 2, 2, 8), 55).unwrap();
        let mut cfg = tiny_cfg(8);
        cfg.prompt_len = 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let prompt: Vec<Token> = (0..2).map(|_| rng.gen_range(4..44)).collect();
            let draft: Vec<Token> = (0..8).map(|_| rng.gen_range(4..64)).collect();
            let (_, trace) = jacobi_refine(&params, &prompt, &draft, 8, &cfg).unwrap();
            for w in trace.stabilized_prefix_per_iter.windows(2) {
                assert!(w[1] >= w[0], "curve decreased: {:?}", trace.stabilized_prefix_per_iter);
            }
        }
    }

    #[test]
    fn hybrid_block_n_reproduces_jacobi_exactly() {
        let params = init_params(&ModelConfig::micro(16, 4, 1, 2, 8), 77).unwrap();
        let mut cfg = tiny_cfg(8);
        cfg.prompt_len = 2;
        let prompt = [12, 13];
        let draft: Vec<Token> = vec![50, 51, 52, 53, 54, 55, 56, 57];
        let (jout, jtrace) = jacobi_refine(&params, &prompt, &draft, 8, &cfg).unwrap();
        let (hout, htrace) = hybrid_refine(&params, &prompt, &draft, 8, &cfg).unwrap();
        assert_eq!(jout, hout);
        assert_eq!(jtrace.forward_passes, htrace.forward_passes);
        assert_eq!(jtrace.iterations, htrace.iterations);
    }

    #[test]
    fn hybrid_block_one_is_greedy_with_n_passes() {
        let params = init_params(&ModelConfig::micro(16, 4, 1, 2, 8), 78).unwrap();
        let mut cfg = tiny_cfg(8);
        cfg.prompt_len = 2;
        let prompt = [22, 23];
        let draft: Vec<Token> = vec![60; 8];
        let greedy = standardized(&ar_greedy(&params, &prompt, &cfg), 8);
        let (out, trace) = hybrid_refine(&params, &prompt, &draft, 1, &cfg).unwrap();
        assert_eq!(out, greedy);
        assert_eq!(trace.forward_passes, 8);
        assert!(trace.converged);
    }

    #[test]
    fn hybrid_half_blocks_match_hand_trace() {
        // Chain model again, N = 4, B = 2, draft [6, 6, 6, 6].
        // Block 0 (slots 0..2): y = [6,6]
        //   sweep 1: [f(3), f(6)] = [4, 2]; sweep 2: [4, f(4)] = [4, 5];
        //   sweep cap B = 2 reached, block fixed by stabilization.
        // Block 1 (slots 2..4), conditioned on [4, 5]: start [6, 6]
        //   sweep 1: [f(5), f(6)] = [6, 2]; sweep 2: [6, f(6)] = [6, 2] -> no
        //   change, converged in 2 sweeps.
        // Total passes 4, final [4, 5, 6, 2] -> normalized [4, 5, 6, 2].
        let model = chain_model(8);
        let cfg = tiny_cfg(4);
        let greedy = standardized(&ar_greedy(&model, &[4, 4], &cfg), 4);
        let (out, trace) = hybrid_refine(&model, &[4, 4], &[6, 6, 6, 6], 2, &cfg).unwrap();
        assert_eq!(trace.forward_passes, 4);
        assert_eq!(out, vec![4, 5, 6, EOS]);
        assert_eq!(out, greedy);
        assert_eq!(
            trace.iterations,
            vec![
                vec![4, 2, 6, 6],
                vec![4, 5, 6, 6],
                vec![4, 5, 6, 2],
                vec![4, 5, 6, 2],
            ]
        );
    }

    #[test]
    fn hybrid_output_is_independent_of_block_size() {
        let params = init_params(&ModelConfig::micro(16, 4, 2, 2, 8), 79).unwrap();
        let mut cfg = tiny_cfg(8);
        cfg.prompt_len = 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let prompt: Vec<Token> = (0..2).map(|_| rng.gen_range(4..44)).collect();
            let draft: Vec<Token> = (0..8).map(|_| rng.gen_range(4..64)).collect();
            let reference = standardized(&ar_greedy(&params, &prompt, &cfg), 8);
            for block in [1, 2, 4, 8] {
                let (out, trace) = hybrid_refine(&params, &prompt, &draft, block, &cfg).unwrap();
                assert_eq!(out, reference, "block {block}");
                assert!(trace.forward_passes <= 8, "block {block}");
                assert!(trace.converged);
            }
        }
    }

    #[test]
    fn hybrid_rejects_non_dividing_block() {
        let params = init_params(&ModelConfig::micro(8, 2, 1, 2, 6), 80).unwrap();
        let cfg = tiny_cfg(6);
        assert!(hybrid_refine(&params, &[4, 5], &[], 4, &cfg).is_err());
        assert!(hybrid_refine(&params, &[4, 5], &[], 0, &cfg).is_err());
        assert!(hybrid_refine(&params, &[4, 5], &[], 7, &cfg).is_err());
    }

    #[test]
    fn pass_counting_and_trace_serialization() {
        let model = eos_lover(8);
        let cfg = tiny_cfg(4);
        let fixed = raw_fixed_point(&model, &[4, 5], &cfg);
        let (_, trace) = jacobi_refine(&model, &[4, 5], &fixed, 4, &cfg).unwrap();
        assert_eq!(count_forward_passes(&trace), 1);
        assert_eq!(trace.iterations.len(), trace.forward_passes);
        let line = trace.to_json_line();
        assert!(line.contains("\"mode\":\"jacobi\""));
        assert!(line.contains("\"forward_passes\":1"));
        assert!(!line.contains('\n'));
    }

    #[test]
    fn context_row_indexing_is_consistent_with_build_context() {
        // The row consulted for slot i must condition on exactly the tokens
        // before that slot.
        let cfg = tiny_cfg(4);
        let ctx = assemble_context(&[7, 8], &[44, 45], &cfg);
        assert_eq!(ctx, vec![BOS, 7, 8, SEP, 44, 45]);
        // Slot 0 lives at index 4, its conditioning row is index 3 (SEP).
        assert_eq!(cfg.prompt_len + 2 - 1, 3);
    }
}
