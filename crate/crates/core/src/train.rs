//! The refinement losses and both training loops.
//!
//! Two objectives are combined per step. The autoregressive loss is the
//! mean next-token negative log-likelihood of the aligned response. The
//! consistency loss runs the same parameters twice over the same positions:
//! once conditioned on the aligned response with gradients blocked (the
//! teacher side), once conditioned on an intermediate draft with gradients
//! flowing (the student side), and penalizes the mean forward KL from
//! teacher to student rows. The total is `l_ar + consistency_weight *
//! l_con`.
//!
//! Positions after the aligned response's first EOS are masked out of both
//! losses; the EOS itself is included. Losses are means over unmasked
//! positions, which keeps the weight's scale independent of sequence
//! length.

use crate::model::{
    forward_prefix, init_params, ModelConfig, ModelParams, SequenceModel, BOS, EOS, SEP,
};
use crate::numkit::{adam_step, kernels, AdamHyper, AdamState, DenseArray, NodeId, Tape};
use crate::trajectory::TrajectoryRecord;
use crate::util::derive_seed;
use crate::{Token, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Num(#[from] crate::numkit::NumError),
}

/// Optimization settings shared by base pretraining and refiner training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight on the consistency term of the total loss.
    pub consistency_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    /// Fraction of total steps spent in linear warmup before the cosine
    /// decay.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Steps between metrics lines.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            consistency_weight: 1.0,
            learning_rate: 3e-4,
            batch_size: 32,
            grad_accum_steps: 1,
            epochs: 1,
            warmup_fraction: 0.03,
            seed: 0,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.consistency_weight < 0.0 {
            return Err(TrainError::InvalidArgument("negative consistency weight".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidArgument("bad learning rate".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::InvalidArgument("warmup fraction outside [0, 1)".into()));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidArgument("zero batch, accumulation, or epochs".into()));
        }
        Ok(())
    }
}

/// Loss components for one (record, intermediate) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ar: f64,
    pub l_con: f64,
    pub l_total: f64,
    /// Positions excluded by the EOS mask (out of the response budget).
    pub masked_positions: usize,
}

/// One metrics line per logging interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub lr: f64,
    pub l_ar: f64,
    pub l_con: f64,
    pub l_total: f64,
    pub heldout_l_con: Option<f64>,
}

/// Cosine schedule with linear warmup. `step` counts from zero.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    let total = total_steps.max(1);
    let warmup = ((total as f64) * warmup_fraction).ceil() as usize;
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos())
}

// ---------------------------------------------------------------------------
// Masks, contexts, and the shared row math
// ---------------------------------------------------------------------------

/// Index of the last unmasked response slot for an aligned response:
/// its first EOS, or the final slot when no EOS survives.
fn last_scored_slot(aligned: &[Token]) -> usize {
    aligned.iter().position(|&t| t == EOS).unwrap_or(aligned.len() - 1)
}

fn context_prefix(prompt: &[Token], response: &[Token], upto_slot: usize) -> TokenSeq {
    let mut tokens = Vec::with_capacity(prompt.len() + 2 + upto_slot);
    tokens.push(BOS);
    tokens.extend_from_slice(prompt);
    tokens.push(SEP);
    tokens.extend_from_slice(&response[..upto_slot]);
    tokens
}

/// Rows of `logits` scoring response slots `0..=last`: row `base + i`
/// conditions on everything before slot `i`.
fn mean_masked_ce(logits: &DenseArray, base: usize, targets: &[Token], last: usize) -> f64 {
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate().take(last + 1) {
        let row = logits.row(base + i);
        total += kernels::logsumexp(row) - row[target as usize];
    }
    total / (last + 1) as f64
}

fn mean_masked_kl(teacher_logits: &DenseArray, student_logits: &DenseArray, base: usize, last: usize) -> f64 {
    let cols = teacher_logits.cols();
    let mut total = 0.0;
    for i in 0..=last {
        let t_row = teacher_logits.row(base + i);
        let s_row = student_logits.row(base + i);
        let t_lse = kernels::logsumexp(t_row);
        let s_lse = kernels::logsumexp(s_row);
        for j in 0..cols {
            let p = (t_row[j] - t_lse).exp();
            if p > 0.0 {
                total += p * ((t_row[j] - t_lse) - (s_row[j] - s_lse));
            }
        }
    }
    total / (last + 1) as f64
}

fn check_lengths(cfg: &ModelConfig, prompt: &[Token], seqs: &[&[Token]]) -> Result<(), TrainError> {
    if prompt.len() != cfg.prompt_len {
        return Err(TrainError::InvalidArgument(format!(
            "prompt length {} does not match configured {}",
            prompt.len(),
            cfg.prompt_len
        )));
    }
    for s in seqs {
        if s.len() != cfg.response_len {
            return Err(TrainError::InvalidArgument(format!(
                "response length {} not standardized to {}",
                s.len(),
                cfg.response_len
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Value paths (any SequenceModel)
// ---------------------------------------------------------------------------

/// Mean next-token negative log-likelihood of the aligned response under
/// any sequence model. EOS included, PAD region masked.
pub fn loss_ar_value<M: SequenceModel>(
    model: &M,
    cfg: &ModelConfig,
    prompt: &[Token],
    aligned: &[Token],
) -> Result<f64, TrainError> {
    check_lengths(cfg, prompt, &[aligned])?;
    let last = last_scored_slot(aligned);
    let ctx = context_prefix(prompt, aligned, last);
    let rows = model.logits_rows(&ctx);
    Ok(mean_masked_ce(&rows, prompt.len() + 1, aligned, last))
}

/// Mean forward KL from the model's rows under the aligned context to its
/// rows under the intermediate context, masked by the aligned response.
/// Both passes use the same model; the teacher side carries no gradients by
/// construction here (this is the plain value path).
pub fn loss_consistency_value<M: SequenceModel>(
    model: &M,
    cfg: &ModelConfig,
    prompt: &[Token],
    intermediate: &[Token],
    aligned: &[Token],
) -> Result<f64, TrainError> {
    check_lengths(cfg, prompt, &[intermediate, aligned])?;
    let last = last_scored_slot(aligned);
    let teacher = model.logits_rows(&context_prefix(prompt, aligned, last));
    let student = model.logits_rows(&context_prefix(prompt, intermediate, last));
    Ok(mean_masked_kl(&teacher, &student, prompt.len() + 1, last))
}

/// AR loss for the micro transformer.
pub fn loss_ar(params: &ModelParams, prompt: &[Token], aligned: &[Token]) -> Result<f64, TrainError> {
    loss_ar_value(params, &params.config, prompt, aligned)
}

/// Consistency loss for the micro transformer.
pub fn loss_consistency(
    params: &ModelParams,
    prompt: &[Token],
    intermediate: &[Token],
    aligned: &[Token],
) -> Result<f64, TrainError> {
    loss_consistency_value(params, &params.config, prompt, intermediate, aligned)
}

/// Total loss breakdown for one record and one intermediate index.
pub fn loss_total(
    params: &ModelParams,
    record: &TrajectoryRecord,
    intermediate_index: usize,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    cfg.validate()?;
    let t = record.t();
    if intermediate_index + 1 >= t {
        return Err(TrainError::InvalidArgument(format!(
            "intermediate index {intermediate_index} must name an intermediate (T = {t}); \
             the aligned response is not a valid draft"
        )));
    }
    let aligned = record.aligned().clone();
    let intermediate = &record.responses[intermediate_index];
    let l_ar = loss_ar(params, &record.prompt, &aligned)?;
    let l_con = loss_consistency(params, &record.prompt, intermediate, &aligned)?;
    Ok(LossBreakdown {
        l_ar,
        l_con,
        l_total: l_ar + cfg.consistency_weight * l_con,
        masked_positions: params.config.response_len - (last_scored_slot(&aligned) + 1),
    })
}

// ---------------------------------------------------------------------------
// Gradient path (tape)
// ---------------------------------------------------------------------------

/// Parameter arrays bound onto a tape, in canonical order.
struct BoundParams {
    nodes: Vec<NodeId>,
}

fn bind_params(tape: &mut Tape, params: &ModelParams) -> BoundParams {
    let nodes = params.arrays().into_iter().map(|a| tape.param(a)).collect();
    BoundParams { nodes }
}

/// Node indices into the canonical order.
struct Slots {
    token_embedding: usize,
    positional: usize,
    per_layer: usize,
    layer0: usize,
    final_gain: usize,
    final_bias: usize,
    output: usize,
}

fn slots(cfg: &ModelConfig) -> Slots {
    let per_layer = 12;
    Slots {
        token_embedding: 0,
        positional: 1,
        per_layer,
        layer0: 2,
        final_gain: 2 + cfg.layers * per_layer,
        final_bias: 2 + cfg.layers * per_layer + 1,
        output: 2 + cfg.layers * per_layer + 2,
    }
}

/// Traced forward pass. Mirrors `model::forward_prefix` kernel for kernel,
/// so traced and untraced logits agree bitwise.
fn forward_graph(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, tokens: &[Token]) -> NodeId {
    let s = slots(cfg);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.gather(bound.nodes[s.token_embedding], &ids);
    let pos = tape.gather(bound.nodes[s.positional], &positions);
    let mut x = tape.add(tok, pos);
    for layer in 0..cfg.layers {
        let at = |offset: usize| bound.nodes[s.layer0 + layer * s.per_layer + offset];
        let normed = tape.layer_norm(x, at(0), at(1));
        let q = tape.matmul(normed, at(2));
        let k = tape.matmul(normed, at(3));
        let v = tape.matmul(normed, at(4));
        let attn = tape.causal_attention(q, k, v, cfg.heads);
        let proj = tape.matmul(attn, at(5));
        x = tape.add(x, proj);
        let normed = tape.layer_norm(x, at(6), at(7));
        let up = tape.matmul(normed, at(8));
        let up = tape.bias_add(up, at(9));
        let act = tape.gelu(up);
        let down = tape.matmul(act, at(10));
        let down = tape.bias_add(down, at(11));
        x = tape.add(x, down);
    }
    let normed = tape.layer_norm(x, bound.nodes[s.final_gain], bound.nodes[s.final_bias]);
    tape.matmul(normed, bound.nodes[s.output])
}

fn row_mask(rows: usize, base: usize, last: usize) -> Vec<bool> {
    let mut mask = vec![false; rows];
    for i in 0..=last {
        mask[base + i] = true;
    }
    mask
}

/// Teacher probability rows under the aligned context, with gradients
/// blocked by construction: computed outside any tape.
fn teacher_rows(
    params: &ModelParams,
    prompt: &[Token],
    aligned: &[Token],
    last: usize,
) -> Result<DenseArray, TrainError> {
    let ctx = context_prefix(prompt, aligned, last);
    let logits = forward_prefix(params, &ctx)?;
    let mut probs = logits.clone();
    let cols = probs.cols();
    for i in 0..probs.rows() {
        kernels::softmax_in_place(&mut probs.data_mut()[i * cols..(i + 1) * cols]);
    }
    Ok(probs)
}

/// Loss breakdown plus gradients in canonical parameter order. This is the
/// training-step workhorse and the subject of the gradient checks.
pub fn loss_total_with_grads(
    params: &ModelParams,
    record: &TrajectoryRecord,
    intermediate_index: usize,
    consistency_weight: f64,
) -> Result<(LossBreakdown, Vec<DenseArray>), TrainError> {
    let t = record.t();
    if intermediate_index + 1 >= t {
        return Err(TrainError::InvalidArgument(format!(
            "intermediate index {intermediate_index} out of range for T = {t}"
        )));
    }
    let aligned = record.aligned();
    let intermediate = &record.responses[intermediate_index];
    let cfg = params.config.clone();
    check_lengths(&cfg, &record.prompt, &[intermediate, aligned])?;
    let last = last_scored_slot(aligned);
    let base = cfg.prompt_len + 1;

    let teacher = teacher_rows(params, &record.prompt, aligned, last)?;

    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);

    // AR branch: gradients flow through the aligned context.
    let ar_ctx = context_prefix(&record.prompt, aligned, last);
    let ar_logits = forward_graph(&mut tape, &bound, &cfg, &ar_ctx);
    let rows = ar_ctx.len();
    let mut targets = vec![0usize; rows];
    for i in 0..=last {
        targets[base + i] = aligned[i] as usize;
    }
    let mask = row_mask(rows, base, last);
    let l_ar = tape.masked_cross_entropy(ar_logits, &targets, &mask);

    // Consistency branch: gradients flow through the intermediate context
    // only; the teacher rows are fixed data.
    let student_ctx = context_prefix(&record.prompt, intermediate, last);
    let student_logits = forward_graph(&mut tape, &bound, &cfg, &student_ctx);
    let l_con = tape.masked_kl_from_rows(teacher, student_logits, &mask);

    let total = tape.add_scaled(l_ar, l_con, consistency_weight);
    let grads = tape.backward(total)?;
    let grad_arrays: Vec<DenseArray> =
        bound.nodes.iter().map(|&n| grads.get(n).expect("bound params are tracked").clone()).collect();
    let breakdown = LossBreakdown {
        l_ar: tape.value(l_ar).item(),
        l_con: tape.value(l_con).item(),
        l_total: tape.value(total).item(),
        masked_positions: cfg.response_len - (last + 1),
    };
    Ok((breakdown, grad_arrays))
}

/// Consistency value against explicitly provided teacher probability rows.
/// The finite-difference oracle uses this to freeze the teacher branch and
/// verify the stop-gradient: perturbing parameters moves only the student.
pub fn loss_consistency_frozen_teacher(
    params: &ModelParams,
    teacher_probs: &DenseArray,
    prompt: &[Token],
    intermediate: &[Token],
    aligned: &[Token],
) -> Result<f64, TrainError> {
    let cfg = &params.config;
    check_lengths(cfg, prompt, &[intermediate, aligned])?;
    let last = last_scored_slot(aligned);
    let base = cfg.prompt_len + 1;
    let student = forward_prefix(params, &context_prefix(prompt, intermediate, last))?;
    let cols = student.cols();
    let mut total = 0.0;
    for i in 0..=last {
        let p = teacher_probs.row(base + i);
        let z = student.row(base + i);
        let lse = kernels::logsumexp(z);
        for j in 0..cols {
            if p[j] > 0.0 {
                total += p[j] * (p[j].ln() - (z[j] - lse));
            }
        }
    }
    Ok(total / (last + 1) as f64)
}

/// Teacher probability rows for [`loss_consistency_frozen_teacher`].
pub fn frozen_teacher_rows(
    params: &ModelParams,
    prompt: &[Token],
    aligned: &[Token],
) -> Result<DenseArray, TrainError> {
    check_lengths(&params.config, prompt, &[aligned])?;
    teacher_rows(params, prompt, aligned, last_scored_slot(aligned))
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

fn optimizer_for(params: &ModelParams, lr: f64) -> AdamState {
    AdamState::new(&params.arrays(), AdamHyper::new(lr))
}

fn apply_update(
    params: &mut ModelParams,
    grad_sum: &mut [DenseArray],
    examples: usize,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    let inv = 1.0 / examples as f64;
    for g in grad_sum.iter_mut() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    state.hyper.learning_rate = lr;
    let grad_refs: Vec<&DenseArray> = grad_sum.iter().collect();
    let mut arrays = params.arrays_mut();
    let mut refs: Vec<&mut DenseArray> = arrays.iter_mut().map(|a| &mut **a).collect();
    adam_step(&mut refs, &grad_refs, state)?;
    for g in grad_sum.iter_mut() {
        g.data_mut().fill(0.0);
    }
    Ok(())
}

fn zero_grads_like(params: &ModelParams) -> Vec<DenseArray> {
    params.arrays().iter().map(|a| DenseArray::zeros(a.shape().to_vec())).collect()
}

fn accumulate(into: &mut [DenseArray], from: &[DenseArray]) {
    for (dst, src) in into.iter_mut().zip(from) {
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d += s;
        }
    }
}

/// AR gradients for one (prompt, response) pretraining pair.
fn ar_grads(
    params: &ModelParams,
    prompt: &[Token],
    response: &[Token],
) -> Result<(f64, Vec<DenseArray>), TrainError> {
    let cfg = params.config.clone();
    check_lengths(&cfg, prompt, &[response])?;
    let last = last_scored_slot(response);
    let base = cfg.prompt_len + 1;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let ctx = context_prefix(prompt, response, last);
    let logits = forward_graph(&mut tape, &bound, &cfg, &ctx);
    let mut targets = vec![0usize; ctx.len()];
    for i in 0..=last {
        targets[base + i] = response[i] as usize;
    }
    let mask = row_mask(ctx.len(), base, last);
    let loss = tape.masked_cross_entropy(logits, &targets, &mask);
    let grads = tape.backward(loss)?;
    let arrays = bound.nodes.iter().map(|&n| grads.get(n).expect("tracked").clone()).collect();
    Ok((tape.value(loss).item(), arrays))
}

/// Pretrains one base model on procedural pairs by minimizing the AR loss
/// with Adam under the cosine schedule. Deterministic per seed.
pub fn train_base(
    corpus: &[(TokenSeq, TokenSeq)],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_metrics: impl FnMut(&TrainMetrics),
) -> Result<ModelParams, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::InvalidArgument("empty corpus".into()));
    }
    let mut params = init_params(model_cfg, derive_seed(cfg.seed, "base-init", 0))?;
    let standardized: Vec<(TokenSeq, TokenSeq)> = corpus
        .iter()
        .map(|(p, r)| (p.clone(), crate::trajectory::standardize_length(r, model_cfg.response_len)))
        .collect();

    let micro_batches_per_epoch = standardized.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = micro_batches_per_epoch.div_ceil(cfg.grad_accum_steps);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = optimizer_for(&params, cfg.learning_rate);
    let mut grad_sum = zero_grads_like(&params);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..standardized.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "base-epoch", epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut cursor = 0usize;
        while cursor < order.len() {
            let mut examples = 0usize;
            let mut loss_sum = 0.0;
            for _ in 0..cfg.grad_accum_steps {
                let end = (cursor + cfg.batch_size).min(order.len());
                for &idx in &order[cursor..end] {
                    let (p, r) = &standardized[idx];
                    let (loss, grads) = ar_grads(&params, p, r)?;
                    loss_sum += loss;
                    accumulate(&mut grad_sum, &grads);
                    examples += 1;
                }
                cursor = end;
                if cursor >= order.len() {
                    break;
                }
            }
            let lr = cosine_lr(cfg.learning_rate, step, total_steps, cfg.warmup_fraction);
            apply_update(&mut params, &mut grad_sum, examples, &mut state, lr)?;
            if step % cfg.log_interval == 0 || step + 1 == total_steps {
                let mean = loss_sum / examples as f64;
                on_metrics(&TrainMetrics {
                    step,
                    lr,
                    l_ar: mean,
                    l_con: 0.0,
                    l_total: mean,
                    heldout_l_con: None,
                });
            }
            step += 1;
        }
    }
    Ok(params)
}

/// Mean consistency loss over a held-out split, always from the most
/// unaligned intermediate (index 0).
pub fn mean_heldout_consistency(
    params: &ModelParams,
    heldout: &[TrajectoryRecord],
) -> Result<f64, TrainError> {
    if heldout.is_empty() {
        return Err(TrainError::InvalidArgument("empty held-out split".into()));
    }
    let mut total = 0.0;
    for record in heldout {
        total +=
            loss_consistency(params, &record.prompt, &record.responses[0], record.aligned())?;
    }
    Ok(total / heldout.len() as f64)
}

/// Trains the refiner. Each micro-example draws a record uniformly and an
/// intermediate index uniformly from the non-aligned ranks, computes the
/// total loss, and applies Adam with gradient accumulation under the cosine
/// schedule. Deterministic per seed.
pub fn train_diffpo(
    dataset: &[TrajectoryRecord],
    init: &ModelParams,
    cfg: &TrainConfig,
    heldout: Option<&[TrajectoryRecord]>,
    mut on_metrics: impl FnMut(&TrainMetrics),
) -> Result<ModelParams, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::InvalidArgument("empty dataset".into()));
    }
    for record in dataset {
        record
            .validate(init.config.response_len)
            .map_err(|e| TrainError::InvalidArgument(e.to_string()))?;
    }
    let mut params = init.clone();
    let examples_per_step = cfg.batch_size * cfg.grad_accum_steps;
    let total_steps = (dataset.len() * cfg.epochs).div_ceil(examples_per_step).max(1);
    let mut state = optimizer_for(&params, cfg.learning_rate);
    let mut grad_sum = zero_grads_like(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "diffpo-draw", 0));

    for step in 0..total_steps {
        let mut ar_sum = 0.0;
        let mut con_sum = 0.0;
        let mut total_sum = 0.0;
        for _ in 0..examples_per_step {
            let record = &dataset[rng.gen_range(0..dataset.len())];
            let intermediate_index = rng.gen_range(0..record.t() - 1);
            // At weight zero the consistency branch carries no gradient, so
            // skip its two forward passes; its loss reports as zero.
            let (breakdown, grads) = if cfg.consistency_weight == 0.0 {
                let (l_ar, grads) = ar_grads(&params, &record.prompt, record.aligned())?;
                let masked = params.config.response_len - (last_scored_slot(record.aligned()) + 1);
                (LossBreakdown { l_ar, l_con: 0.0, l_total: l_ar, masked_positions: masked }, grads)
            } else {
                loss_total_with_grads(&params, record, intermediate_index, cfg.consistency_weight)?
            };
            ar_sum += breakdown.l_ar;
            con_sum += breakdown.l_con;
            total_sum += breakdown.l_total;
            accumulate(&mut grad_sum, &grads);
        }
        let lr = cosine_lr(cfg.learning_rate, step, total_steps, cfg.warmup_fraction);
        apply_update(&mut params, &mut grad_sum, examples_per_step, &mut state, lr)?;
        if step % cfg.log_interval == 0 || step + 1 == total_steps {
            let heldout_l_con = match heldout {
                Some(split) if !split.is_empty() => Some(mean_heldout_consistency(&params, split)?),
                _ => None,
            };
            on_metrics(&TrainMetrics {
                step,
                lr,
                l_ar: ar_sum / examples_per_step as f64,
                l_con: con_sum / examples_per_step as f64,
                l_total: total_sum / examples_per_step as f64,
                heldout_l_con,
            });
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numkit::{finite_diff_grad, grad_rel_err, softmax_row};
    use crate::reward::{gen_corpus, gen_prompt, reward, RewardSpec, StyleMix};
    use crate::trajectory::standardize_length;

    fn micro_cfg() -> ModelConfig {
        ModelConfig::micro(8, 2, 1, 4, 6)
    }

    fn record_for(cfg: &ModelConfig, responses: Vec<TokenSeq>) -> TrajectoryRecord {
        let n = cfg.response_len;
        let responses: Vec<TokenSeq> =
            responses.into_iter().map(|r| standardize_length(&r, n)).collect();
        let rewards: Vec<f64> = (0..responses.len()).map(|i| i as f64 / 10.0).collect();
        let provenance = (0..responses.len()).map(|i| format!("test{i}")).collect();
        TrajectoryRecord {
            prompt: vec![10, 11, 12, 13],
            responses,
            rewards,
            provenance,
        }
    }

    /// Per-position logits table covering the whole context, for exact loss
    /// values.
    struct PositionBot {
        vocab: usize,
        rows: Vec<Vec<f64>>,
    }

    impl SequenceModel for PositionBot {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn logits_rows(&self, tokens: &[Token]) -> DenseArray {
            let mut data = Vec::with_capacity(tokens.len() * self.vocab);
            for i in 0..tokens.len() {
                data.extend_from_slice(&self.rows[i]);
            }
            DenseArray::matrix(tokens.len(), self.vocab, data).unwrap()
        }
    }

    #[test]
    fn perfect_fit_model_has_zero_ar_loss() {
        let cfg = micro_cfg();
        let aligned = standardize_length(&[44, 45, EOS], cfg.response_len);
        // Put an enormous logit on the right target at every scored row.
        let base = cfg.prompt_len + 1;
        let mut rows = vec![vec![0.0; 64]; cfg.max_context];
        for (i, &target) in aligned.iter().enumerate().take(3) {
            rows[base + i][target as usize] = 1000.0;
        }
        let bot = PositionBot { vocab: 64, rows };
        let loss = loss_ar_value(&bot, &cfg, &[10, 11, 12, 13], &aligned).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_model_ar_loss_is_log_vocab() {
        let cfg = micro_cfg();
        let aligned = standardize_length(&[44, 45, 46, EOS], cfg.response_len);
        let rows = vec![vec![0.0; 64]; cfg.max_context];
        let bot = PositionBot { vocab: 64, rows };
        let loss = loss_ar_value(&bot, &cfg, &[10, 11, 12, 13], &aligned).unwrap();
        assert!((loss - 64.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn consistency_loss_is_zero_at_its_fixed_point() {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 4).unwrap();
        let y = standardize_length(&[44, 54, 45, EOS], cfg.response_len);
        let loss = loss_consistency(&params, &[10, 11, 12, 13], &y, &y).unwrap();
        assert!(loss.abs() <= 1e-12, "loss = {loss}");
    }

    #[test]
    fn consistency_loss_is_nonnegative() {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let draft: TokenSeq = (0..4).map(|_| rng.gen_range(4..64)).collect();
            let aligned: TokenSeq = (0..4).map(|_| rng.gen_range(44..54)).collect();
            let loss = loss_consistency(
                &params,
                &[10, 11, 12, 13],
                &standardize_length(&draft, 6),
                &standardize_length(&aligned, 6),
            )
            .unwrap();
            assert!(loss >= -1e-15);
        }
    }

    #[test]
    fn consistency_loss_matches_hand_summed_kls() {
        // Two scored positions; rows differ between the aligned and
        // intermediate contexts only at the second one. Oracle: standalone
        // kl_forward over the softmaxed table rows.
        let cfg = micro_cfg();
        let base = cfg.prompt_len + 1;
        let n = cfg.response_len;
        let aligned = standardize_length(&[5, EOS], n);
        let intermediate = standardize_length(&[7, EOS], n);

        // The model keys its rows on the token at the previous position, so
        // the two contexts diverge from row base+1 onward.
        struct PrevBot {
            vocab: usize,
            tables: Vec<Vec<f64>>,
        }
        impl SequenceModel for PrevBot {
            fn vocab_size(&self) -> usize {
                self.vocab
            }
            fn logits_rows(&self, tokens: &[Token]) -> DenseArray {
                let mut data = Vec::new();
                for &t in tokens {
                    data.extend_from_slice(&self.tables[t as usize]);
                }
                DenseArray::matrix(tokens.len(), self.vocab, data).unwrap()
            }
        }
        let mut tables = vec![vec![0.0; 16]; 16];
        tables[5] = (0..16).map(|j| (j as f64 * 0.37).sin()).collect();
        tables[7] = (0..16).map(|j| (j as f64 * 0.91).cos()).collect();
        let bot = PrevBot { vocab: 16, tables: tables.clone() };
        let loss =
            loss_consistency_value(&bot, &cfg, &[10, 11, 12, 13], &intermediate, &aligned).unwrap();

        // Slot 0 conditions on SEP in both contexts: zero KL. Slot 1
        // conditions on token 5 vs token 7.
        let p = softmax_row(&tables[5]).unwrap();
        let q = softmax_row(&tables[7]).unwrap();
        let expected = crate::numkit::kl_forward(&p, &q).unwrap() / 2.0;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        let _ = base;
    }

    #[test]
    fn traced_and_untraced_losses_agree() {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 12).unwrap();
        let record = record_for(&cfg, vec![vec![54, 55, EOS], vec![44, 45, EOS]]);
        let train_cfg = TrainConfig { consistency_weight: 0.7, ..TrainConfig::default() };
        let breakdown = loss_total(&params, &record, 0, &train_cfg).unwrap();
        let (traced, _) = loss_total_with_grads(&params, &record, 0, 0.7).unwrap();
        assert!((breakdown.l_ar - traced.l_ar).abs() < 1e-12);
        assert!((breakdown.l_con - traced.l_con).abs() < 1e-12);
        assert!((breakdown.l_total - traced.l_total).abs() < 1e-12);
    }

    #[test]
    fn loss_total_contract() {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 9).unwrap();
        let record = record_for(&cfg, vec![vec![54, EOS], vec![44, 45, EOS]]);

        // Weight zero reduces the total to the AR term.
        let zero = TrainConfig { consistency_weight: 0.0, ..TrainConfig::default() };
        let b = loss_total(&params, &record, 0, &zero).unwrap();
        assert_eq!(b.l_total, b.l_ar);

        // A duplicated aligned response zeroes the consistency term.
        let dup = record_for(&cfg, vec![vec![44, 45, EOS], vec![44, 45, EOS]]);
        let one = TrainConfig::default();
        let b = loss_total(&params, &dup, 0, &one).unwrap();
        assert!(b.l_con.abs() <= 1e-12);
        assert!((b.l_total - b.l_ar).abs() <= 1e-12);

        // The aligned index is not a valid intermediate.
        assert!(loss_total(&params, &record, 1, &one).is_err());
        assert!(loss_total(&params, &record, 5, &one).is_err());
    }

    #[test]
    fn breakdown_recombines_and_is_linear_in_weight() {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let draft: TokenSeq = (0..5).map(|_| rng.gen_range(4..64)).collect();
            let aligned: TokenSeq = (0..4).map(|_| rng.gen_range(44..54)).collect();
            let record = record_for(&cfg, vec![draft, aligned]);
            for (w1, w2) in [(0.0, 1.0), (1.0, 10.0), (0.3, 2.7)] {
                let c1 = TrainConfig { consistency_weight: w1, ..TrainConfig::default() };
                let c2 = TrainConfig { consistency_weight: w2, ..TrainConfig::default() };
                let b1 = loss_total(&params, &record, 0, &c1).unwrap();
                let b2 = loss_total(&params, &record, 0, &c2).unwrap();
                assert!((b1.l_total - b1.l_ar - w1 * b1.l_con).abs() < 1e-9);
                assert!((b1.l_total - b2.l_total - (w1 - w2) * b1.l_con).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pad_region_edits_never_change_losses() {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 15).unwrap();
        let aligned = standardize_length(&[44, 45, EOS], cfg.response_len);
        let draft = standardize_length(&[54, 55, 56, 57, 58], cfg.response_len);
        let prompt = [10, 11, 12, 13];
        let ar = loss_ar(&params, &prompt, &aligned).unwrap();
        let con = loss_consistency(&params, &prompt, &draft, &aligned).unwrap();
        // Corrupt the PAD region (slots after the aligned EOS at index 2).
        let mut noisy = aligned.clone();
        noisy[3] = 60;
        noisy[4] = 61;
        noisy[5] = 62;
        assert_eq!(loss_ar(&params, &prompt, &noisy).unwrap(), ar);
        assert_eq!(loss_consistency(&params, &prompt, &draft, &noisy).unwrap(), con);
        assert_eq!(
            loss_consistency(&params, &prompt, &draft, &aligned).unwrap(),
            con
        );
        let breakdown = loss_total(
            &params,
            &record_for(&cfg, vec![draft.clone(), aligned.clone()]),
            0,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(breakdown.masked_positions, cfg.response_len - 3);
    }

    fn params_from_arrays(cfg: &ModelConfig, arrays: &[DenseArray]) -> ModelParams {
        let mut params = init_params(cfg, 0).unwrap();
        for (dst, src) in params.arrays_mut().into_iter().zip(arrays) {
            *dst = src.clone();
        }
        params
    }

    /// Analytic gradients of the total loss match central differences, with
    /// the teacher branch frozen in the oracle. An implementation that let
    /// gradients leak through the teacher would fail this.
    #[test]
    fn gradients_match_finite_differences_with_frozen_teacher() {
        let cfg = micro_cfg();
        let params = init_params(&cfg, 31).unwrap();
        let record = record_for(&cfg, vec![vec![54, 55, 56, EOS], vec![44, 45, EOS]]);
        let omega = 0.5;
        let (_, analytic) = loss_total_with_grads(&params, &record, 0, omega).unwrap();

        let teacher = frozen_teacher_rows(&params, &record.prompt, record.aligned()).unwrap();
        let base_arrays: Vec<DenseArray> = params.arrays().into_iter().cloned().collect();
        let oracle = finite_diff_grad(
            |arrays| {
                let p = params_from_arrays(&cfg, arrays);
                let ar = loss_ar(&p, &record.prompt, record.aligned()).unwrap();
                let con = loss_consistency_frozen_teacher(
                    &p,
                    &teacher,
                    &record.prompt,
                    &record.responses[0],
                    record.aligned(),
                )
                .unwrap();
                ar + omega * con
            },
            &base_arrays,
            1e-5,
        )
        .unwrap();
        for (pi, (a, o)) in analytic.iter().zip(&oracle).enumerate() {
            for (j, (&av, &ov)) in a.data().iter().zip(o.data()).enumerate() {
                let err = grad_rel_err(av, ov, 1e-3);
                assert!(err < 1e-5, "param {pi}[{j}]: {av} vs {ov} (err {err})");
            }
        }
    }

    #[test]
    fn base_training_reduces_loss_and_is_deterministic() {
        let mut cfg = ModelConfig::micro(16, 4, 1, 4, 8);
        cfg.ffn_width = 32;
        let mix = StyleMix::with_plus_probability(1.0);
        let corpus = gen_corpus(&mix, &cfg, 256, 7).unwrap();
        let tc = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 16,
            epochs: 10,
            log_interval: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut losses = Vec::new();
        let trained = train_base(&corpus, &cfg, &tc, |m| losses.push(m.l_ar)).unwrap();
        // Per-batch losses are noisy; compare the first epoch's mean against
        // the last epoch's mean.
        let per_epoch = losses.len() / tc.epochs;
        let first: f64 = losses[..per_epoch].iter().sum::<f64>() / per_epoch as f64;
        let last: f64 = losses[losses.len() - per_epoch..].iter().sum::<f64>() / per_epoch as f64;
        assert!(last < 0.8 * first, "loss went {first} -> {last}");

        let again = train_base(&corpus, &cfg, &tc, |_| {}).unwrap();
        assert_eq!(trained, again);
    }

    #[test]
    fn base_model_style_follows_its_corpus_mix() {
        // A pure-preferred corpus must yield higher-reward samples than a
        // balanced one, by a clear margin over 200 prompts.
        let mut cfg = ModelConfig::micro(16, 4, 1, 4, 8);
        cfg.ffn_width = 32;
        let tc = TrainConfig {
            learning_rate: 1.5e-3,
            batch_size: 16,
            epochs: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let spec = RewardSpec::default();
        let mut means = Vec::new();
        for (seed, plus) in [(1u64, 1.0), (2u64, 0.5)] {
            let corpus = gen_corpus(&StyleMix::with_plus_probability(plus), &cfg, 128, seed).unwrap();
            let model = train_base(&corpus, &cfg, &tc, |_| {}).unwrap();
            let mut total = 0.0;
            for i in 0..200 {
                let prompt = gen_prompt(&cfg.vocab, derive_seed(99, "eval", i), cfg.prompt_len);
                let sample = crate::decode::ar_sample(&model, &prompt, &cfg, 0.7, i).unwrap();
                total += reward(&spec, &prompt, &standardize_length(&sample, cfg.response_len));
            }
            means.push(total / 200.0);
        }
        assert!(
            means[0] >= means[1] + 0.05,
            "pure mix {} vs balanced {}",
            means[0],
            means[1]
        );
    }

    #[test]
    fn diffpo_null_update_and_determinism() {
        let cfg = micro_cfg();
        let init = init_params(&cfg, 42).unwrap();
        let dataset =
            vec![record_for(&cfg, vec![vec![54, EOS], vec![44, EOS]]); 4];
        let null = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train_diffpo(&dataset, &init, &null, None, |_| {}).unwrap();
        assert_eq!(out, init);

        let tc = TrainConfig { learning_rate: 1e-3, batch_size: 2, epochs: 2, ..TrainConfig::default() };
        let a = train_diffpo(&dataset, &init, &tc, None, |_| {}).unwrap();
        let b = train_diffpo(&dataset, &init, &tc, None, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init);
    }

    #[test]
    fn diffpo_training_reduces_heldout_consistency() {
        // Small end-to-end check: records map disfavored drafts to one
        // preferred aligned pattern; training must shrink the held-out
        // consistency loss from its pre-training value.
        let mut cfg = ModelConfig::micro(16, 4, 1, 4, 8);
        cfg.ffn_width = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let make_record = |rng: &mut ChaCha8Rng| {
            let draft: TokenSeq = (0..6).map(|_| rng.gen_range(54..64)).collect();
            let aligned: TokenSeq = (0..5).map(|_| rng.gen_range(44..48)).collect();
            let mut r = record_for(&cfg, vec![draft, aligned]);
            r.prompt = (0..4).map(|_| rng.gen_range(4..44)).collect();
            r
        };
        let dataset: Vec<TrajectoryRecord> = (0..48).map(|_| make_record(&mut rng)).collect();
        let heldout: Vec<TrajectoryRecord> = (0..8).map(|_| make_record(&mut rng)).collect();
        let init = init_params(&cfg, 1).unwrap();
        let before = mean_heldout_consistency(&init, &heldout).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 12,
            seed: 2,
            ..TrainConfig::default()
        };
        let trained = train_diffpo(&dataset, &init, &tc, Some(&heldout), |_| {}).unwrap();
        let after = mean_heldout_consistency(&trained, &heldout).unwrap();
        assert!(after < before, "held-out consistency went {before} -> {after}");
    }

    #[test]
    fn cosine_schedule_shape() {
        let total = 100;
        let base = 1.0;
        // Warmup climbs to the base rate, then decays to near zero.
        assert!(cosine_lr(base, 0, total, 0.03) < base);
        assert!((cosine_lr(base, 3, total, 0.03) - base).abs() < 1e-12);
        assert!(cosine_lr(base, 50, total, 0.03) < base);
        assert!(cosine_lr(base, 99, total, 0.03) < 0.01);
        for s in 4..99 {
            assert!(
                cosine_lr(base, s + 1, total, 0.03) <= cosine_lr(base, s, total, 0.03) + 1e-12
            );
        }
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_ok());
        assert!(TrainConfig { consistency_weight: -1.0, ..TrainConfig::default() }
            .validate()
            .is_err());
        assert!(TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

}
