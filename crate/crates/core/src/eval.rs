//! End-to-end scenario runner: trains a pool of base models with differing
//! style mixes, builds the trajectory dataset, trains the refiner, then
//! measures reward gains, the best-of-pool oracle, block-size pass counts,
//! and transfer onto a base model the refiner never saw. All stages key
//! their randomness off one scenario seed, so reports are reproducible
//! bit for bit.

use crate::decode::{ar_sample, hybrid_refine, jacobi_refine};
use crate::model::{ModelConfig, ModelParams, SequenceModel};
use crate::reward::{gen_prompt, reward, RewardSpec, StyleMix};
use crate::trajectory::{build_trajectory, standardize_length, TrajectoryRecord};
use crate::train::{train_base, train_diffpo, TrainConfig};
use crate::util::{derive_seed, indexed_map};
use crate::{Token, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn stage<T, E: std::fmt::Display>(name: &'static str, r: Result<T, E>) -> Result<T, EvalError> {
    r.map_err(|e| EvalError::Stage { stage: name, message: e.to_string() })
}

/// Full pipeline configuration. Held-out prompts are disjoint from training
/// prompts by seed partition: the two sets derive from different stream
/// tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub model: ModelConfig,
    pub reward: RewardSpec,
    /// Preferred-style probability per pool generator.
    pub pool_mixes: Vec<f64>,
    /// Content-echo rate shared by all generators.
    pub content_rate: f64,
    pub corpus_size: usize,
    pub base_train: TrainConfig,
    /// Responses per trajectory.
    pub t_responses: usize,
    pub sample_temperature: f64,
    pub train_prompts: usize,
    pub heldout_prompts: usize,
    pub diffpo_train: TrainConfig,
    /// Ablation grid for the consistency weight. The entry equal to
    /// `primary_omega` drives the block sweep and transfer stages.
    pub omega_values: Vec<f64>,
    pub primary_omega: f64,
    pub blocks: Vec<usize>,
    /// Style mix of the unseen transfer base model.
    pub transfer_mix: f64,
    pub seeds: Vec<u64>,
    pub bootstrap_resamples: usize,
    pub threads: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            reward: RewardSpec::default(),
            pool_mixes: vec![1.0, 0.7, 0.4, 0.1],
            content_rate: 0.25,
            corpus_size: 1024,
            base_train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 16,
                epochs: 3,
                ..TrainConfig::default()
            },
            t_responses: 6,
            sample_temperature: 0.7,
            train_prompts: 2000,
            heldout_prompts: 200,
            diffpo_train: TrainConfig {
                learning_rate: 6e-4,
                batch_size: 8,
                epochs: 3,
                ..TrainConfig::default()
            },
            omega_values: vec![0.0, 1.0],
            primary_omega: 1.0,
            blocks: vec![1, 4, 8, 16, 32],
            transfer_mix: 0.25,
            seeds: vec![1, 2, 3],
            bootstrap_resamples: 1000,
            threads: 1,
        }
    }
}

impl ScenarioConfig {
    /// Reduced profile for unit tests and smoke runs.
    pub fn small() -> Self {
        let mut model = ModelConfig::micro(16, 4, 1, 4, 8);
        model.ffn_width = 32;
        Self {
            model,
            pool_mixes: vec![1.0, 0.2],
            corpus_size: 96,
            base_train: TrainConfig {
                learning_rate: 1.5e-3,
                batch_size: 16,
                epochs: 3,
                ..TrainConfig::default()
            },
            t_responses: 3,
            train_prompts: 48,
            heldout_prompts: 16,
            diffpo_train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                epochs: 4,
                ..TrainConfig::default()
            },
            omega_values: vec![1.0],
            blocks: vec![1, 2, 8],
            seeds: vec![1],
            bootstrap_resamples: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.pool_mixes.is_empty() || self.seeds.is_empty() || self.omega_values.is_empty() {
            return Err(EvalError::InvalidArgument(
                "pool mixes, seeds, and omega values must be non-empty".into(),
            ));
        }
        if !self.omega_values.contains(&self.primary_omega) {
            return Err(EvalError::InvalidArgument(format!(
                "primary omega {} missing from the ablation grid",
                self.primary_omega
            )));
        }
        for &b in &self.blocks {
            if b == 0 || self.model.response_len % b != 0 {
                return Err(EvalError::InvalidArgument(format!(
                    "block {b} does not divide the response budget {}",
                    self.model.response_len
                )));
            }
        }
        if self.t_responses < 2 {
            return Err(EvalError::InvalidArgument("need at least two responses".into()));
        }
        Ok(())
    }
}

/// A mean with a seeded bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanWithCi {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub count: usize,
}

/// Percentile bootstrap over prompt-level values; the reward rule is exact,
/// so the interval reflects prompt sampling only.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64) -> MeanWithCi {
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count.max(1) as f64;
    if count < 2 || resamples == 0 {
        return MeanWithCi { mean, ci_lo: mean, ci_hi: mean, count };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            (0..count).map(|_| values[rng.gen_range(0..count)]).sum::<f64>() / count as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let lo_idx = ((resamples as f64) * 0.025) as usize;
    let hi_idx = (((resamples as f64) * 0.975) as usize).min(resamples - 1);
    MeanWithCi { mean, ci_lo: means[lo_idx], ci_hi: means[hi_idx], count }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One scored datum; the audit trail every reported mean reduces to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerPromptRecord {
    pub seed: u64,
    pub system: String,
    pub prompt_id: usize,
    pub reward: f64,
    pub forward_passes: Option<usize>,
    pub block: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaStat {
    pub omega: f64,
    pub refined: MeanWithCi,
    pub gain_over_base: f64,
    pub mean_forward_passes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStat {
    pub block: usize,
    pub mean_reward: f64,
    pub mean_forward_passes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferStat {
    pub base: MeanWithCi,
    pub refined: MeanWithCi,
    pub second_pass: MeanWithCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub base: MeanWithCi,
    pub best_of_pool: MeanWithCi,
    pub by_omega: Vec<OmegaStat>,
    pub blocks: Vec<BlockStat>,
    pub transfer: TransferStat,
}

impl SeedReport {
    pub fn omega_stat(&self, omega: f64) -> Option<&OmegaStat> {
        self.by_omega.iter().find(|o| o.omega == omega)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ScenarioConfig,
    pub seeds: Vec<SeedReport>,
    pub records: Vec<PerPromptRecord>,
}

impl EvalReport {
    pub fn median_over_seeds(&self, f: impl Fn(&SeedReport) -> f64) -> f64 {
        let values: Vec<f64> = self.seeds.iter().map(f).collect();
        median(&values)
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Trains one base model per configured style mix.
pub fn train_pool(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<ModelParams>, EvalError> {
    cfg.pool_mixes
        .iter()
        .enumerate()
        .map(|(i, &mix)| {
            let corpus = stage(
                "corpus",
                crate::reward::gen_corpus(
                    &StyleMix::with_rates(mix, cfg.content_rate),
                    &cfg.model,
                    cfg.corpus_size,
                    derive_seed(seed, "corpus", i as u64),
                ),
            )?;
            let tc = TrainConfig {
                seed: derive_seed(seed, "base-train", i as u64),
                ..cfg.base_train.clone()
            };
            stage("train-base", train_base(&corpus, &cfg.model, &tc, |_| {}))
        })
        .collect()
}

/// Trains the unseen transfer base model (fresh seed stream, its own mix).
pub fn train_transfer_base(cfg: &ScenarioConfig, seed: u64) -> Result<ModelParams, EvalError> {
    let corpus = stage(
        "transfer-corpus",
        crate::reward::gen_corpus(
            &StyleMix::with_rates(cfg.transfer_mix, cfg.content_rate),
            &cfg.model,
            cfg.corpus_size,
            derive_seed(seed, "transfer-corpus", 0),
        ),
    )?;
    let tc = TrainConfig { seed: derive_seed(seed, "transfer-train", 0), ..cfg.base_train.clone() };
    stage("transfer-train", train_base(&corpus, &cfg.model, &tc, |_| {}))
}

pub fn training_prompts(cfg: &ScenarioConfig, seed: u64) -> Vec<TokenSeq> {
    (0..cfg.train_prompts)
        .map(|i| {
            gen_prompt(&cfg.model.vocab, derive_seed(seed, "train-prompt", i as u64), cfg.model.prompt_len)
        })
        .collect()
}

pub fn heldout_prompts(cfg: &ScenarioConfig, seed: u64) -> Vec<TokenSeq> {
    (0..cfg.heldout_prompts)
        .map(|i| {
            gen_prompt(
                &cfg.model.vocab,
                derive_seed(seed, "heldout-prompt", i as u64),
                cfg.model.prompt_len,
            )
        })
        .collect()
}

/// Builds the trajectory dataset over the training prompts.
pub fn build_dataset(
    pool: &[ModelParams],
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>, EvalError> {
    let prompts = training_prompts(cfg, seed);
    let results = indexed_map(prompts.len(), cfg.threads, |i| {
        build_trajectory(
            pool,
            &cfg.reward,
            &cfg.model,
            &prompts[i],
            cfg.t_responses,
            cfg.sample_temperature,
            derive_seed(seed, "trajectory", i as u64),
        )
    });
    stage("trajectories", results.into_iter().collect::<Result<Vec<_>, _>>())
}

/// Trains one refiner at the given consistency weight, initialized from a
/// copy of the first pool model.
pub fn train_refiner(
    dataset: &[TrajectoryRecord],
    init: &ModelParams,
    cfg: &ScenarioConfig,
    omega: f64,
    seed: u64,
) -> Result<ModelParams, EvalError> {
    let tc = TrainConfig {
        consistency_weight: omega,
        seed: derive_seed(seed, "diffpo-train", omega.to_bits()),
        ..cfg.diffpo_train.clone()
    };
    stage("train-diffpo", train_diffpo(dataset, init, &tc, None, |_| {}))
}

/// Best-of-K sampling from a single base model: K seeded draws, the
/// reward argmax wins, earliest draw on ties.
pub fn best_of_k<M: SequenceModel>(
    base: &M,
    spec: &RewardSpec,
    cfg: &ModelConfig,
    prompt: &[Token],
    k: usize,
    seed: u64,
    temperature: f64,
) -> Result<TokenSeq, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidArgument("K must be at least 1".into()));
    }
    let mut best: Option<(f64, TokenSeq)> = None;
    for draw in 0..k {
        let raw = stage(
            "best-of-k",
            ar_sample(base, prompt, cfg, temperature, derive_seed(seed, "bok-draw", draw as u64)),
        )?;
        let candidate = standardize_length(&raw, cfg.response_len);
        let score = reward(spec, prompt, &candidate);
        let better = match &best {
            Some((s, _)) => score > *s,
            None => true,
        };
        if better {
            best = Some((score, candidate));
        }
    }
    Ok(best.expect("k >= 1").1)
}

/// Base outputs over held-out prompts: one sample per (prompt, pool model).
fn sample_base_outputs(
    pool: &[ModelParams],
    prompts: &[TokenSeq],
    cfg: &ScenarioConfig,
    seed: u64,
) -> Vec<Vec<TokenSeq>> {
    indexed_map(prompts.len(), cfg.threads, |i| {
        pool.iter()
            .enumerate()
            .map(|(j, model)| {
                let s = derive_seed(seed, "heldout-base-sample", (i * pool.len() + j) as u64);
                let raw = ar_sample(model, &prompts[i], &cfg.model, cfg.sample_temperature, s)
                    .expect("temperature is validated");
                standardize_length(&raw, cfg.model.response_len)
            })
            .collect()
    })
}

/// Per-block sweep statistics over prompts, refining one draft per prompt.
pub fn block_sweep(
    refiner: &ModelParams,
    drafts: &[TokenSeq],
    prompts: &[TokenSeq],
    spec: &RewardSpec,
    cfg: &ModelConfig,
    blocks: &[usize],
    threads: usize,
) -> Result<Vec<BlockStat>, EvalError> {
    if drafts.len() != prompts.len() {
        return Err(EvalError::InvalidArgument("one draft per prompt required".into()));
    }
    let mut stats = Vec::with_capacity(blocks.len());
    for &block in blocks {
        if block == 0 || cfg.response_len % block != 0 {
            return Err(EvalError::InvalidArgument(format!(
                "block {block} does not divide {}",
                cfg.response_len
            )));
        }
        let results = indexed_map(prompts.len(), threads, |i| {
            let (out, trace) = hybrid_refine(refiner, &prompts[i], &drafts[i], block, cfg)
                .expect("block divides the budget");
            (reward(spec, &prompts[i], &out), trace.forward_passes)
        });
        let n = results.len().max(1) as f64;
        stats.push(BlockStat {
            block,
            mean_reward: results.iter().map(|r| r.0).sum::<f64>() / n,
            mean_forward_passes: results.iter().map(|r| r.1 as f64).sum::<f64>() / n,
        });
    }
    Ok(stats)
}

/// Refines an unseen base model's held-out outputs with a fixed refiner;
/// reports base, refined, and second-pass means.
pub fn transfer_eval(
    refiner: &ModelParams,
    unseen_base: &ModelParams,
    prompts: &[TokenSeq],
    spec: &RewardSpec,
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<(TransferStat, Vec<PerPromptRecord>), EvalError> {
    let model_cfg = &cfg.model;
    let n = model_cfg.response_len;
    let rows = indexed_map(prompts.len(), cfg.threads, |i| {
        let s = derive_seed(seed, "transfer-sample", i as u64);
        let raw = ar_sample(unseen_base, &prompts[i], model_cfg, cfg.sample_temperature, s)
            .expect("temperature is validated");
        let base_out = standardize_length(&raw, n);
        let (refined, trace) = jacobi_refine(refiner, &prompts[i], &base_out, n, model_cfg)
            .expect("draft fits the budget");
        let (second, _) = jacobi_refine(refiner, &prompts[i], &refined, n, model_cfg)
            .expect("draft fits the budget");
        (
            reward(spec, &prompts[i], &base_out),
            reward(spec, &prompts[i], &refined),
            reward(spec, &prompts[i], &second),
            trace.forward_passes,
        )
    });
    let base: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let refined: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let second: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mut records = Vec::with_capacity(rows.len() * 3);
    for (i, row) in rows.iter().enumerate() {
        records.push(PerPromptRecord {
            seed,
            system: "transfer_base".into(),
            prompt_id: i,
            reward: row.0,
            forward_passes: None,
            block: None,
        });
        records.push(PerPromptRecord {
            seed,
            system: "transfer_refined".into(),
            prompt_id: i,
            reward: row.1,
            forward_passes: Some(row.3),
            block: None,
        });
        records.push(PerPromptRecord {
            seed,
            system: "transfer_second".into(),
            prompt_id: i,
            reward: row.2,
            forward_passes: None,
            block: None,
        });
    }
    let resamples = cfg.bootstrap_resamples;
    Ok((
        TransferStat {
            base: bootstrap_mean(&base, resamples, derive_seed(seed, "ci", 70)),
            refined: bootstrap_mean(&refined, resamples, derive_seed(seed, "ci", 71)),
            second_pass: bootstrap_mean(&second, resamples, derive_seed(seed, "ci", 72)),
        },
        records,
    ))
}

/// Runs the full pipeline for one seed. The returned records carry every
/// scored datum behind the report's means.
pub fn run_scenario_seed(
    cfg: &ScenarioConfig,
    seed: u64,
    mut on_progress: impl FnMut(&str),
) -> Result<(SeedReport, Vec<PerPromptRecord>), EvalError> {
    cfg.validate()?;
    let mut records = Vec::new();

    on_progress("training base pool");
    let pool = train_pool(cfg, seed)?;

    on_progress("sampling held-out base outputs");
    let prompts = heldout_prompts(cfg, seed);
    let base_outputs = sample_base_outputs(&pool, &prompts, cfg, seed);
    let mut base_rewards = Vec::with_capacity(prompts.len() * pool.len());
    for (i, per_model) in base_outputs.iter().enumerate() {
        for out in per_model {
            let r = reward(&cfg.reward, &prompts[i], out);
            base_rewards.push(r);
            records.push(PerPromptRecord {
                seed,
                system: "base".into(),
                prompt_id: i,
                reward: r,
                forward_passes: None,
                block: None,
            });
        }
    }

    on_progress("building trajectory dataset");
    let dataset = build_dataset(&pool, cfg, seed)?;

    on_progress("scoring best-of-pool oracle");
    let k = cfg.t_responses;
    let bo_rows = indexed_map(prompts.len(), cfg.threads, |i| {
        let mut best = f64::NEG_INFINITY;
        for draw in 0..k {
            let model = &pool[draw % pool.len()];
            let s = derive_seed(seed, "best-of-pool", (i * k + draw) as u64);
            let raw = ar_sample(model, &prompts[i], &cfg.model, cfg.sample_temperature, s)
                .expect("temperature is validated");
            let candidate = standardize_length(&raw, cfg.model.response_len);
            best = best.max(reward(&cfg.reward, &prompts[i], &candidate));
        }
        best
    });
    for (i, &r) in bo_rows.iter().enumerate() {
        records.push(PerPromptRecord {
            seed,
            system: "best_of_pool".into(),
            prompt_id: i,
            reward: r,
            forward_passes: None,
            block: None,
        });
    }

    let base_ci = bootstrap_mean(&base_rewards, cfg.bootstrap_resamples, derive_seed(seed, "ci", 1));
    let bo_ci = bootstrap_mean(&bo_rows, cfg.bootstrap_resamples, derive_seed(seed, "ci", 2));

    let mut by_omega = Vec::new();
    let mut primary_refiner: Option<ModelParams> = None;
    for &omega in &cfg.omega_values {
        on_progress(&format!("training refiner (consistency weight {omega})"));
        let refiner = train_refiner(&dataset, &pool[0], cfg, omega, seed)?;

        on_progress("refining held-out outputs");
        let n = cfg.model.response_len;
        let refined_rows = indexed_map(prompts.len(), cfg.threads, |i| {
            base_outputs[i]
                .iter()
                .map(|draft| {
                    let (out, trace) = jacobi_refine(&refiner, &prompts[i], draft, n, &cfg.model)
                        .expect("draft fits the budget");
                    (reward(&cfg.reward, &prompts[i], &out), trace.forward_passes)
                })
                .collect::<Vec<_>>()
        });
        let mut rewards = Vec::with_capacity(prompts.len() * pool.len());
        let mut passes = Vec::new();
        let system = format!("refined_w{omega}");
        for (i, per_model) in refined_rows.iter().enumerate() {
            for &(r, p) in per_model {
                rewards.push(r);
                passes.push(p as f64);
                records.push(PerPromptRecord {
                    seed,
                    system: system.clone(),
                    prompt_id: i,
                    reward: r,
                    forward_passes: Some(p),
                    block: None,
                });
            }
        }
        let refined_ci = bootstrap_mean(
            &rewards,
            cfg.bootstrap_resamples,
            derive_seed(seed, "ci", 100 + omega.to_bits() % 97),
        );
        by_omega.push(OmegaStat {
            omega,
            gain_over_base: refined_ci.mean - base_ci.mean,
            refined: refined_ci,
            mean_forward_passes: passes.iter().sum::<f64>() / passes.len().max(1) as f64,
        });
        if omega == cfg.primary_omega {
            primary_refiner = Some(refiner);
        }
    }
    let refiner = primary_refiner.expect("validated: primary omega is on the grid");

    on_progress("sweeping block sizes");
    let drafts: Vec<TokenSeq> = base_outputs
        .iter()
        .enumerate()
        .map(|(i, per_model)| per_model[i % pool.len()].clone())
        .collect();
    let blocks = block_sweep(
        &refiner,
        &drafts,
        &prompts,
        &cfg.reward,
        &cfg.model,
        &cfg.blocks,
        cfg.threads,
    )?;
    for b in &blocks {
        // The per-prompt rows behind each block mean.
        let rows = indexed_map(prompts.len(), cfg.threads, |i| {
            let (out, trace) = hybrid_refine(&refiner, &prompts[i], &drafts[i], b.block, &cfg.model)
                .expect("block divides the budget");
            (reward(&cfg.reward, &prompts[i], &out), trace.forward_passes)
        });
        for (i, (r, p)) in rows.into_iter().enumerate() {
            records.push(PerPromptRecord {
                seed,
                system: format!("hybrid_b{}", b.block),
                prompt_id: i,
                reward: r,
                forward_passes: Some(p),
                block: Some(b.block),
            });
        }
    }

    on_progress("transfer onto an unseen base model");
    let unseen = train_transfer_base(cfg, seed)?;
    let (transfer, transfer_records) =
        transfer_eval(&refiner, &unseen, &prompts, &cfg.reward, cfg, seed)?;
    records.extend(transfer_records);

    Ok((
        SeedReport { seed, base: base_ci, best_of_pool: bo_ci, by_omega, blocks, transfer },
        records,
    ))
}

/// Runs every configured seed and assembles the report.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    mut on_progress: impl FnMut(&str),
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        on_progress(&format!("seed {seed}"));
        let (report, mut seed_records) =
            run_scenario_seed(cfg, seed, |msg| on_progress(&format!("seed {seed}: {msg}")))?;
        seeds.push(report);
        records.append(&mut seed_records);
    }
    Ok(EvalReport { config: cfg.clone(), seeds, records })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Writes `report.json` (without the per-prompt rows), `per_prompt.jsonl`,
/// and `summary.csv` into a directory. Every mean in the report is
/// recomputable from the per-prompt rows.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let headline = serde_json::json!({
        "config": report.config,
        "seeds": report.seeds,
    });
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&headline)? + "\n")?;

    let mut jsonl = String::new();
    for record in &report.records {
        jsonl.push_str(&serde_json::to_string(record)?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("per_prompt.jsonl"), jsonl)?;

    let mut csv = String::from("seed,system,prompt_id,reward,forward_passes,block\n");
    for r in &report.records {
        let passes = r.forward_passes.map_or(String::new(), |p| p.to_string());
        let block = r.block.map_or(String::new(), |b| b.to_string());
        writeln!(csv, "{},{},{},{},{},{}", r.seed, r.system, r.prompt_id, r.reward, passes, block)
            .expect("string write");
    }
    std::fs::write(dir.join("summary.csv"), csv)?;
    Ok(())
}

impl From<serde_json::Error> for EvalError {
    fn from(e: serde_json::Error) -> Self {
        EvalError::Stage { stage: "serialize", message: e.to_string() }
    }
}

/// Mean reward of one system's records, for audit checks against the
/// report.
pub fn mean_from_records(records: &[PerPromptRecord], seed: u64, system: &str) -> f64 {
    let values: Vec<f64> =
        records.iter().filter(|r| r.seed == seed && r.system == system).map(|r| r.reward).collect();
    values.iter().sum::<f64>() / values.len().max(1) as f64
}
