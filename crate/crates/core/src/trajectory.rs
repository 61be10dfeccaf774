//! Alignment trajectories: for each prompt, T responses sampled from a pool
//! of base generators, scored with the reward rule, and ranked ascending.
//! The last entry is the aligned target the refiner trains toward. Records
//! persist as one JSON object per line.

use crate::decode::ar_sample;
use crate::model::{ModelConfig, SequenceModel, EOS, PAD};
use crate::reward::{reward, RewardSpec};
use crate::util::derive_seed;
use crate::{Token, TokenSeq};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One prompt with T responses ordered ascending by reward. The final entry
/// is the aligned target; the rest are the intermediates the consistency
/// loss draws from. All responses are standardized to the response budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub prompt: TokenSeq,
    pub responses: Vec<TokenSeq>,
    pub rewards: Vec<f64>,
    pub provenance: Vec<String>,
}

impl TrajectoryRecord {
    pub fn t(&self) -> usize {
        self.responses.len()
    }

    pub fn aligned(&self) -> &TokenSeq {
        self.responses.last().expect("records hold at least two responses")
    }

    pub fn validate(&self, n: usize) -> Result<(), TrajectoryError> {
        if self.responses.len() < 2 {
            return Err(TrajectoryError::InvalidArgument("fewer than two responses".into()));
        }
        if self.rewards.len() != self.responses.len()
            || self.provenance.len() != self.responses.len()
        {
            return Err(TrajectoryError::InvalidArgument("misaligned record fields".into()));
        }
        if self.responses.iter().any(|r| r.len() != n) {
            return Err(TrajectoryError::InvalidArgument(format!(
                "response not standardized to length {n}"
            )));
        }
        if self.rewards.windows(2).any(|w| w[0] > w[1]) {
            return Err(TrajectoryError::InvalidArgument("rewards not ascending".into()));
        }
        Ok(())
    }
}

/// Pads short sequences with PAD; truncates long ones to `n`, forcing the
/// final slot to EOS when truncation dropped every EOS.
pub fn standardize_length(seq: &[Token], n: usize) -> TokenSeq {
    let mut out = seq.to_vec();
    if out.len() > n {
        out.truncate(n);
        if !out.contains(&EOS) {
            out[n - 1] = EOS;
        }
    }
    out.resize(n, PAD);
    out
}

/// Samples T responses round-robin over the pool at the given temperature,
/// scores them, and returns the reward-ranked record. Equal rewards keep
/// generation order, so the earlier generator index ranks first.
pub fn build_trajectory<M: SequenceModel>(
    base_pool: &[M],
    spec: &RewardSpec,
    cfg: &ModelConfig,
    prompt: &[Token],
    t_responses: usize,
    temperature: f64,
    seed: u64,
) -> Result<TrajectoryRecord, TrajectoryError> {
    if base_pool.is_empty() {
        return Err(TrajectoryError::InvalidArgument("empty base pool".into()));
    }
    if t_responses < 2 {
        return Err(TrajectoryError::InvalidArgument("T must be at least 2".into()));
    }
    let mut scored: Vec<(f64, TokenSeq, String)> = Vec::with_capacity(t_responses);
    for draw in 0..t_responses {
        let gen_idx = draw % base_pool.len();
        let sample_seed = derive_seed(seed, "trajectory-draw", draw as u64);
        let raw = ar_sample(&base_pool[gen_idx], prompt, cfg, temperature, sample_seed)
            .map_err(|e| TrajectoryError::InvalidArgument(e.to_string()))?;
        let response = standardize_length(&raw, cfg.response_len);
        let score = reward(spec, prompt, &response);
        scored.push((score, response, format!("base{gen_idx}/draw{draw}")));
    }
    // Stable sort preserves draw order on ties.
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("rewards are finite"));
    let mut record = TrajectoryRecord {
        prompt: prompt.to_vec(),
        responses: Vec::with_capacity(t_responses),
        rewards: Vec::with_capacity(t_responses),
        provenance: Vec::with_capacity(t_responses),
    };
    for (score, response, prov) in scored {
        record.rewards.push(score);
        record.responses.push(response);
        record.provenance.push(prov);
    }
    record.validate(cfg.response_len)?;
    Ok(record)
}

/// One UTF-8 JSON object per line, responses ascending by reward.
pub fn write_dataset(
    records: &[TrajectoryRecord],
    path: impl AsRef<Path>,
) -> Result<(), TrajectoryError> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut w, record)
            .map_err(|e| TrajectoryError::Parse { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Strict read: any malformed line fails the whole call, naming the line.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>, TrajectoryError> {
    let (records, error) = read_dataset_inner(path)?;
    if let Some(e) = error {
        return Err(e);
    }
    Ok(records)
}

/// Lenient read: returns every record before the first malformed line,
/// together with the error that stopped the scan.
pub fn read_dataset_partial(
    path: impl AsRef<Path>,
) -> Result<(Vec<TrajectoryRecord>, Option<TrajectoryError>), TrajectoryError> {
    read_dataset_inner(path)
}

fn read_dataset_inner(
    path: impl AsRef<Path>,
) -> Result<(Vec<TrajectoryRecord>, Option<TrajectoryError>), TrajectoryError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrajectoryRecord>(&line) {
            Ok(record) => records.push(record),
            Err(e) => {
                return Ok((
                    records,
                    Some(TrajectoryError::Parse { line: idx + 1, message: e.to_string() }),
                ))
            }
        }
    }
    Ok((records, None))
}
