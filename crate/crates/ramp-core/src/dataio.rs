//! Sample ingestion, dataset splitting, and synthetic data generation.
//!
//! Samples travel as NDJSON, one object per line:
//! `{"id": "...", "system": "...", "mos": 4.0, "emb": [0.1, ...]}`.
//! Unknown keys are rejected. The same format without `mos` is accepted
//! where only embeddings are needed (prediction inputs).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_SCORE_MIN: f64 = 1.0;
pub const DEFAULT_SCORE_MAX: f64 = 5.0;

/// One scored utterance: an opaque embedding vector plus its target score.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub system_id: String,
    pub embedding: Vec<f64>,
    pub score: f64,
}

/// An ordered, dimension-consistent collection of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<LabeledSample>,
    dim: usize,
}

impl SampleSet {
    /// Validates dimension consistency, id uniqueness, finiteness, and the
    /// score range. Order is preserved.
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self> {
        Self::with_score_range(samples, DEFAULT_SCORE_MIN, DEFAULT_SCORE_MAX)
    }

    pub fn with_score_range(
        samples: Vec<LabeledSample>,
        score_min: f64,
        score_max: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("no samples"));
        }
        let dim = samples[0].embedding.len();
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            validate_sample(s, dim, score_min, score_max)?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        let samples = samples.clone();
        Ok(SampleSet { samples, dim })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, idx: usize) -> &LabeledSample {
        &self.samples[idx]
    }

    pub fn find(&self, id: &str) -> Option<&LabeledSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn validate_sample(s: &LabeledSample, dim: usize, score_min: f64, score_max: f64) -> Result<()> {
    if s.embedding.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "sample embedding",
            expected: dim,
            actual: s.embedding.len(),
        });
    }
    if !s.embedding.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sample {:?} has a non-finite embedding entry",
            s.id
        )));
    }
    if !s.score.is_finite() || s.score < score_min || s.score > score_max {
        return Err(Error::ScoreOutOfRange {
            score: s.score,
            min: score_min,
            max: score_max,
        });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    system: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mos: Option<f64>,
    emb: Vec<f64>,
}

/// Parses a labeled NDJSON sample file. Every record must carry `mos`.
pub fn parse_samples(path: impl AsRef<Path>) -> Result<SampleSet> {
    let file = File::open(path)?;
    parse_samples_from(BufReader::new(file))
}

pub fn parse_samples_from(reader: impl Read) -> Result<SampleSet> {
    let mut samples = Vec::new();
    for (record, line_no) in read_records(reader)? {
        let mos = record.mos.ok_or_else(|| Error::Parse {
            line: line_no,
            message: "missing mos".into(),
        })?;
        samples.push(LabeledSample {
            id: record.id,
            system_id: record.system,
            embedding: record.emb,
            score: mos,
        });
    }
    // Re-check with line context so failures point at the offending record.
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples"));
    }
    let dim = samples[0].embedding.len();
    let mut seen = std::collections::HashSet::new();
    for (i, s) in samples.iter().enumerate() {
        validate_sample(s, dim, DEFAULT_SCORE_MIN, DEFAULT_SCORE_MAX).map_err(|e| {
            Error::Parse {
                line: i + 1,
                message: e.to_string(),
            }
        })?;
        if !seen.insert(s.id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                message: Error::DuplicateId(s.id.clone()).to_string(),
            });
        }
    }
    Ok(SampleSet { samples, dim })
}

/// A prediction-time input: `mos` may be absent.
#[derive(Debug, Clone)]
pub struct QuerySample {
    pub id: String,
    pub system_id: String,
    pub embedding: Vec<f64>,
    pub score: Option<f64>,
}

pub fn parse_queries(path: impl AsRef<Path>) -> Result<Vec<QuerySample>> {
    let file = File::open(path)?;
    parse_queries_from(BufReader::new(file))
}

pub fn parse_queries_from(reader: impl Read) -> Result<Vec<QuerySample>> {
    let mut queries = Vec::new();
    for (record, line_no) in read_records(reader)? {
        if record.emb.is_empty() || !record.emb.iter().all(|v| v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: "embedding must be non-empty and finite".into(),
            });
        }
        queries.push(QuerySample {
            id: record.id,
            system_id: record.system,
            embedding: record.emb,
            score: record.mos,
        });
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("no samples"));
    }
    let dim = queries[0].embedding.len();
    for (i, q) in queries.iter().enumerate() {
        if q.embedding.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                message: format!(
                    "dimension mismatch: expected {dim}, got {}",
                    q.embedding.len()
                ),
            });
        }
    }
    Ok(queries)
}

fn read_records(reader: impl Read) -> Result<Vec<(SampleRecord, usize)>> {
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push((record, line_no));
    }
    Ok(records)
}

/// Writes a sample set as NDJSON. `parse_samples(write_samples(set)) == set`,
/// scores and embeddings included, to the bit.
pub fn write_samples(path: impl AsRef<Path>, set: &SampleSet) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_samples_to(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn write_samples_to(writer: &mut impl Write, set: &SampleSet) -> Result<()> {
    for s in set.samples() {
        let record = SampleRecord {
            id: s.id.clone(),
            system: s.system_id.clone(),
            mos: Some(s.score),
            emb: s.embedding.clone(),
        };
        serde_json::to_writer(&mut *writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Seeded shuffle followed by contiguous cuts. Train and dev sizes are
/// floored; the test partition takes the remainder.
pub fn split(
    set: &SampleSet,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(SampleSet, SampleSet, SampleSet)> {
    let (r_train, r_dev, r_test) = ratios;
    if r_train <= 0.0 || r_dev <= 0.0 || r_test <= 0.0 {
        return Err(Error::InvalidConfig("split ratios must be positive".into()));
    }
    if ((r_train + r_dev + r_test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must sum to 1, got {}",
            r_train + r_dev + r_test
        )));
    }
    let n = set.len();
    if n < 3 {
        return Err(Error::InvalidConfig(format!(
            "cannot split {n} samples into 3 partitions"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from_u64(seed);
    rng.shuffle(&mut order);

    let n_train = (n as f64 * r_train).floor() as usize;
    let n_dev = (n as f64 * r_dev).floor() as usize;
    let take = |idx: &[usize]| -> SampleSet {
        SampleSet {
            samples: idx.iter().map(|&i| set.samples[i].clone()).collect(),
            dim: set.dim,
        }
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_dev]),
        take(&order[n_train + n_dev..]),
    ))
}

/// A constant embedding offset plus a score offset applied after generation.
#[derive(Debug, Clone)]
pub struct DomainShift {
    pub embedding_offset: Vec<f64>,
    pub score_offset: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_systems: usize,
    pub utterances_per_system: usize,
    pub noise_sigma: f64,
    pub domain_shift: Option<DomainShift>,
    pub seed: u64,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_systems == 0 || self.utterances_per_system == 0 {
            return Err(Error::InvalidConfig(
                "dim, n_systems, and utterances_per_system must be positive".into(),
            ));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if let Some(shift) = &self.domain_shift {
            if shift.embedding_offset.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    context: "domain shift offset",
                    expected: self.dim,
                    actual: shift.embedding_offset.len(),
                });
            }
        }
        Ok(())
    }
}

/// Standard deviation of the per-utterance score jitter around the system's
/// latent quality.
const SCORE_NOISE_SIGMA: f64 = 0.2;

/// Desk-scale stand-in for embeddings from a speech model. Each system gets
/// a latent quality drawn from a long-tailed Beta(2,5) distribution scaled
/// onto `[1, 5]` and its own base direction, so embeddings carry system
/// identity the way speech-model representations do. Utterance embeddings
/// sit at `direction * quality` plus isotropic Gaussian noise, and scores
/// jitter around the quality.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);

    let mut samples = Vec::with_capacity(cfg.n_systems * cfg.utterances_per_system);
    for sys in 0..cfg.n_systems {
        let mut direction: Vec<f64> = (0..cfg.dim).map(|_| rng.gaussian()).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in direction.iter_mut() {
                *v /= norm;
            }
        } else {
            direction[0] = 1.0;
        }
        let quality = DEFAULT_SCORE_MIN + (DEFAULT_SCORE_MAX - DEFAULT_SCORE_MIN) * rng.beta_2_5();
        let system_id = format!("sys{sys:03}");
        for utt in 0..cfg.utterances_per_system {
            let mut embedding: Vec<f64> = direction
                .iter()
                .map(|d| d * quality + cfg.noise_sigma * rng.gaussian())
                .collect();
            let mut score = (quality + SCORE_NOISE_SIGMA * rng.gaussian())
                .clamp(DEFAULT_SCORE_MIN, DEFAULT_SCORE_MAX);
            if let Some(shift) = &cfg.domain_shift {
                for (e, o) in embedding.iter_mut().zip(&shift.embedding_offset) {
                    *e += o;
                }
                score = (score + shift.score_offset).clamp(DEFAULT_SCORE_MIN, DEFAULT_SCORE_MAX);
            }
            samples.push(LabeledSample {
                id: format!("{system_id}_utt{utt:04}"),
                system_id: system_id.clone(),
                embedding,
                score,
            });
        }
    }
    SampleSet::new(samples)
}
