//! The fusing network and the end-to-end prediction pipeline.
//!
//! Two small nets sit on top of the frozen decoder and datastore. The k-net
//! maps the neighbor distance distribution to a probability over retrieval
//! scopes 1..K, which turns the per-scope retrieved scores into one retrieved
//! score. The lambda-net maps distances and decoder confidences to a pair of
//! fusion weights over the parametric and retrieved scores. A variant that
//! skips the parametric path entirely reports the retrieved score alone.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataio::SampleSet;
use crate::datastore::{Datastore, NeighborHit};
use crate::decoder::{confidence_features, Decoder, Stage1Config, TrainReport};
use crate::error::{Error, Result};
use crate::nn::{
    softmax, Activation, Adam, DenseLayer, GradientSet, MlpModel, OptimizerConfig, Tape,
};
use crate::retrieval::{retrieval_profile, RetrievalProfile};
use crate::rng::Rng;

/// Number of top confidences fed to the lambda-net, in addition to the two
/// looked-up bin confidences.
pub const TOP_CONFIDENCES: usize = 8;

/// The two trained fusing nets plus the retrieval bound K they were built
/// for. k-net: K -> hidden -> K logits. lambda-net: K+10 -> hidden -> 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusingNets {
    #[serde(rename = "K")]
    pub k: usize,
    pub k_net: MlpModel,
    pub lambda_net: MlpModel,
}

impl FusingNets {
    pub fn init(k: usize, hidden_dim: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        let k_net = MlpModel::new(vec![
            DenseLayer::glorot(k, hidden_dim, Activation::Relu, rng)?,
            DenseLayer::glorot(hidden_dim, k, Activation::Identity, rng)?,
        ])?;
        let lambda_net = MlpModel::new(vec![
            DenseLayer::glorot(k + TOP_CONFIDENCES + 2, hidden_dim, Activation::Relu, rng)?,
            DenseLayer::glorot(hidden_dim, 2, Activation::Identity, rng)?,
        ])?;
        Ok(FusingNets {
            k,
            k_net,
            lambda_net,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.k_net.in_dim() != self.k || self.k_net.out_dim() != self.k {
            return Err(Error::DimensionMismatch {
                context: "k-net shape",
                expected: self.k,
                actual: self.k_net.in_dim(),
            });
        }
        if self.lambda_net.in_dim() != self.k + TOP_CONFIDENCES + 2
            || self.lambda_net.out_dim() != 2
        {
            return Err(Error::DimensionMismatch {
                context: "lambda-net shape",
                expected: self.k + TOP_CONFIDENCES + 2,
                actual: self.lambda_net.in_dim(),
            });
        }
        Ok(())
    }

    /// Probability over retrieval scopes, from the distance distribution.
    pub fn scope_weights(&self, distances: &[f64]) -> Result<Vec<f64>> {
        if distances.len() != self.k {
            return Err(Error::DimensionMismatch {
                context: "k-net input",
                expected: self.k,
                actual: distances.len(),
            });
        }
        softmax(&self.k_net.forward(distances)?)
    }

    /// Fusion weights `(w_p, w_r)` from distances and confidences. The input
    /// is the concatenation [distances; top confidences; c(S_r); c(S_p)].
    pub fn path_weights(
        &self,
        distances: &[f64],
        top_confidences: &[f64],
        c_retrieved: f64,
        c_regressed: f64,
    ) -> Result<(f64, f64)> {
        if distances.len() != self.k {
            return Err(Error::DimensionMismatch {
                context: "lambda-net distances",
                expected: self.k,
                actual: distances.len(),
            });
        }
        if top_confidences.len() != TOP_CONFIDENCES {
            return Err(Error::DimensionMismatch {
                context: "lambda-net confidences",
                expected: TOP_CONFIDENCES,
                actual: top_confidences.len(),
            });
        }
        let mut input = Vec::with_capacity(self.k + TOP_CONFIDENCES + 2);
        input.extend_from_slice(distances);
        input.extend_from_slice(top_confidences);
        input.push(c_retrieved);
        input.push(c_regressed);
        let w = softmax(&self.lambda_net.forward(&input)?)?;
        Ok((w[0], w[1]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fusing nets serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let nets: FusingNets = serde_json::from_str(json)?;
        nets.validate()?;
        Ok(nets)
    }
}

/// Weighted average of the per-scope retrieved scores.
pub fn aggregate_retrieved(scope_weights: &[f64], profile: &RetrievalProfile) -> Result<f64> {
    if scope_weights.len() != profile.scores().len() {
        return Err(Error::DimensionMismatch {
            context: "retrieved-score aggregation",
            expected: profile.scores().len(),
            actual: scope_weights.len(),
        });
    }
    Ok(scope_weights
        .iter()
        .zip(profile.scores())
        .map(|(p, s)| p * s)
        .sum())
}

/// Convex fusion of the two path scores.
pub fn fuse_scores(w_p: f64, w_r: f64, s_p: f64, s_r: f64) -> f64 {
    w_p * s_p + w_r * s_r
}

/// Everything the fusion computed for one utterance, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub scope_weights: Vec<f64>,
    pub s_r: f64,
    pub w_p: f64,
    pub w_r: f64,
    pub s: f64,
    /// Parametric score; NaN when the parametric path did not run.
    pub s_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub system_id: String,
    pub score: f64,
    pub parts: FusionOutput,
}

/// Full pipeline: decoder, neighbor search, scope weighting, confidence
/// lookup, and fusion.
pub fn predict(
    decoder: &Decoder,
    nets: &FusingNets,
    store: &Datastore,
    id: &str,
    system_id: &str,
    embedding: &[f64],
) -> Result<Prediction> {
    let out = decoder.forward(embedding)?;
    let hits = store.search(embedding, nets.k)?;
    let profile = retrieval_profile(&hits, nets.k)?;
    let scope_weights = nets.scope_weights(profile.distances())?;
    let s_r = aggregate_retrieved(&scope_weights, &profile)?;
    let (top, c_retrieved, c_regressed) = confidence_features(&out, s_r, out.score, &decoder.bins);
    let (w_p, w_r) = nets.path_weights(profile.distances(), &top, c_retrieved, c_regressed)?;
    let s = fuse_scores(w_p, w_r, out.score, s_r);
    Ok(Prediction {
        id: id.to_string(),
        system_id: system_id.to_string(),
        score: s,
        parts: FusionOutput {
            scope_weights,
            s_r,
            w_p,
            w_r,
            s,
            s_p: out.score,
        },
    })
}

/// Non-parametric variant: the scope-weighted retrieved score alone. The
/// lambda-net and decoder are bypassed.
pub fn predict_np(
    nets: &FusingNets,
    store: &Datastore,
    id: &str,
    system_id: &str,
    embedding: &[f64],
) -> Result<Prediction> {
    let hits = store.search(embedding, nets.k)?;
    let profile = retrieval_profile(&hits, nets.k)?;
    let scope_weights = nets.scope_weights(profile.distances())?;
    let s_r = aggregate_retrieved(&scope_weights, &profile)?;
    Ok(Prediction {
        id: id.to_string(),
        system_id: system_id.to_string(),
        score: s_r,
        parts: FusionOutput {
            scope_weights,
            s_r,
            w_p: 0.0,
            w_r: 1.0,
            s: s_r,
            s_p: f64::NAN,
        },
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Config {
    pub k: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            k: 60,
            hidden_dim: 32,
            learning_rate: 1e-4,
            max_epochs: 1000,
            patience: 20,
            batch_size: 4,
            grad_accum: 4,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn from_stage1(k: usize, s1: &Stage1Config) -> Self {
        Stage2Config {
            k,
            learning_rate: s1.learning_rate,
            max_epochs: s1.max_epochs,
            patience: s1.patience,
            batch_size: s1.batch_size,
            grad_accum: s1.grad_accum,
            seed: s1.seed.wrapping_add(1),
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.hidden_dim == 0
            || self.batch_size == 0
            || self.grad_accum == 0
            || self.max_epochs == 0
            || self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
        {
            return Err(Error::InvalidConfig(
                "stage-2 config fields must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen per-sample inputs to the fusing nets. The decoder and datastore do
/// not change during stage 2, so these are computed once per sample.
#[derive(Debug, Clone)]
pub struct FusionExample {
    pub distances: Vec<f64>,
    pub retrieved_scores: Vec<f64>,
    pub top_confidences: Vec<f64>,
    pub confidences: Vec<f64>,
    pub c_regressed: f64,
    pub s_p: f64,
    pub target: f64,
}

impl FusionExample {
    /// Runs the frozen decoder and datastore for one labeled embedding.
    /// `exclude_id` drops the sample's own datastore entry from retrieval.
    pub fn prepare(
        decoder: &Decoder,
        store: &Datastore,
        k: usize,
        embedding: &[f64],
        target: f64,
        exclude_id: Option<&str>,
    ) -> Result<Self> {
        let out = decoder.forward(embedding)?;
        let hits = search_excluding(store, embedding, k, exclude_id)?;
        let profile = retrieval_profile(&hits, k)?;
        let mut top = out.confidences.clone();
        top.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        top.resize(TOP_CONFIDENCES, 0.0);
        let c_regressed = out.confidences[decoder.bins.bin_of_clamped(out.score)];
        Ok(FusionExample {
            distances: profile.distances().to_vec(),
            retrieved_scores: profile.scores().to_vec(),
            top_confidences: top,
            confidences: out.confidences,
            c_regressed,
            s_p: out.score,
            target,
        })
    }
}

/// Search that drops the query's own datastore entry, matched by sample id.
/// Keeps a training utterance from retrieving its own label.
fn search_excluding(
    store: &Datastore,
    query: &[f64],
    k: usize,
    exclude_id: Option<&str>,
) -> Result<Vec<NeighborHit>> {
    match exclude_id {
        None => store.search(query, k),
        Some(id) => {
            let mut hits = store.search(query, k + 1)?;
            hits.retain(|h| store.id(h.index) != id);
            hits.truncate(k);
            if hits.is_empty() {
                return Err(Error::EmptyInput("search after self-exclusion"));
            }
            Ok(hits)
        }
    }
}

/// Fused squared error for one frozen example under the current nets,
/// through eager forwards only. Used for dev evaluation and as the
/// reference path for gradient checks.
pub fn fused_example_loss(
    nets: &FusingNets,
    ex: &FusionExample,
    bins: &crate::decoder::BinScheme,
) -> Result<f64> {
    let p = nets.scope_weights(&ex.distances)?;
    let s_r: f64 = p
        .iter()
        .zip(&ex.retrieved_scores)
        .map(|(pi, si)| pi * si)
        .sum();
    let c_retrieved = ex.confidences[bins.bin_of_clamped(s_r)];
    let (w_p, w_r) = nets.path_weights(
        &ex.distances,
        &ex.top_confidences,
        c_retrieved,
        ex.c_regressed,
    )?;
    let s = fuse_scores(w_p, w_r, ex.s_p, s_r);
    Ok(crate::nn::mse_loss(s, ex.target))
}

/// Reverse-mode gradients of the fused squared error with respect to both
/// nets' parameters. Everything derived from the decoder and datastore is a
/// constant of the graph.
pub fn fused_example_gradients(
    nets: &FusingNets,
    ex: &FusionExample,
    bins: &crate::decoder::BinScheme,
) -> Result<(GradientSet, GradientSet)> {
    let mut tape = Tape::new();
    let mk = tape.register(&nets.k_net);
    let ml = tape.register(&nets.lambda_net);
    example_backward(&mut tape, mk, ml, ex, bins)?;
    Ok((tape.gradients(mk), tape.gradients(ml)))
}

/// One fused-loss graph on the tape; gradients flow into both nets while all
/// decoder- and datastore-derived quantities stay constant.
fn example_backward(
    tape: &mut Tape,
    m_knet: crate::nn::ModelRef,
    m_lambda: crate::nn::ModelRef,
    ex: &FusionExample,
    bins: &crate::decoder::BinScheme,
) -> Result<f64> {
    let d = tape.constant(ex.distances.clone());
    let logits = tape.model_forward(m_knet, d)?;
    let p = tape.softmax(logits)?;
    let scores = tape.constant(ex.retrieved_scores.clone());
    let s_r = tape.dot(p, scores)?;

    // The bin lookup is piecewise constant in s_r, so it enters the graph as
    // a constant taken at the current value.
    let s_r_value = tape.value(s_r)[0];
    let c_retrieved = ex.confidences[bins.bin_of_clamped(s_r_value)];

    let d2 = tape.constant(ex.distances.clone());
    let top = tape.constant(ex.top_confidences.clone());
    let tail = tape.constant(vec![c_retrieved, ex.c_regressed]);
    let lambda_in = tape.concat(&[d2, top, tail]);
    let lambda_logits = tape.model_forward(m_lambda, lambda_in)?;
    let w = tape.softmax(lambda_logits)?;

    let s_p = tape.constant(vec![ex.s_p]);
    let paths = tape.concat(&[s_p, s_r]);
    let s = tape.dot(w, paths)?;
    let loss = tape.squared_error(s, ex.target)?;
    tape.backward(loss)?;
    Ok(tape.value(loss)[0])
}

/// Trains both fusing nets jointly against the squared error of the fused
/// score, with the decoder and datastore frozen. Training retrievals exclude
/// the sample's own datastore entry (matched by id); dev retrievals do not.
pub fn train_stage2(
    train: &SampleSet,
    dev: &SampleSet,
    decoder: &Decoder,
    store: &Datastore,
    cfg: &Stage2Config,
) -> Result<(FusingNets, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("stage-2 train set"));
    }
    if dev.is_empty() {
        return Err(Error::EmptyInput("stage-2 dev set"));
    }
    if store.dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            context: "stage-2 datastore",
            expected: train.dim(),
            actual: store.dim(),
        });
    }

    let train_examples: Vec<FusionExample> = train
        .samples()
        .iter()
        .map(|s| FusionExample::prepare(decoder, store, cfg.k, &s.embedding, s.score, Some(&s.id)))
        .collect::<Result<_>>()?;
    let dev_examples: Vec<FusionExample> = dev
        .samples()
        .iter()
        .map(|s| FusionExample::prepare(decoder, store, cfg.k, &s.embedding, s.score, None))
        .collect::<Result<_>>()?;

    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut nets = FusingNets::init(cfg.k, cfg.hidden_dim, &mut rng)?;

    let dev_loss = |nets: &FusingNets| -> Result<f64> {
        let mut total = 0.0;
        for ex in &dev_examples {
            total += fused_example_loss(nets, ex, &decoder.bins)?;
        }
        Ok(total / dev_examples.len() as f64)
    };

    let mut adam_k = Adam::new(
        OptimizerConfig::with_learning_rate(cfg.learning_rate),
        &nets.k_net,
    );
    let mut adam_l = Adam::new(
        OptimizerConfig::with_learning_rate(cfg.learning_rate),
        &nets.lambda_net,
    );

    let mut best_loss = dev_loss(&nets)?;
    let mut best = nets.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_examples.len()).collect();
    let mut epochs_run = 0;
    let update_every = cfg.batch_size * cfg.grad_accum;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        rng.shuffle(&mut order);

        let mut g_k = GradientSet::zeros_like(&nets.k_net);
        let mut g_l = GradientSet::zeros_like(&nets.lambda_net);
        let mut pending = 0usize;

        for (pos, &idx) in order.iter().enumerate() {
            let (gk, gl) = fused_example_gradients(&nets, &train_examples[idx], &decoder.bins)?;
            g_k.accumulate(&gk);
            g_l.accumulate(&gl);
            pending += 1;

            if pending == update_every || pos + 1 == order.len() {
                let scale = 1.0 / pending as f64;
                g_k.scale(scale);
                g_l.scale(scale);
                adam_k.step(&mut nets.k_net, &g_k)?;
                adam_l.step(&mut nets.lambda_net, &g_l)?;
                g_k = GradientSet::zeros_like(&nets.k_net);
                g_l = GradientSet::zeros_like(&nets.lambda_net);
                pending = 0;
            }
        }

        let loss = dev_loss(&nets)?;
        if loss < best_loss {
            best_loss = loss;
            best = nets.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }

    Ok((
        best,
        TrainReport {
            epochs_run,
            best_epoch,
            best_dev_loss: best_loss,
        },
    ))
}

/// NDJSON record for one prediction:
/// `{"id","system","score","s_p","s_r","w_p","w_r"}`. `s_p` is null for
/// non-parametric predictions.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub system: String,
    pub score: f64,
    pub s_p: Option<f64>,
    pub s_r: f64,
    pub w_p: f64,
    pub w_r: f64,
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        PredictionRecord {
            id: p.id.clone(),
            system: p.system_id.clone(),
            score: p.score,
            s_p: p.parts.s_p.is_finite().then_some(p.parts.s_p),
            s_r: p.parts.s_r,
            w_p: p.parts.w_p,
            w_r: p.parts.w_r,
        }
    }
}

pub fn write_predictions(writer: &mut impl Write, preds: &[Prediction]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut *writer, &PredictionRecord::from(p))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(reader: impl Read) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("no predictions"));
    }
    Ok(records)
}
