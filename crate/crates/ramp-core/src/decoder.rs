//! The parametric decoder: a shared trunk feeding a regression head (the
//! score) and a classification head (a confidence distribution over fixed
//! score bins), trained with a joint squared-error plus cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::dataio::SampleSet;
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_loss, mse_loss, softmax, Activation, Adam, DenseLayer, GradientSet, MlpModel,
    OptimizerConfig, Tape,
};
use crate::rng::Rng;

/// Fixed-width score bins over the score range. The default MOS range
/// `[1, 5]` with width 0.25 yields 16 bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinScheme {
    pub score_min: f64,
    pub score_max: f64,
    pub bin_width: f64,
    pub n_bins: usize,
}

impl BinScheme {
    pub fn new(score_min: f64, score_max: f64, bin_width: f64) -> Result<Self> {
        if bin_width.is_nan()
            || bin_width <= 0.0
            || score_min.is_nan()
            || score_max.is_nan()
            || score_max <= score_min
        {
            return Err(Error::InvalidConfig(
                "bin scheme needs score_max > score_min and bin_width > 0".into(),
            ));
        }
        let n_bins = ((score_max - score_min) / bin_width).ceil() as usize;
        if n_bins < 2 {
            return Err(Error::InvalidConfig(format!(
                "bin scheme yields {n_bins} bins, need at least 2"
            )));
        }
        Ok(BinScheme {
            score_min,
            score_max,
            bin_width,
            n_bins,
        })
    }

    /// Bin index of an in-range score; the top edge maps into the last bin.
    pub fn bin_of(&self, score: f64) -> Result<usize> {
        if !score.is_finite() || score < self.score_min || score > self.score_max {
            return Err(Error::ScoreOutOfRange {
                score,
                min: self.score_min,
                max: self.score_max,
            });
        }
        let raw = ((score - self.score_min) / self.bin_width).floor() as usize;
        Ok(raw.min(self.n_bins - 1))
    }

    /// Bin index after clamping into range; total, for predicted scores that
    /// may fall outside it.
    pub fn bin_of_clamped(&self, score: f64) -> usize {
        let clamped = score.clamp(self.score_min, self.score_max);
        self.bin_of(clamped).expect("clamped score is in range")
    }
}

impl Default for BinScheme {
    fn default() -> Self {
        BinScheme::new(1.0, 5.0, 0.25).expect("default bin scheme is valid")
    }
}

/// Decoder output: the regression score plus the confidence distribution
/// over score bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub score: f64,
    pub confidences: Vec<f64>,
}

/// Trunk shared by both heads; heads are single affine maps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decoder {
    pub trunk: MlpModel,
    pub reg_head: MlpModel,
    pub cls_head: MlpModel,
    #[serde(rename = "bin_scheme")]
    pub bins: BinScheme,
}

impl Decoder {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        bins: BinScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Decoder {
            trunk: MlpModel::new(vec![DenseLayer::glorot(
                input_dim,
                hidden_dim,
                Activation::Relu,
                rng,
            )?])?,
            reg_head: MlpModel::new(vec![DenseLayer::glorot(
                hidden_dim,
                1,
                Activation::Identity,
                rng,
            )?])?,
            cls_head: MlpModel::new(vec![DenseLayer::glorot(
                hidden_dim,
                bins.n_bins,
                Activation::Identity,
                rng,
            )?])?,
            bins,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    /// Shared trunk feeds both heads; classification logits are softmaxed
    /// into the confidence distribution.
    pub fn forward(&self, embedding: &[f64]) -> Result<DecoderOutput> {
        let hidden = self.trunk.forward(embedding)?;
        let score = self.reg_head.forward(&hidden)?[0];
        let logits = self.cls_head.forward(&hidden)?;
        Ok(DecoderOutput {
            score,
            confidences: softmax(&logits)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("decoder serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let decoder: Decoder = serde_json::from_str(json)?;
        let rebuilt = BinScheme::new(
            decoder.bins.score_min,
            decoder.bins.score_max,
            decoder.bins.bin_width,
        )?;
        if rebuilt.n_bins != decoder.bins.n_bins {
            return Err(Error::InvalidConfig(format!(
                "bin scheme declares {} bins but its range and width yield {}",
                decoder.bins.n_bins, rebuilt.n_bins
            )));
        }
        if decoder.cls_head.out_dim() != decoder.bins.n_bins {
            return Err(Error::DimensionMismatch {
                context: "decoder classification head",
                expected: decoder.bins.n_bins,
                actual: decoder.cls_head.out_dim(),
            });
        }
        Ok(decoder)
    }
}

/// Joint loss: squared error on the score plus `alpha` times the
/// cross-entropy of the target score's bin.
pub fn stage1_loss(
    out: &DecoderOutput,
    target_score: f64,
    bins: &BinScheme,
    alpha: f64,
) -> Result<f64> {
    let bin = bins.bin_of(target_score)?;
    Ok(mse_loss(out.score, target_score) + alpha * cross_entropy_loss(&out.confidences, bin)?)
}

/// Confidence features consumed by the fusing network: the eight largest
/// confidences in descending order, plus the confidences of the bins the
/// retrieved and regressed scores fall in (clamped into range first).
pub fn confidence_features(
    out: &DecoderOutput,
    retrieved_score: f64,
    regressed_score: f64,
    bins: &BinScheme,
) -> (Vec<f64>, f64, f64) {
    let mut sorted = out.confidences.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sorted.resize(8, 0.0);
    let c_retrieved = out.confidences[bins.bin_of_clamped(retrieved_score)];
    let c_regressed = out.confidences[bins.bin_of_clamped(regressed_score)];
    (sorted, c_retrieved, c_regressed)
}

#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub alpha: f64,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Number of micro-batches whose gradients are averaged per update.
    pub grad_accum: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            alpha: 1.0,
            hidden_dim: 64,
            learning_rate: 1e-4,
            max_epochs: 1000,
            patience: 20,
            batch_size: 4,
            grad_accum: 4,
            seed: 0,
        }
    }
}

impl Stage1Config {
    fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.hidden_dim == 0
            || self.batch_size == 0
            || self.grad_accum == 0
            || self.max_epochs == 0
            || self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
        {
            return Err(Error::InvalidConfig(
                "hidden_dim, batch_size, grad_accum, max_epochs, learning_rate must be positive"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Epoch accounting returned next to trained parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
}

/// Trains the decoder with seeded shuffling, gradient accumulation, and Adam.
/// Early-stops once the dev loss has not improved for `patience` consecutive
/// epochs and returns the best-dev checkpoint, which is never worse than the
/// initialization.
pub fn train_stage1(
    train: &SampleSet,
    dev: &SampleSet,
    bins: BinScheme,
    cfg: &Stage1Config,
) -> Result<(Decoder, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("stage-1 train set"));
    }
    if dev.is_empty() {
        return Err(Error::EmptyInput("stage-1 dev set"));
    }
    if dev.dim() != train.dim() {
        return Err(Error::DimensionMismatch {
            context: "stage-1 dev set",
            expected: train.dim(),
            actual: dev.dim(),
        });
    }

    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut decoder = Decoder::init(train.dim(), cfg.hidden_dim, bins, &mut rng)?;

    let dev_loss = |d: &Decoder| -> Result<f64> {
        let mut total = 0.0;
        for s in dev.samples() {
            total += stage1_loss(&d.forward(&s.embedding)?, s.score, &d.bins, cfg.alpha)?;
        }
        Ok(total / dev.len() as f64)
    };

    let mut adam_trunk = Adam::new(
        OptimizerConfig::with_learning_rate(cfg.learning_rate),
        &decoder.trunk,
    );
    let mut adam_reg = Adam::new(
        OptimizerConfig::with_learning_rate(cfg.learning_rate),
        &decoder.reg_head,
    );
    let mut adam_cls = Adam::new(
        OptimizerConfig::with_learning_rate(cfg.learning_rate),
        &decoder.cls_head,
    );

    let mut best_loss = dev_loss(&decoder)?;
    let mut best = decoder.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;
    let update_every = cfg.batch_size * cfg.grad_accum;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        rng.shuffle(&mut order);

        let mut g_trunk = GradientSet::zeros_like(&decoder.trunk);
        let mut g_reg = GradientSet::zeros_like(&decoder.reg_head);
        let mut g_cls = GradientSet::zeros_like(&decoder.cls_head);
        let mut pending = 0usize;

        for (pos, &idx) in order.iter().enumerate() {
            let sample = train.get(idx);
            let bin = decoder.bins.bin_of(sample.score)?;

            let mut tape = Tape::new();
            let mt = tape.register(&decoder.trunk);
            let mr = tape.register(&decoder.reg_head);
            let mc = tape.register(&decoder.cls_head);
            let x = tape.constant(sample.embedding.clone());
            let hidden = tape.model_forward(mt, x)?;
            let score = tape.model_forward(mr, hidden)?;
            let logits = tape.model_forward(mc, hidden)?;
            let probs = tape.softmax(logits)?;
            let l_reg = tape.squared_error(score, sample.score)?;
            let l_cls = tape.neg_log_prob(probs, bin)?;
            let l_cls = tape.scale(l_cls, cfg.alpha);
            let loss = tape.add(l_reg, l_cls)?;
            tape.backward(loss)?;

            g_trunk.accumulate(&tape.gradients(mt));
            g_reg.accumulate(&tape.gradients(mr));
            g_cls.accumulate(&tape.gradients(mc));
            pending += 1;

            if pending == update_every || pos + 1 == order.len() {
                let scale = 1.0 / pending as f64;
                g_trunk.scale(scale);
                g_reg.scale(scale);
                g_cls.scale(scale);
                adam_trunk.step(&mut decoder.trunk, &g_trunk)?;
                adam_reg.step(&mut decoder.reg_head, &g_reg)?;
                adam_cls.step(&mut decoder.cls_head, &g_cls)?;
                g_trunk = GradientSet::zeros_like(&decoder.trunk);
                g_reg = GradientSet::zeros_like(&decoder.reg_head);
                g_cls = GradientSet::zeros_like(&decoder.cls_head);
                pending = 0;
            }
        }

        let loss = dev_loss(&decoder)?;
        if loss < best_loss {
            best_loss = loss;
            best = decoder.clone();
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
