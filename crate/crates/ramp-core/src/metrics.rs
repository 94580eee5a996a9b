//! Evaluation harness: MSE plus Pearson, Spearman, and Kendall correlations
//! at the utterance level and over per-system means.
//!
//! Zero-variance inputs make a correlation undefined; those return 0 with a
//! flag instead of NaN so batch evaluation stays total.

use serde::{Deserialize, Serialize};

use crate::dataio::SampleSet;
use crate::error::{Error, Result};

/// A correlation value plus a degeneracy flag set when either input had zero
/// variance (the value is then 0 by convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub zero_variance: bool,
}

impl Correlation {
    fn defined(value: f64) -> Self {
        Correlation {
            value,
            zero_variance: false,
        }
    }

    fn degenerate() -> Self {
        Correlation {
            value: 0.0,
            zero_variance: true,
        }
    }
}

fn check_paired(pred: &[f64], truth: &[f64], min_len: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "metric inputs",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if pred.len() < min_len {
        return Err(Error::EmptyInput("metric inputs"));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_paired(pred, truth, 1)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Pearson linear correlation.
pub fn lcc(pred: &[f64], truth: &[f64]) -> Result<Correlation> {
    check_paired(pred, truth, 2)?;
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_t = truth.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let dp = p - mean_p;
        let dt = t - mean_t;
        cov += dp * dt;
        var_p += dp * dp;
        var_t += dt * dt;
    }
    if var_p == 0.0 || var_t == 0.0 {
        return Ok(Correlation::degenerate());
    }
    let r = cov / (var_p.sqrt() * var_t.sqrt());
    Ok(Correlation::defined(r.clamp(-1.0, 1.0)))
}

/// Fractional ranks: ties share the average of the ranks they span.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            out[idx] = avg;
        }
        i = j;
    }
    out
}

/// Spearman rank correlation: Pearson over fractional ranks.
pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<Correlation> {
    check_paired(pred, truth, 2)?;
    lcc(&ranks(pred), &ranks(truth))
}

/// Kendall tau-b, tie-corrected, via sort and merge-count rather than pair
/// enumeration.
pub fn ktau(pred: &[f64], truth: &[f64]) -> Result<Correlation> {
    check_paired(pred, truth, 2)?;
    let n = pred.len();
    let mut pairs: Vec<(f64, f64)> = pred.iter().copied().zip(truth.iter().copied()).collect();
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    });

    // Tied pairs within pred, and within (pred, truth) jointly.
    let mut tied_pred = 0u64;
    let mut tied_both = 0u64;
    let mut run = 1u64;
    let mut joint_run = 1u64;
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            run += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                joint_run += 1;
            } else {
                tied_both += joint_run * (joint_run - 1) / 2;
                joint_run = 1;
            }
        } else {
            tied_pred += run * (run - 1) / 2;
            run = 1;
            tied_both += joint_run * (joint_run - 1) / 2;
            joint_run = 1;
        }
    }
    tied_pred += run * (run - 1) / 2;
    tied_both += joint_run * (joint_run - 1) / 2;

    // Discordant pairs are exactly the swaps a merge sort needs to order the
    // truth column once the pred column is sorted.
    let mut keys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count_swaps(&mut keys);

    // Tied pairs within truth.
    let mut truth_sorted: Vec<f64> = truth.to_vec();
    truth_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut tied_truth = 0u64;
    run = 1;
    for i in 1..n {
        if truth_sorted[i] == truth_sorted[i - 1] {
            run += 1;
        } else {
            tied_truth += run * (run - 1) / 2;
            run = 1;
        }
    }
    tied_truth += run * (run - 1) / 2;

    let total = (n as u64 * (n as u64 - 1) / 2) as f64;
    let not_tied_in_pred = total - tied_pred as f64;
    let not_tied_in_truth = total - tied_truth as f64;
    if not_tied_in_pred == 0.0 || not_tied_in_truth == 0.0 {
        return Ok(Correlation::degenerate());
    }
    // concordant - discordant = total - tied_pred - tied_truth + tied_both
    //                           - 2 * swaps
    let c_minus_d =
        total - tied_pred as f64 - tied_truth as f64 + tied_both as f64 - 2.0 * swaps as f64;
    let value = c_minus_d / (not_tied_in_pred * not_tied_in_truth).sqrt();
    Ok(Correlation::defined(value.clamp(-1.0, 1.0)))
}

/// Bottom-up merge sort that counts inversions.
fn merge_count_swaps(values: &mut [f64]) -> u64 {
    let n = values.len();
    let mut swaps = 0u64;
    let mut buf = vec![0.0; n];
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut k) = (start, mid, start);
            while i < mid || j < end {
                if i < mid && (j >= end || values[i] <= values[j]) {
                    buf[k] = values[i];
                    i += 1;
                } else {
                    swaps += (mid - i) as u64;
                    buf[k] = values[j];
                    j += 1;
                }
                k += 1;
            }
            start = end;
        }
        values[..n].copy_from_slice(&buf[..n]);
        width *= 2;
    }
    swaps
}

/// Minimal evaluation input: a prediction id and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedScore {
    pub id: String,
    pub score: f64,
}

impl From<&crate::fusion::Prediction> for PredictedScore {
    fn from(p: &crate::fusion::Prediction) -> Self {
        PredictedScore {
            id: p.id.clone(),
            score: p.score,
        }
    }
}

/// Per-system means of predicted and true scores, sorted by system id.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMeans {
    pub system_id: String,
    pub pred_mean: f64,
    pub truth_mean: f64,
}

/// Averages predictions and truths per system. Every prediction id must
/// exist in the truth set; the truth sample supplies the system id.
pub fn system_aggregate(preds: &[PredictedScore], truths: &SampleSet) -> Result<Vec<SystemMeans>> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("system aggregation"));
    }
    let mut by_system: std::collections::BTreeMap<String, (f64, f64, usize)> =
        std::collections::BTreeMap::new();
    for p in preds {
        let truth = truths
            .find(&p.id)
            .ok_or_else(|| Error::UnknownId(p.id.clone()))?;
        let entry = by_system
            .entry(truth.system_id.clone())
            .or_insert((0.0, 0.0, 0));
        entry.0 += p.score;
        entry.1 += truth.score;
        entry.2 += 1;
    }
    Ok(by_system
        .into_iter()
        .map(|(system_id, (ps, ts, n))| SystemMeans {
            system_id,
            pred_mean: ps / n as f64,
            truth_mean: ts / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub mse: f64,
    pub lcc: f64,
    pub srcc: f64,
    pub ktau: f64,
}

/// The eight evaluation numbers: utterance-level over raw pairs,
/// system-level over per-system means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterance: MetricBlock,
    pub system: MetricBlock,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Fixed-width table in the conventional column order.
    pub fn table(&self) -> String {
        let header = format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "U_MSE", "U_LCC", "U_SRCC", "U_KTAU", "S_MSE", "S_LCC", "S_SRCC", "S_KTAU"
        );
        let row = format!(
            "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            self.utterance.mse,
            self.utterance.lcc,
            self.utterance.srcc,
            self.utterance.ktau,
            self.system.mse,
            self.system.lcc,
            self.system.srcc,
            self.system.ktau,
        );
        format!("{header}\n{row}")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization cannot fail")
    }
}

fn block(
    pred: &[f64],
    truth: &[f64],
    level: &str,
    warnings: &mut Vec<String>,
) -> Result<MetricBlock> {
    let mse = mse(pred, truth)?;
    let mut corr = |name: &str, c: Correlation| -> f64 {
        if c.zero_variance {
            warnings.push(format!(
                "{level} {name}: zero variance, correlation set to 0"
            ));
        }
        c.value
    };
    let lcc = corr("lcc", lcc(pred, truth)?);
    let srcc = corr("srcc", srcc(pred, truth)?);
    let ktau = corr("ktau", ktau(pred, truth)?);
    Ok(MetricBlock {
        mse,
        lcc,
        srcc,
        ktau,
    })
}

/// Computes all eight metrics for aligned predictions and truths.
pub fn evaluate(preds: &[PredictedScore], truths: &SampleSet) -> Result<EvalReport> {
    if preds.len() < 2 {
        return Err(Error::EmptyInput(
            "evaluation needs at least two predictions",
        ));
    }
    let mut pred_scores = Vec::with_capacity(preds.len());
    let mut truth_scores = Vec::with_capacity(preds.len());
    for p in preds {
        let truth = truths
            .find(&p.id)
            .ok_or_else(|| Error::UnknownId(p.id.clone()))?;
        pred_scores.push(p.score);
        truth_scores.push(truth.score);
    }
    let mut warnings = Vec::new();
    let utterance = block(&pred_scores, &truth_scores, "utterance", &mut warnings)?;

    let systems = system_aggregate(preds, truths)?;
    let sys_pred: Vec<f64> = systems.iter().map(|s| s.pred_mean).collect();
    let sys_truth: Vec<f64> = systems.iter().map(|s| s.truth_mean).collect();
    if systems.len() < 2 {
        warnings.push("system level: fewer than two systems, correlations set to 0".into());
        let sys_mse = mse(&sys_pred, &sys_truth)?;
        return Ok(EvalReport {
            utterance,
            system: MetricBlock {
                mse: sys_mse,
                lcc: 0.0,
                srcc: 0.0,
                ktau: 0.0,
            },
            warnings,
        });
    }
    let system = block(&sys_pred, &sys_truth, "system", &mut warnings)?;
    Ok(EvalReport {
        utterance,
        system,
        warnings,
    })
}
