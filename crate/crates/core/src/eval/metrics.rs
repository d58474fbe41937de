use serde::{Deserialize, Serialize};

use crate::toydata::SourceTag;
use crate::{Error, Result};

/// A detector score with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    /// Fake probability in `[0, 1]`.
    pub score: f64,
    /// 1 = fake, 0 = real.
    pub label: u8,
    pub source: SourceTag,
    pub augment_desc: String,
}

impl ScoredSample {
    pub fn new(score: f64, label: u8, source: SourceTag) -> Self {
        Self {
            score,
            label,
            source,
            augment_desc: String::new(),
        }
    }
}

/// `0.5 * (TP/P + TN/N)` with "predicted fake" meaning `score > threshold`.
pub fn balanced_accuracy(samples: &[ScoredSample], threshold: f64) -> Result<f64> {
    let (mut pos, mut neg, mut tp, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for s in samples {
        if !s.score.is_finite() {
            return Err(Error::Numeric(format!("non-finite score {}", s.score)));
        }
        let predicted_fake = s.score > threshold;
        if s.label == 1 {
            pos += 1;
            tp += predicted_fake as usize;
        } else {
            neg += 1;
            tn += !predicted_fake as usize;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "balanced accuracy needs both classes (fake {pos}, real {neg})"
        )));
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Ranked-summation average precision. Ties keep the input order (stable
/// sort), so AP is tie-sensitive by design.
pub fn average_precision(samples: &[ScoredSample]) -> Result<f64> {
    let positives = samples.iter().filter(|s| s.label == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one fake".into(),
        ));
    }
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {}", s.score)));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].score.total_cmp(&samples[a].score));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if samples[i].label == 1 {
            hits += 1;
            ap += (hits as f64 / (rank + 1) as f64) / positives as f64;
        }
    }
    Ok(ap)
}

pub fn mean_score(samples: &[ScoredSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("mean score of an empty set".into()));
    }
    Ok(samples.iter().map(|s| s.score).sum::<f64>() / samples.len() as f64)
}
