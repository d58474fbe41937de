use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

/// How many strided steps a plan lists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCount {
    /// `{t_s + i * stride : i = 0..=K}` clipped to `[1, T]`: K or K+1 steps.
    #[default]
    Inclusive,
    /// Exactly K steps, `i = 0..K`.
    Exact,
}

/// The sampling steps whose network calls receive gradient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStepPlan {
    pub total_steps: usize,
    pub k: usize,
    pub t_start: usize,
    steps: Vec<usize>,
}

impl TrainStepPlan {
    /// Ascending step indices.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn stride(&self) -> usize {
        self.total_steps / self.k.max(1)
    }

    /// A plan with no gradient-carrying steps.
    pub fn empty(total_steps: usize) -> Self {
        Self {
            total_steps,
            k: 0,
            t_start: 0,
            steps: Vec::new(),
        }
    }

    /// An arbitrary step set (used to test routing on non-strided plans).
    pub fn custom(total_steps: usize, mut steps: Vec<usize>) -> Result<Self> {
        steps.sort_unstable();
        steps.dedup();
        if let Some(&bad) = steps.iter().find(|&&s| s == 0 || s > total_steps) {
            return Err(Error::Config(format!(
                "plan step {bad} outside [1, {total_steps}]"
            )));
        }
        Ok(Self {
            total_steps,
            k: steps.len(),
            t_start: steps.first().copied().unwrap_or(0),
            steps,
        })
    }
}

/// Largest start step for which the first K strided steps fit in `[1, T]`.
pub fn max_start(total: usize, k: usize) -> usize {
    total - (k - 1) * (total / k)
}

/// Strided plan `t_s, t_s + floor(T/K), ...`. Without `t_start`, one is
/// drawn uniformly from the range where the first K steps fit.
pub fn make_train_steps(
    total: usize,
    k: usize,
    t_start: Option<usize>,
    count: StepCount,
    rng: &mut Rng,
) -> Result<TrainStepPlan> {
    if k == 0 || k > total {
        return Err(Error::Config(format!(
            "need 1 <= K <= T (K = {k}, T = {total})"
        )));
    }
    let hi = max_start(total, k);
    let ts = match t_start {
        Some(ts) if ts >= 1 && ts <= hi => ts,
        Some(ts) => return Err(Error::Config(format!(
            "t_s = {ts} puts plan steps outside [1, {total}] (K = {k}, stride {}; max t_s {hi})",
            total / k
        ))),
        None => rng.random_range(1..=hi),
    };
    let stride = total / k;
    let n = match count {
        StepCount::Inclusive => k + 1,
        StepCount::Exact => k,
    };
    let steps = (0..n)
        .map(|i| ts + i * stride)
        .filter(|&s| s <= total)
        .collect();
    Ok(TrainStepPlan {
        total_steps: total,
        k,
        t_start: ts,
        steps,
    })
}
