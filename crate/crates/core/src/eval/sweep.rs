use serde::{Deserialize, Serialize};

use super::metrics::{balanced_accuracy, ScoredSample};
use super::report::{Metric, MetricsReport, RowContext};
use crate::augment::{compress_blockdct, gaussian_blur, resize};
use crate::detector::DetectorNet;
use crate::tensor::Tensor;
use crate::toydata::SplitDataset;
use crate::{Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub blur: Vec<f64>,
    pub quality: Vec<u32>,
    pub scale: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            blur: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            quality: vec![95, 85, 75, 65],
            scale: vec![0.5, 0.75, 1.0, 1.25, 1.5],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PostOp {
    Blur(f64),
    Jpeg(u32),
    Resize(f64),
}

impl PostOp {
    pub fn apply<F: Real>(self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            PostOp::Blur(s) => gaussian_blur(x, s),
            PostOp::Jpeg(q) => compress_blockdct(x, q),
            PostOp::Resize(s) => resize(x, s),
        }
    }

    pub fn describe(self) -> String {
        match self {
            PostOp::Blur(s) => format!("blur={s}"),
            PostOp::Jpeg(q) => format!("jpeg={q}"),
            PostOp::Resize(s) => format!("resize={s}"),
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<PostOp> {
        let blur = self.blur.iter().map(|&s| PostOp::Blur(s));
        let jpeg = self.quality.iter().map(|&q| PostOp::Jpeg(q));
        let scale = self.scale.iter().map(|&s| PostOp::Resize(s));
        blur.chain(jpeg).chain(scale).collect()
    }
}

/// Score a whole dataset after `op`, using patch-averaged inference.
pub fn score_dataset<F: Real>(
    det: &DetectorNet<F>,
    data: &SplitDataset<F>,
    op: Option<PostOp>,
) -> Result<Vec<ScoredSample>> {
    let processed: Vec<Tensor<F>> = match op {
        None => data.items.iter().map(|i| i.pixels.clone()).collect(),
        Some(op) => crate::par::parallel_map(&data.items, |i| op.apply(&i.pixels))?,
    };
    let refs: Vec<&Tensor<F>> = processed.iter().collect();
    let scores = det.predict_many(&refs)?;
    let desc = op.map(PostOp::describe).unwrap_or_default();
    Ok(data
        .items
        .iter()
        .zip(scores)
        .map(|(i, s)| ScoredSample {
            score: s,
            label: i.label(),
            source: i.source,
            augment_desc: desc.clone(),
        })
        .collect())
}

/// One bAcc row per grid point, `param` naming the operator and strength.
pub fn robustness_sweep<F: Real>(
    det: &DetectorNet<F>,
    data: &SplitDataset<F>,
    grid: &SweepGrid,
    ctx: &RowContext,
    split: &str,
    generator_tag: &str,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for op in grid.points() {
        let scored = score_dataset(det, data, Some(op))?;
        let bacc = balanced_accuracy(&scored, 0.5)?;
        report.push(ctx.row(split, generator_tag, Metric::Bacc, bacc, &op.describe()))?;
    }
    Ok(report)
}
