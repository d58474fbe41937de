use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::io::write_bytes;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "run_id,stage,split,generator_tag,metric,value,seed,param";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bacc,
    Ap,
    Loss,
    Lperc,
    ScoreMean,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Bacc => "bacc",
            Metric::Ap => "ap",
            Metric::Loss => "loss",
            Metric::Lperc => "lperc",
            Metric::ScoreMean => "score_mean",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "bacc" => Metric::Bacc,
            "ap" => Metric::Ap,
            "loss" => Metric::Loss,
            "lperc" => Metric::Lperc,
            "score_mean" => Metric::ScoreMean,
            _ => return Err(Error::Format(format!("unknown metric `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub stage: String,
    pub split: String,
    pub generator_tag: String,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
    pub param: String,
}

/// The fields shared by every row a stage emits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowContext {
    pub run_id: String,
    pub stage: String,
    pub seed: u64,
}

impl RowContext {
    pub fn row(
        &self,
        split: &str,
        generator_tag: &str,
        metric: Metric,
        value: f64,
        param: &str,
    ) -> MetricRow {
        MetricRow {
            run_id: self.run_id.clone(),
            stage: self.stage.clone(),
            split: split.into(),
            generator_tag: generator_tag.into(),
            metric,
            value,
            seed: self.seed,
            param: param.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

fn check_field(s: &str) -> Result<()> {
    if s.contains([',', '\n', '\r', '"']) {
        return Err(Error::Format(format!(
            "report field `{s}` contains a CSV metacharacter"
        )));
    }
    Ok(())
}

impl MetricsReport {
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if !row.value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} {} is {}",
                row.split,
                row.metric.as_str(),
                row.value
            )));
        }
        for f in [
            &row.run_id,
            &row.stage,
            &row.split,
            &row.generator_tag,
            &row.param,
        ] {
            check_field(f)?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: MetricsReport) -> Result<()> {
        other.rows.into_iter().try_for_each(|r| self.push(r))
    }

    /// First row matching `(split, generator_tag, metric, param)`.
    pub fn find(
        &self,
        split: &str,
        generator_tag: &str,
        metric: Metric,
        param: &str,
    ) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.split == split
                    && r.generator_tag == generator_tag
                    && r.metric == metric
                    && r.param == param
            })
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.run_id,
                r.stage,
                r.split,
                r.generator_tag,
                r.metric.as_str(),
                r.value,
                r.seed,
                r.param
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Format("metrics CSV header mismatch".into()));
        }
        let mut report = Self::default();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| Error::Format(format!("metrics CSV line {}: {what}", n + 2));
            if f.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            report.push(MetricRow {
                run_id: f[0].into(),
                stage: f[1].into(),
                split: f[2].into(),
                generator_tag: f[3].into(),
                metric: Metric::parse(f[4])?,
                value: f[5].parse().map_err(|_| bad("bad value"))?,
                seed: f[6].parse().map_err(|_| bad("bad seed"))?,
                param: f[7].into(),
            })?;
        }
        Ok(report)
    }

    /// Writes `path` as CSV and a JSON-lines mirror next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_csv().as_bytes())?;
        write_bytes(&path.with_extension("jsonl"), self.to_jsonl()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
