use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "kind,step,epoch,loss,cls_loss,token_loss,lr,top1";

/// One optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub cls_loss: f64,
    /// Absent when the token term is switched off.
    pub token_loss: Option<f64>,
    pub lr: f64,
}

/// A CSV row: either a step or an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: String,
    pub step: u64,
    pub epoch: u64,
    pub loss: Option<f64>,
    pub cls_loss: Option<f64>,
    pub token_loss: Option<f64>,
    pub lr: Option<f64>,
    pub top1: Option<f64>,
}

impl From<&StepRecord> for MetricRecord {
    fn from(r: &StepRecord) -> Self {
        MetricRecord {
            kind: "step".into(),
            step: r.step,
            epoch: r.epoch,
            loss: Some(r.loss),
            cls_loss: Some(r.cls_loss),
            token_loss: r.token_loss,
            lr: Some(r.lr),
            top1: None,
        }
    }
}

/// Append-only record list with a non-decreasing step index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            let backwards = r.step < last.step || (r.kind == "step" && last.kind == "step" && r.step == last.step);
            if backwards {
                return Err(Error::contract(format!("metrics step {} after {}", r.step, last.step)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn push_step(&mut self, r: &StepRecord) -> Result<()> {
        self.push(r.into())
    }

    pub fn push_eval(&mut self, step: u64, epoch: u64, top1: f64) -> Result<()> {
        self.push(MetricRecord {
            kind: "eval".into(),
            step,
            epoch,
            loss: None,
            cls_loss: None,
            token_loss: None,
            lr: None,
            top1: Some(top1),
        })
    }

    /// Step losses in order.
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.kind == "step").filter_map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record(METRICS_HEADER.split(','))?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != METRICS_HEADER {
            return Err(Error::Format { offset: 0, detail: format!("metrics header `{}`", header.join(",")) });
        }
        let mut log = MetricsLog::new();
        for r in rd.deserialize() {
            log.push(r?)?;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
