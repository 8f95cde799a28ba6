use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_cd1,loss_cd2,loss_ce";

/// One optimizer step. Loss terms that the stage does not compute are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cd1: Option<f64>,
    pub loss_cd2: Option<f64>,
    pub loss_ce: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn push(&mut self, r: StepRecord) {
        debug_assert!(self.steps.last().is_none_or(|l| l.step < r.step));
        self.steps.push(r);
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.loss_total)
    }

    /// Appends `other`, which must continue this log.
    pub fn extend(&mut self, other: &MetricsLog) {
        self.steps.extend_from_slice(&other.steps);
        self.evals.extend_from_slice(&other.evals);
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step,
                r.lr,
                r.loss_total,
                field(r.loss_cd1),
                field(r.loss_cd2),
                field(r.loss_ce)
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{METRICS_HEADER}\n{}", self.csv_rows())
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from("epoch,step,accuracy\n");
        for e in &self.evals {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.step, e.accuracy);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}
