use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{AccountingMode, StudentKind, TeacherKind};
use super::HarnessError;
use crate::accountant::{default_orders, rdp_to_dp, PrivacyLedger};
use crate::prompt::MapKind;

/// Rounds to `places` decimals for table-style output.
pub fn round_to(x: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    (x * scale).round() / scale
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One results row. ε is to 4 decimals and percentages to 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// `None` when accounting is off.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub alpha_star: Option<f64>,
    pub queries: usize,
    pub answered_queries: usize,
    pub answer_accuracy_pct: f64,
    pub threshold: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub accuracy_mean_pct: f64,
    pub accuracy_std_pct: f64,
    pub accuracies_pct: Vec<f64>,
    /// Student seed of each repeat.
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub num_teachers: usize,
    /// Mean accuracy of individual teachers on the queries they voted on.
    pub teacher_accuracy_mean_pct: f64,
    pub teacher_kind: TeacherKind,
    pub student_kind: StudentKind,
    pub map_kind: MapKind,
    pub masked: bool,
    pub rescale: [usize; 2],
    pub accounting: AccountingMode,
    pub ledger: PrivacyLedger,
    pub source_fingerprint: String,
    pub source_accuracy_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_axis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl ExperimentReport {
    /// Pretty JSON with keys in sorted order.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serialises");
        serde_json::to_string_pretty(&value).expect("value serialises")
    }

    /// Parses a report and checks it with [`ExperimentReport::audit`].
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let report: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("report: {e}")))?;
        report.audit()?;
        Ok(report)
    }

    /// Recomputes ε from the embedded ledger and checks the counts agree.
    pub fn audit(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::AuditFailed(m));
        if self.answered_queries > self.queries {
            return fail(format!("{} answered of {} queries", self.answered_queries, self.queries));
        }
        if self.ledger.threshold_checks != self.queries as u64 || self.ledger.answered != self.answered_queries as u64 {
            return fail("ledger counts differ from the reported query counts".into());
        }
        if self.accuracy_std_pct < 0.0 {
            return fail("negative standard deviation".into());
        }
        match (self.accounting.ledger_mode(), self.epsilon) {
            (None, None) => Ok(()),
            (Some(mode), Some(eps)) => {
                if mode != self.ledger.mode {
                    return fail("ledger mode differs from the accounting mode".into());
                }
                let budget = rdp_to_dp(&self.ledger, self.delta, &default_orders())?;
                let recomputed = round_to(budget.epsilon, 4);
                if recomputed != eps {
                    return fail(format!("epsilon {eps} but the ledger gives {recomputed}"));
                }
                Ok(())
            }
            _ => fail("epsilon presence disagrees with the accounting mode".into()),
        }
    }
}
