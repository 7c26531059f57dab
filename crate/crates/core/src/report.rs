//! Margin reports shared by the estimate registry and the diagnostics.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Outcome of sampling one inequality (or identity) over random
/// configurations: the worst margin seen, any constants fitted from the
/// sample, and the configuration that produced the worst margin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimate: String,
    pub samples: usize,
    /// Smallest value of LHS - RHS over the sample. Identities report
    /// `-max |LHS - RHS|`, so a margin near zero from below is a pass.
    pub min_margin: f64,
    /// Constants whose existence the inequality asserts, fitted from the
    /// sample (ordered map so serialization is stable).
    pub fitted_constants: BTreeMap<String, f64>,
    /// Flattened coordinates of the worst configuration, if any.
    pub worst_sample: Option<Vec<f64>>,
    pub pass: bool,
    pub notes: String,
}

impl EstimateReport {
    pub fn new(estimate: &str, samples: usize) -> Self {
        EstimateReport {
            estimate: estimate.to_string(),
            samples,
            min_margin: f64::INFINITY,
            fitted_constants: BTreeMap::new(),
            worst_sample: None,
            pass: true,
            notes: String::new(),
        }
    }

    /// Fold one sampled margin into the report.
    pub fn record(&mut self, margin: f64, sample: &[f64]) {
        if margin < self.min_margin {
            self.min_margin = margin;
            self.worst_sample = Some(sample.to_vec());
        }
    }

    pub fn with_constant(mut self, name: &str, value: f64) -> Self {
        self.fitted_constants.insert(name.to_string(), value);
        self
    }

    /// Format a float with 17 significant digits; round-trips f64 exactly.
    pub fn fmt_f64(x: f64) -> String {
        format!("{:.16e}", x)
    }

    /// One CSV row matching the header from [`csv_header`](Self::csv_header).
    pub fn csv_row(&self) -> String {
        let constants = self
            .fitted_constants
            .iter()
            .map(|(k, v)| format!("{}={}", k, Self::fmt_f64(*v)))
            .collect::<Vec<_>>()
            .join(";");
        let worst = self
            .worst_sample
            .as_ref()
            .map(|w| {
                w.iter()
                    .map(|v| Self::fmt_f64(*v))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.estimate,
            self.samples,
            Self::fmt_f64(self.min_margin),
            constants,
            worst
        )
    }

    pub fn csv_header() -> &'static str {
        "estimate,samples,min_margin,fitted_constants,worst_sample"
    }
}

/// Report for a single pass/fail check with an attached statistic, used by
/// the diagnostics subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub params: BTreeMap<String, f64>,
    pub min_margin: f64,
    pub standard_error: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(check: &str) -> Self {
        CheckReport {
            check: check.to_string(),
            params: BTreeMap::new(),
            min_margin: f64::INFINITY,
            standard_error: 0.0,
            pass: true,
        }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }
}
