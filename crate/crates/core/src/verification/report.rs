//! Check records and reports.

use serde::Serialize;

/// One named check: the computed statistic, the threshold it was held to,
/// and the provenance (sizes, replications, seed) needed to rerun it.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub big_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        CheckRecord {
            name: name.into(),
            statistic,
            threshold,
            pass: statistic <= threshold,
            n: None,
            big_n: None,
            reps: None,
            seed: None,
            note: None,
        }
    }

    pub fn with_sizes(mut self, n: Option<usize>, big_n: Option<usize>) -> Self {
        self.n = n;
        self.big_n = big_n;
        self
    }

    pub fn with_reps(mut self, reps: usize) -> Self {
        self.reps = Some(reps);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    /// Override the pass flag for checks whose criterion is not a simple
    /// statistic <= threshold comparison.
    pub fn with_pass(mut self, pass: bool) -> Self {
        self.pass = pass;
        self
    }
}

/// A named bundle of check records.
#[derive(Debug, Clone, Default, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: CheckRecord) {
        self.checks.push(rec);
    }

    pub fn merge(&mut self, other: VerificationReport) {
        self.checks.extend(other.checks);
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failed(&self) -> Vec<&CheckRecord> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}
