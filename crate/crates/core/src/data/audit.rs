use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use super::YearIndex;

/// Counts label reads per year.
///
/// Model-facing code reads labels through [`super::CountyYearRecord::label`],
/// which is counted under `reads`; scoring reads go through
/// [`super::CountyYearRecord::ground_truth`] and are counted separately.
#[derive(Debug, Default)]
pub struct LabelAudit {
    reads: Mutex<BTreeMap<YearIndex, u64>>,
    scoring_reads: Mutex<BTreeMap<YearIndex, u64>>,
}

pub type AuditHandle = Arc<LabelAudit>;

impl LabelAudit {
    pub fn new_handle() -> AuditHandle {
        Arc::new(LabelAudit::default())
    }

    pub(crate) fn record_read(&self, year: YearIndex) {
        *self.reads.lock().expect("audit lock").entry(year).or_insert(0) += 1;
    }

    pub(crate) fn record_scoring_read(&self, year: YearIndex) {
        *self
            .scoring_reads
            .lock()
            .expect("audit lock")
            .entry(year)
            .or_insert(0) += 1;
    }

    /// Model-path label reads recorded for `year`.
    pub fn reads(&self, year: YearIndex) -> u64 {
        self.reads.lock().expect("audit lock").get(&year).copied().unwrap_or(0)
    }

    pub fn scoring_reads(&self, year: YearIndex) -> u64 {
        self.scoring_reads
            .lock()
            .expect("audit lock")
            .get(&year)
            .copied()
            .unwrap_or(0)
    }

    pub fn total_reads(&self) -> u64 {
        self.reads.lock().expect("audit lock").values().sum()
    }
}
