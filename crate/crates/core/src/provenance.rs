//! Partition tags on samples and an audit log that refuses fits touching
//! the wrong partition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Fold1,
    Fold2,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleTag {
    pub id: String,
    pub partition: Partition,
}

impl SampleTag {
    pub fn new(id: impl Into<String>, partition: Partition) -> Self {
        Self { id: id.into(), partition }
    }

    pub fn with_partition(&self, partition: Partition) -> Self {
        Self { id: self.id.clone(), partition }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("fit '{fit}' received sample {id} from the {partition:?} partition")]
pub struct LeakageError {
    pub fit: String,
    pub id: String,
    pub partition: Partition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub fit: String,
    pub allowed: Vec<Partition>,
    pub counts: BTreeMap<Partition, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLog {
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a fit over `samples`, or fails on the first sample outside
    /// `allowed`.
    pub fn admit<'a, I>(&mut self, fit: &str, samples: I, allowed: &[Partition]) -> Result<(), LeakageError>
    where
        I: IntoIterator<Item = &'a SampleTag>,
    {
        let mut counts = BTreeMap::new();
        for tag in samples {
            if !allowed.contains(&tag.partition) {
                return Err(LeakageError { fit: fit.to_string(), id: tag.id.clone(), partition: tag.partition });
            }
            *counts.entry(tag.partition).or_insert(0) += 1;
        }
        self.entries.push(AuditEntry { fit: fit.to_string(), allowed: allowed.to_vec(), counts });
        Ok(())
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    /// Whether any recorded fit consumed samples from `partition`.
    pub fn touched(&self, partition: Partition) -> bool {
        self.entries.iter().any(|e| e.counts.contains_key(&partition))
    }

    pub fn push(&mut self, entry: AuditEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: AuditLog) {
        self.entries.extend(other.entries);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admit_rejects_foreign_partitions() {
        let mut log = AuditLog::new();
        let tags = [SampleTag::new("a", Partition::Fold1), SampleTag::new("b", Partition::Fold1)];
        log.admit("base", &tags, &[Partition::Fold1]).unwrap();
        assert_eq!(log.entries()[0].counts[&Partition::Fold1], 2);
        let bad = [SampleTag::new("a", Partition::Fold1), SampleTag::new("t", Partition::Test)];
        let err = log.admit("base", &bad, &[Partition::Fold1]).unwrap_err();
        assert_eq!(err.id, "t");
        assert_eq!(log.entries().len(), 1);
        assert!(!log.touched(Partition::Test));
        assert!(log.touched(Partition::Fold1));
    }
}
