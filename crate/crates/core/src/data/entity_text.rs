//! Token-labeled sentences: each token carries a 0/1 label marking entity
//! phrase membership. Stored as JSON lines with keys `tokens` and `labels`.

use std::io::{BufRead, BufReader, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spans::spans_from_labels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTextRecord {
    pub tokens: Vec<String>,
    pub labels: Vec<u8>,
    /// Number of maximal runs of 1s. Recomputed on load and cross-checked
    /// against the file when the file carries it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_count: Option<usize>,
}

impl EntityTextRecord {
    pub fn new(tokens: Vec<String>, labels: Vec<u8>) -> Self {
        let count = count_runs(&labels);
        EntityTextRecord { tokens, labels, entity_count: Some(count) }
    }

    pub fn count(&self) -> usize {
        count_runs(&self.labels)
    }

    pub fn validate(&self, record_idx: Option<usize>) -> Result<()> {
        let fail = |rule: String| Err(Error::validation(record_idx, rule));
        if self.tokens.len() != self.labels.len() {
            return fail(format!(
                "tokens/labels length mismatch ({} vs {})",
                self.tokens.len(),
                self.labels.len()
            ));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return fail("labels must be 0 or 1".into());
        }
        if !self.labels.contains(&1) {
            return fail("sentence must contain at least one entity phrase".into());
        }
        if let Some(declared) = self.entity_count {
            let actual = self.count();
            if declared != actual {
                return fail(format!(
                    "declared entity_count {declared} disagrees with {actual} label runs \
                     (adjacent entity phrases need a 0 gap)"
                ));
            }
        }
        Ok(())
    }

    pub fn spans(&self) -> Vec<crate::spans::EntitySpan> {
        spans_from_labels(&self.labels)
    }
}

fn count_runs(labels: &[u8]) -> usize {
    spans_from_labels(labels).len()
}

/// Load a JSON-lines file, validating every record.
pub fn load_entitytext(path: &str) -> Result<Vec<EntityTextRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: EntityTextRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, Some(lineno + 1), e.to_string()))?;
        rec.validate(Some(records.len()))?;
        rec.entity_count = Some(rec.count());
        records.push(rec);
    }
    Ok(records)
}

pub fn save_entitytext(path: &str, records: &[EntityTextRecord]) -> Result<()> {
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in records {
        serde_json::to_writer(&mut out, rec).expect("record serializes");
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_run_counts_one() {
        let rec = EntityTextRecord::new(strs(&["the", "red", "dog", "runs"]), vec![0, 1, 1, 0]);
        assert_eq!(rec.count(), 1);
        rec.validate(None).unwrap();
    }

    #[test]
    fn two_runs_counted() {
        let rec = EntityTextRecord::new(strs(&["a", "b", "c", "d"]), vec![1, 1, 0, 1]);
        assert_eq!(rec.count(), 2);
    }

    #[test]
    fn all_zero_labels_rejected() {
        let rec = EntityTextRecord::new(strs(&["a", "b", "c"]), vec![0, 0, 0]);
        let err = rec.validate(Some(0)).unwrap_err();
        assert!(err.to_string().contains("at least one entity phrase"));
    }

    #[test]
    fn declared_count_mismatch_rejected() {
        let rec = EntityTextRecord {
            tokens: strs(&["a", "b"]),
            labels: vec![1, 1],
            entity_count: Some(2), // two adjacent phrases merged into one run
        };
        let err = rec.validate(None).unwrap_err();
        assert!(err.to_string().contains("0 gap"), "{err}");
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("et.jsonl");
        let recs = vec![
            EntityTextRecord::new(strs(&["the", "red", "dog"]), vec![0, 1, 1]),
            EntityTextRecord::new(strs(&["a", "cat", "sat", "on", "a", "mat"]), vec![0, 1, 0, 0, 0, 1]),
        ];
        save_entitytext(path.to_str().unwrap(), &recs).unwrap();
        let loaded = load_entitytext(path.to_str().unwrap()).unwrap();
        assert_eq!(loaded, recs);
    }

    #[test]
    fn bad_line_reports_lineno() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"tokens\":[\"a\"],\"labels\":[1]}\nnot json\n").unwrap();
        let err = load_entitytext(path.to_str().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Format { line: Some(2), .. }), "{err}");
    }
}
