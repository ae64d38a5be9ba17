//! Annotation records for multi-entity grounding scenes: one caption, a set
//! of labeled boxes, and directed relations stored as parallel source/target
//! index lists. Files are JSON arrays of records.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::boxes::CornerBox;
use crate::error::{Error, Result};

/// Most entities a record may annotate.
pub const N_MAX_BOXES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemexBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub label: String,
}

impl RemexBox {
    pub fn corner(&self) -> CornerBox {
        CornerBox::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemexRecord {
    pub image_ref: String,
    pub caption: String,
    pub boxes: Vec<RemexBox>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl RemexRecord {
    /// Directed relation pairs recovered from the source/target zip.
    pub fn relations(&self) -> BTreeSet<(usize, usize)> {
        self.source.iter().copied().zip(self.target.iter().copied()).collect()
    }

    /// Structural invariants. `bounds`, when known (e.g. raster dimensions),
    /// also checks that boxes stay inside the image.
    pub fn validate(&self, record_idx: Option<usize>, bounds: Option<(f64, f64)>) -> Result<()> {
        let fail = |rule: String| Err(Error::validation(record_idx, rule));
        if self.boxes.is_empty() {
            return fail("record must contain at least one box".into());
        }
        if self.boxes.len() > N_MAX_BOXES {
            return fail(format!("record has {} boxes, maximum is {N_MAX_BOXES}", self.boxes.len()));
        }
        if self.source.len() != self.target.len() {
            return fail(format!(
                "source/target length mismatch ({} vs {})",
                self.source.len(),
                self.target.len()
            ));
        }
        let n = self.boxes.len();
        let mut seen = BTreeSet::new();
        for (&s, &t) in self.source.iter().zip(self.target.iter()) {
            if s >= n || t >= n {
                return fail(format!("relation ({s}, {t}) references a box outside 0..{n}"));
            }
            if s == t {
                return fail(format!("self-relation ({s}, {t}) is forbidden"));
            }
            if !seen.insert((s, t)) {
                return fail(format!("duplicate relation ({s}, {t})"));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !(b.x_min < b.x_max && b.y_min < b.y_max) {
                return fail(format!("box {i} is degenerate (min must be below max)"));
            }
            if b.x_min < 0.0 || b.y_min < 0.0 {
                return fail(format!("box {i} extends past the image origin"));
            }
            if let Some((w, h)) = bounds {
                if b.x_max > w || b.y_max > h {
                    return fail(format!("box {i} extends past the image bounds {w}x{h}"));
                }
            }
        }
        if self.caption.trim().is_empty() {
            return fail("caption must not be empty".into());
        }
        Ok(())
    }
}

/// Load and validate a record file. Parse failures carry line context;
/// invariant violations name the record index and the violated rule.
pub fn load_remex(path: &str) -> Result<Vec<RemexRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<RemexRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, Some(e.line()), e.to_string()))?;
    for (i, rec) in records.iter().enumerate() {
        rec.validate(Some(i), None)?;
    }
    Ok(records)
}

pub fn save_remex(path: &str, records: &[RemexRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
