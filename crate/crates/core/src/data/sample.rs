//! A training/evaluation sample: tokenized caption, scene raster, and the
//! ground truth (normalized boxes, entity spans, directed relations).

use std::collections::BTreeSet;

use crate::boxes::CenterBox;
use crate::data::entity_text::EntityTextRecord;
use crate::data::raster::Raster;
use crate::data::remex::RemexRecord;
use crate::data::tokenizer::{tokenize, TokenizedCaption, Vocab};
use crate::error::{Error, Result};
use crate::spans::EntitySpan;

#[derive(Debug, Clone)]
pub struct Sample {
    pub caption: String,
    pub tokens: TokenizedCaption,
    pub raster: Raster,
    pub gt_boxes: Vec<CenterBox>,
    /// Entity spans in caption order.
    pub gt_spans: Vec<EntitySpan>,
    pub gt_relations: BTreeSet<(usize, usize)>,
    pub gt_entity_count: usize,
}

impl Sample {
    /// Join an annotation record with its raster and token labels.
    pub fn from_remex(
        record: &RemexRecord,
        labels: &EntityTextRecord,
        raster: Raster,
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<Sample> {
        record.validate(None, Some((raster.width as f64, raster.height as f64)))?;
        labels.validate(None)?;
        let tokens = tokenize(&record.caption, vocab, max_len)?;
        let gt_spans = labels.spans();
        let gt_boxes: Vec<CenterBox> = record
            .boxes
            .iter()
            .map(|b| b.corner().to_center(raster.width as f64, raster.height as f64))
            .collect();
        let sample = Sample {
            caption: record.caption.clone(),
            tokens,
            raster,
            gt_boxes,
            gt_spans,
            gt_relations: record.relations(),
            gt_entity_count: record.boxes.len(),
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gt_entity_count != self.gt_boxes.len() || self.gt_entity_count != self.gt_spans.len() {
            return Err(Error::validation(
                None,
                format!(
                    "entity count {} must match boxes ({}) and spans ({})",
                    self.gt_entity_count,
                    self.gt_boxes.len(),
                    self.gt_spans.len()
                ),
            ));
        }
        for w in self.gt_spans.windows(2) {
            // sorted, non-overlapping, non-adjacent
            if w[1].start <= w[0].end + 1 {
                return Err(Error::validation(
                    None,
                    format!("spans ({},{}) and ({},{}) overlap or touch", w[0].start, w[0].end, w[1].start, w[1].end),
                ));
            }
        }
        if let Some(last) = self.gt_spans.last() {
            if last.end >= self.tokens.len {
                return Err(Error::validation(None, "span exceeds tokenized caption length"));
            }
        }
        for b in &self.gt_boxes {
            if b.w <= 0.0 || b.h <= 0.0 {
                return Err(Error::validation(None, "degenerate ground-truth box"));
            }
        }
        Ok(())
    }

    /// Ground-truth relation matrix over entities (1.0 where a directed
    /// relation holds).
    pub fn relation_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.gt_entity_count;
        let mut m = vec![vec![0.0; n]; n];
        for &(s, t) in &self.gt_relations {
            m[s][t] = 1.0;
        }
        m
    }

    /// Token labels (1 inside an entity span) over the valid caption tokens.
    pub fn token_labels(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.tokens.len];
        for s in &self.gt_spans {
            for l in labels.iter_mut().take(s.end + 1).skip(s.start) {
                *l = 1;
            }
        }
        labels
    }
}
