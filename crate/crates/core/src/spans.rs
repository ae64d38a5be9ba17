//! Entity spans over caption tokens: threshold-based candidate extraction,
//! center alignment of estimated boundaries to candidates, and the token
//! masks built from the result.

use serde::{Deserialize, Serialize};

/// Inclusive token interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span start must not exceed end");
        EntitySpan { start, end }
    }

    /// Arithmetic mean of the two endpoints.
    pub fn center(&self) -> f64 {
        (self.start + self.end) as f64 / 2.0
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maximal runs of consecutive positions with probability >= tau, in
/// ascending start order. May be empty.
pub fn extract_candidate_spans(probs: &[f64], tau: f64, valid_len: usize) -> Vec<EntitySpan> {
    let n = valid_len.min(probs.len());
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for i in 0..n {
        if probs[i] >= tau {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            spans.push(EntitySpan::new(s, i - 1));
        }
    }
    if let Some(s) = start {
        spans.push(EntitySpan::new(s, n - 1));
    }
    spans
}

/// Map a normalized position in [0, 1] to a token index in [0, valid_len).
pub fn normalized_to_index(v: f64, valid_len: usize) -> usize {
    debug_assert!(valid_len > 0);
    let idx = (v * (valid_len as f64 - 1.0)).round();
    (idx.max(0.0) as usize).min(valid_len - 1)
}

/// Raw estimated boundary in token indices; endpoints may arrive unordered.
#[derive(Debug, Clone, Copy)]
pub struct EstimatedSpan {
    pub start: usize,
    pub end: usize,
}

impl EstimatedSpan {
    pub fn center(&self) -> f64 {
        (self.start + self.end) as f64 / 2.0
    }

    /// Ordered and clamped fallback span, used when no candidate exists.
    fn into_span(self, valid_len: usize) -> EntitySpan {
        let (s, e) = if self.start <= self.end { (self.start, self.end) } else { (self.end, self.start) };
        EntitySpan::new(s.min(valid_len - 1), e.min(valid_len - 1))
    }
}

/// For each estimated boundary, pick the candidate whose center is nearest
/// (absolute difference of centers); ties go to the lowest candidate start.
/// With no candidates the estimate itself is used. Different estimates may
/// select the same candidate.
pub fn align_spans(
    estimated: &[EstimatedSpan],
    candidates: &[EntitySpan],
    valid_len: usize,
) -> (Vec<EntitySpan>, Vec<Vec<bool>>) {
    assert!(!estimated.is_empty(), "alignment needs at least one estimate");
    assert!(valid_len > 0);
    let aligned: Vec<EntitySpan> = estimated
        .iter()
        .map(|est| {
            if candidates.is_empty() {
                return est.into_span(valid_len);
            }
            let c_est = est.center();
            let mut best = candidates[0];
            let mut best_dist = (c_est - best.center()).abs();
            for cand in &candidates[1..] {
                let dist = (c_est - cand.center()).abs();
                if dist < best_dist || (dist == best_dist && cand.start < best.start) {
                    best = *cand;
                    best_dist = dist;
                }
            }
            best
        })
        .collect();
    let masks = aligned.iter().map(|s| span_mask(s, valid_len)).collect();
    (aligned, masks)
}

/// Boolean mask over `valid_len` tokens, true exactly on the span.
pub fn span_mask(span: &EntitySpan, valid_len: usize) -> Vec<bool> {
    let mut mask = vec![false; valid_len];
    for slot in mask.iter_mut().take(span.end.min(valid_len - 1) + 1).skip(span.start) {
        *slot = true;
    }
    mask
}

/// Spans recovered from a 0/1 label sequence (maximal runs of 1s).
pub fn spans_from_labels(labels: &[u8]) -> Vec<EntitySpan> {
    let probs: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    extract_candidate_spans(&probs, 0.5, labels.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_worked_example() {
        let probs = [0.9, 0.8, 0.1, 0.7];
        let spans = extract_candidate_spans(&probs, 0.5, 4);
        assert_eq!(spans, vec![EntitySpan::new(0, 1), EntitySpan::new(3, 3)]);
    }

    #[test]
    fn extraction_edge_runs() {
        assert!(extract_candidate_spans(&[0.1, 0.2], 0.5, 2).is_empty());
        assert_eq!(
            extract_candidate_spans(&[0.9, 0.9, 0.9], 0.5, 3),
            vec![EntitySpan::new(0, 2)]
        );
        // threshold is inclusive
        assert_eq!(
            extract_candidate_spans(&[0.5], 0.5, 1),
            vec![EntitySpan::new(0, 0)]
        );
    }

    #[test]
    fn alignment_prefers_nearest_center() {
        // estimated center 2.0; candidates centered 0.5 and 3.0
        let est = [EstimatedSpan { start: 2, end: 2 }];
        let cands = [EntitySpan::new(0, 1), EntitySpan::new(3, 3)];
        let (aligned, masks) = align_spans(&est, &cands, 5);
        assert_eq!(aligned, vec![EntitySpan::new(3, 3)]);
        assert_eq!(masks[0], vec![false, false, false, true, false]);
    }

    #[test]
    fn alignment_tie_breaks_to_lowest_start() {
        // centers 1.0 and 3.0, estimate center 2.0 -> tie, pick start 0
        let est = [EstimatedSpan { start: 2, end: 2 }];
        let cands = [EntitySpan::new(0, 2), EntitySpan::new(3, 3)];
        let (aligned, _) = align_spans(&est, &cands, 5);
        assert_eq!(aligned, vec![EntitySpan::new(0, 2)]);
    }

    #[test]
    fn alignment_fallback_swaps_and_clamps() {
        let est = [EstimatedSpan { start: 7, end: 4 }];
        let (aligned, masks) = align_spans(&est, &[], 9);
        assert_eq!(aligned, vec![EntitySpan::new(4, 7)]);
        let expected: Vec<bool> = (0..9).map(|i| (4..=7).contains(&i)).collect();
        assert_eq!(masks[0], expected);
    }

    #[test]
    fn normalized_scaling_rounds_to_nearest() {
        assert_eq!(normalized_to_index(0.2, 10), 2);
        assert_eq!(normalized_to_index(0.5, 10), 5); // 4.5 rounds away from zero
        assert_eq!(normalized_to_index(1.0, 10), 9);
        assert_eq!(normalized_to_index(0.0, 10), 0);
    }

    #[test]
    fn labels_roundtrip_to_spans() {
        assert_eq!(
            spans_from_labels(&[1, 1, 0, 1]),
            vec![EntitySpan::new(0, 1), EntitySpan::new(3, 3)]
        );
    }
}
