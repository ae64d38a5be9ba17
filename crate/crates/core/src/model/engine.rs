//! Query construction and decoding: per-entity context pooled from the
//! visual-aware text under the entity mask, merged with the relation-enriched
//! entity features, then decoded against the joint visual+text memory by a
//! self-attention (soft adjacency) block and a cross-attention block. A
//! three-layer head regresses one normalized center-form box per entity.

use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::nn::{table_init, Attention, Dropout, FeedForward, LayerNorm, Linear, Mlp, MASK_NEG};
use crate::tensor::Tensor;

pub struct QueryEngine {
    scorer: Linear,
    merge: Linear,
    bias: ParamId,
    self_attn: Attention,
    self_ffn: FeedForward,
    norm_self_attn: LayerNorm,
    norm_self_ffn: LayerNorm,
    cross_attn: Attention,
    cross_ffn: FeedForward,
    norm_cross_attn: LayerNorm,
    norm_cross_ffn: LayerNorm,
}

impl QueryEngine {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let ffn = d * cfg.ffn_mult;
        QueryEngine {
            scorer: Linear::new(store, rng, "engine.scorer", d, 1),
            merge: Linear::new(store, rng, "engine.merge", 2 * d, d),
            bias: store.add("engine.bias", table_init(1, d, rng)),
            self_attn: Attention::new(store, rng, "engine.self_attn", d),
            self_ffn: FeedForward::new(store, rng, "engine.self_ffn", d, ffn),
            norm_self_attn: LayerNorm::new(store, "engine.norm_self_attn", d),
            norm_self_ffn: LayerNorm::new(store, "engine.norm_self_ffn", d),
            cross_attn: Attention::new(store, rng, "engine.cross_attn", d),
            cross_ffn: FeedForward::new(store, rng, "engine.cross_ffn", d, ffn),
            norm_cross_attn: LayerNorm::new(store, "engine.norm_cross_attn", d),
            norm_cross_ffn: LayerNorm::new(store, "engine.norm_cross_ffn", d),
        }
    }

    /// Entity-context embeddings by mask-restricted attention pooling over
    /// the text tokens, concatenated with the entity features, mapped back to
    /// width d, plus a shared learnable bias vector.
    pub fn build_queries(
        &self,
        g: &mut Graph,
        text_tokens: NodeId,
        masks: &[Vec<bool>],
        entity_features: NodeId,
    ) -> Result<NodeId> {
        let l = g.value(text_tokens).rows;
        let n = g.value(entity_features).rows;
        if masks.len() != n {
            return Err(Error::validation(None, format!("{} masks for {n} entities", masks.len())));
        }
        let logits = self.scorer.apply(g, text_tokens);
        let logits_row = g.transpose(logits); // 1 x L
        let mut contexts = Vec::with_capacity(n);
        for mask in masks {
            if mask.len() != l || !mask.iter().any(|&b| b) {
                return Err(Error::validation(None, "entity mask must be non-empty over the caption"));
            }
            let additive = Tensor::from_vec(
                1,
                l,
                mask.iter().map(|&b| if b { 0.0 } else { MASK_NEG }).collect(),
            );
            let mc = g.constant(additive);
            let masked = g.add(logits_row, mc);
            let weights = g.softmax_rows(masked);
            contexts.push(g.matmul(weights, text_tokens));
        }
        let context = g.concat_rows(&contexts);
        let cat = g.concat_cols(&[context, entity_features]);
        let merged = self.merge.apply(g, cat);
        let bias = g.param(self.bias);
        Ok(g.add_row_broadcast(merged, bias))
    }

    /// One self-attention block over the queries followed by one
    /// cross-attention block into the concatenated visual+text memory, both
    /// pre-norm residual with feedforward.
    pub fn decode_queries(
        &self,
        g: &mut Graph,
        queries: NodeId,
        fused_visual: NodeId,
        fused_text: NodeId,
        drop: &mut Dropout,
    ) -> NodeId {
        let memory = g.concat_rows(&[fused_visual, fused_text]);

        let normed = self.norm_self_attn.apply(g, queries);
        let attended = self.self_attn.apply(g, normed, normed, None);
        let attended = drop.apply(g, attended);
        let x = g.add(queries, attended);
        let normed = self.norm_self_ffn.apply(g, x);
        let ff = self.self_ffn.apply(g, normed);
        let ff = drop.apply(g, ff);
        let x = g.add(x, ff);

        let normed = self.norm_cross_attn.apply(g, x);
        let crossed = self.cross_attn.apply(g, normed, memory, None);
        let crossed = drop.apply(g, crossed);
        let x = g.add(x, crossed);
        let normed = self.norm_cross_ffn.apply(g, x);
        let ff = self.cross_ffn.apply(g, normed);
        let ff = drop.apply(g, ff);
        g.add(x, ff)
    }
}

/// Three-layer feedforward head squashed to (0, 1): (cx, cy, w, h) per entity.
pub struct BoxHead {
    mlp: Mlp,
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        BoxHead { mlp: Mlp::new(store, rng, "box_head", &[d, d, d, 4]) }
    }

    pub fn forward(&self, g: &mut Graph, decoded: NodeId) -> NodeId {
        let h = self.mlp.apply(g, decoded);
        g.sigmoid(h)
    }
}
