//! End-to-end model: encoders, entity perception, relation reasoning, query
//! decoding, and the box head, wired per ablation flags.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::boxes::CenterBox;
use crate::config::ModelConfig;
use crate::data::raster::{extract_patches, Raster};
use crate::data::tokenizer::{TokenizedCaption, Vocab};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::model::encoders::{FusionEncoder, ImageEncoder, TextEncoder};
use crate::model::engine::{BoxHead, QueryEngine};
use crate::model::perceptron::{EntityClassifier, EntityQueryDecoder, PositionHead};
use crate::model::relation::{select_top_k, RelationReasoner};
use crate::nn::Dropout;
use crate::spans::{extract_candidate_spans, normalized_to_index, EntitySpan, EstimatedSpan};
use crate::tensor::Tensor;

pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub fusion: FusionEncoder,
    pub classifier: EntityClassifier,
    pub queries: EntityQueryDecoder,
    pub pos_head: PositionHead,
    pub relations: RelationReasoner,
    pub engine: QueryEngine,
    pub box_head: BoxHead,
}

/// Handles into one forward pass; node ids index the graph that built them.
pub struct ForwardPass {
    pub per_token_logits: NodeId,
    pub count_logits: NodeId,
    pub n_entities: usize,
    pub aligned_spans: Vec<EntitySpan>,
    pub masks: Vec<Vec<bool>>,
    /// n^2 x 1 row-major relation scores (a zero constant when the relation
    /// reasoner is disabled).
    pub rel_scores_flat: NodeId,
    pub rel_count_logits: NodeId,
    /// n x 4 normalized center-form boxes.
    pub boxes: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub boxes: Vec<CenterBox>,
    pub relations: BTreeSet<(usize, usize)>,
    pub entity_count: usize,
    pub spans: Vec<EntitySpan>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, &mut rng, cfg, vocab.len());
        let image = ImageEncoder::new(&mut store, &mut rng, cfg);
        let fusion = FusionEncoder::new(&mut store, &mut rng, cfg);
        let classifier = EntityClassifier::new(&mut store, &mut rng, cfg);
        let queries = EntityQueryDecoder::new(&mut store, &mut rng, cfg);
        let pos_head = PositionHead::new(&mut store, &mut rng, cfg);
        let relations = RelationReasoner::new(&mut store, &mut rng, cfg);
        let engine = QueryEngine::new(&mut store, &mut rng, cfg);
        let box_head = BoxHead::new(&mut store, &mut rng, cfg);
        Ok(Model {
            cfg: cfg.clone(),
            vocab,
            store,
            text,
            image,
            fusion,
            classifier,
            queries,
            pos_head,
            relations,
            engine,
            box_head,
        })
    }

    /// Text-only path for the token-labeling stage: context encoder plus
    /// entity classifier.
    pub fn forward_entity(
        &self,
        g: &mut Graph,
        token_ids: &[usize],
        drop: &mut Dropout,
    ) -> Result<(NodeId, NodeId)> {
        let text = self.text.forward(g, token_ids, drop)?;
        let logits = self.classifier.forward(g, text);
        Ok((logits.per_token, logits.count))
    }

    /// Full pipeline. `count_override` carries the ground-truth entity count
    /// during stage-two training; inference takes the count head's argmax
    /// clamped to at least one entity.
    pub fn forward(
        &self,
        g: &mut Graph,
        token_ids: &[usize],
        patches: &Tensor,
        count_override: Option<usize>,
        drop: &mut Dropout,
    ) -> Result<ForwardPass> {
        let valid_len = token_ids.len();
        let text = self.text.forward(g, token_ids, drop)?;
        let visual = self.image.forward(g, patches)?;
        let fused = self.fusion.forward(g, visual, text, drop)?;
        let logits = self.classifier.forward(g, text);

        let n_entities = match count_override {
            Some(n) => {
                if n == 0 || n > self.cfg.n_max_entities {
                    return Err(Error::validation(
                        None,
                        format!("forced entity count {n} outside 1..={}", self.cfg.n_max_entities),
                    ));
                }
                n
            }
            None => {
                let row = g.value(logits.count).row(0);
                argmax(row).clamp(1, self.cfg.n_max_entities)
            }
        };

        let (entity_features, aligned_spans, masks) = if self.cfg.use_tmp {
            let q = self.queries.decode(g, n_entities, text, drop)?;
            let positions = self.pos_head.forward(g, q);
            let estimated: Vec<EstimatedSpan> = (0..n_entities)
                .map(|i| {
                    let row = g.value(positions).row(i);
                    EstimatedSpan {
                        start: normalized_to_index(row[0], valid_len),
                        end: normalized_to_index(row[1], valid_len),
                    }
                })
                .collect();
            let probs: Vec<f64> = g
                .value(logits.per_token)
                .data
                .iter()
                .map(|&x| crate::graph::sigmoid(x))
                .collect();
            let candidates = extract_candidate_spans(&probs, self.cfg.span_threshold, valid_len);
            let (aligned, masks) = crate::spans::align_spans(&estimated, &candidates, valid_len);
            (q, aligned, masks)
        } else {
            let q = self.queries.shared_queries(g, n_entities);
            let span = EntitySpan::new(0, valid_len - 1);
            let aligned = vec![span; n_entities];
            let masks = vec![vec![true; valid_len]; n_entities];
            (q, aligned, masks)
        };

        let rel_count_logits = self.relations.count(g, entity_features);
        let (rel_scores_flat, modulated) = if self.cfg.use_eir {
            let scores = self.relations.score(g, entity_features, fused.visual);
            let qr = self.relations.modulate(g, entity_features, scores);
            (scores, qr)
        } else {
            let zeros = g.constant(Tensor::zeros(n_entities * n_entities, 1));
            (zeros, entity_features)
        };

        let built = self.engine.build_queries(g, fused.text, &masks, modulated)?;
        let decoded = self.engine.decode_queries(g, built, fused.visual, fused.text, drop);
        let boxes = self.box_head.forward(g, decoded);

        Ok(ForwardPass {
            per_token_logits: logits.per_token,
            count_logits: logits.count,
            n_entities,
            aligned_spans,
            masks,
            rel_scores_flat,
            rel_count_logits,
            boxes,
        })
    }

    /// Deterministic inference on one sample.
    pub fn predict(&self, tokens: &TokenizedCaption, raster: &Raster) -> Result<Prediction> {
        let patches = extract_patches(&raster.to_image(), self.cfg.patch_size)?;
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, tokens.valid_ids(), &patches, None, &mut Dropout::Eval)?;
        let n = fwd.n_entities;

        let scores = score_matrix(g.value(fwd.rel_scores_flat), n);
        let count_row = g.value(fwd.rel_count_logits).row(0).to_vec();
        let k_hat = argmax(&count_row).min(n * (n - 1));
        let relations = select_top_k(&scores, k_hat);

        let boxes = (0..n)
            .map(|i| {
                let row = g.value(fwd.boxes).row(i);
                CenterBox { cx: row[0], cy: row[1], w: row[2], h: row[3] }
            })
            .collect();

        Ok(Prediction { boxes, relations, entity_count: n, spans: fwd.aligned_spans })
    }

    /// Per-parameter learning-rate group: the text and image backbones train
    /// at the backbone rate, everything else at the head rate.
    pub fn is_backbone(name: &str) -> bool {
        name.starts_with("text.") || name.starts_with("image.")
    }

    /// Parameters trained during the token-labeling stage.
    pub fn in_stage1(name: &str) -> bool {
        name.starts_with("text.") || name.starts_with("classifier.")
    }
}

/// Unflatten a row-major n^2 x 1 score column into the n x n matrix.
pub fn score_matrix(flat: &Tensor, n: usize) -> Tensor {
    assert_eq!(flat.len(), n * n);
    Tensor::from_vec(n, n, flat.data.clone())
}

/// Index of the first maximal element.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_with, SynthOptions};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            text_layers: 1,
            fusion_layers: 1,
            tmp_decoder_layers: 1,
            ffn_mult: 2,
            dropout: 0.0,
            max_text_len: 20,
            image_size: 16,
            patch_size: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_model(cfg: &ModelConfig, seed: u64) -> (Model, crate::data::Sample) {
        let opts = SynthOptions {
            image_size: cfg.image_size,
            min_shape: 4,
            max_shape: 8,
            relation_margin: 2.0,
            max_len: cfg.max_text_len,
        };
        let corpus = generate_with(&opts, 3, 4, 3).unwrap();
        let model = Model::new(cfg, corpus.vocab.clone(), seed).unwrap();
        let sample = corpus.samples.into_iter().find(|s| s.gt_entity_count >= 2).unwrap();
        (model, sample)
    }

    #[test]
    fn predict_is_deterministic_and_well_formed() {
        let cfg = tiny_cfg();
        let (model, sample) = tiny_model(&cfg, 11);
        let a = model.predict(&sample.tokens, &sample.raster).unwrap();
        let b = model.predict(&sample.tokens, &sample.raster).unwrap();
        assert_eq!(a, b);
        assert!(a.entity_count >= 1 && a.entity_count <= cfg.n_max_entities);
        assert_eq!(a.boxes.len(), a.entity_count);
        assert_eq!(a.spans.len(), a.entity_count);
        for b in &a.boxes {
            assert!(b.cx > 0.0 && b.cx < 1.0 && b.w > 0.0 && b.w < 1.0);
        }
        for &(s, t) in &a.relations {
            assert_ne!(s, t);
            assert!(s < a.entity_count && t < a.entity_count);
        }
    }

    #[test]
    fn ablated_modules_still_run() {
        for (use_tmp, use_eir) in [(false, true), (true, false), (false, false)] {
            let cfg = ModelConfig { use_tmp, use_eir, ..tiny_cfg() };
            let (model, sample) = tiny_model(&cfg, 13);
            let pred = model.predict(&sample.tokens, &sample.raster).unwrap();
            assert_eq!(pred.boxes.len(), pred.entity_count);
            if !use_tmp {
                // full-sentence spans
                for s in &pred.spans {
                    assert_eq!((s.start, s.end), (0, sample.tokens.len - 1));
                }
            }
        }
    }

    #[test]
    fn teacher_forcing_pins_entity_count() {
        let cfg = tiny_cfg();
        let (model, sample) = tiny_model(&cfg, 17);
        let patches = extract_patches(&sample.raster.to_image(), cfg.patch_size).unwrap();
        let mut g = Graph::new(&model.store);
        let fwd = model
            .forward(&mut g, sample.tokens.valid_ids(), &patches, Some(3), &mut Dropout::Eval)
            .unwrap();
        assert_eq!(fwd.n_entities, 3);
        assert_eq!(g.value(fwd.boxes).shape(), (3, 4));
        let mut g = Graph::new(&model.store);
        assert!(model
            .forward(&mut g, sample.tokens.valid_ids(), &patches, Some(9), &mut Dropout::Eval)
            .is_err());
    }

    #[test]
    fn forward_outputs_finite_over_random_inits() {
        let cfg = tiny_cfg();
        for seed in 0..20 {
            let (model, sample) = tiny_model(&cfg, seed);
            let pred = model.predict(&sample.tokens, &sample.raster).unwrap();
            assert!(pred.boxes.iter().all(|b| b.cx.is_finite() && b.cy.is_finite()));
        }
    }
}
