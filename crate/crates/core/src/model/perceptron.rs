//! Text-adaptive multi-entity perception: token-level entity classification
//! with a count head, a learned bank of entity queries refined against the
//! text by a transformer decoder, and a position head whose normalized
//! boundary estimates are aligned to threshold candidates (see [`crate::spans`]).

use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::nn::{table_init, DecoderLayer, Dropout, Linear, Mlp};
use crate::tensor::Tensor;

/// Two hidden feedforward layers of width d; the penultimate stage emits one
/// logit per token and the final stage maps the mean-pooled penultimate
/// features to entity-count logits.
pub struct EntityClassifier {
    hidden1: Linear,
    hidden2: Linear,
    token_head: Linear,
    count_head: Linear,
}

pub struct EntityLogits {
    /// L x 1, one entity-vs-non-entity logit per valid token.
    pub per_token: NodeId,
    /// 1 x (N_max + 1).
    pub count: NodeId,
}

impl EntityClassifier {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        EntityClassifier {
            hidden1: Linear::new(store, rng, "classifier.hidden1", d, d),
            hidden2: Linear::new(store, rng, "classifier.hidden2", d, d),
            token_head: Linear::new(store, rng, "classifier.token_head", d, 1),
            count_head: Linear::new(store, rng, "classifier.count_head", d, cfg.n_max_entities + 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, text: NodeId) -> EntityLogits {
        let h = self.hidden1.apply(g, text);
        let h = g.silu(h);
        let h = self.hidden2.apply(g, h);
        let h = g.silu(h);
        let per_token = self.token_head.apply(g, h);
        // mean over the valid tokens only; rows are already unpadded
        let l = g.value(h).rows;
        let pool = g.constant(Tensor::filled(1, l, 1.0 / l as f64));
        let pooled = g.matmul(pool, h);
        let count = self.count_head.apply(g, pooled);
        EntityLogits { per_token, count }
    }
}

/// Learned query bank refined by decoder layers, plus the single shared
/// query used when the span machinery is ablated.
pub struct EntityQueryDecoder {
    pub bank: ParamId,
    shared: ParamId,
    layers: Vec<DecoderLayer>,
    n_max: usize,
}

impl EntityQueryDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        EntityQueryDecoder {
            bank: store.add("tmp.bank", table_init(cfg.n_max_entities, d, rng)),
            shared: store.add("tmp.shared", table_init(1, d, rng)),
            layers: (0..cfg.tmp_decoder_layers)
                .map(|i| DecoderLayer::new(store, rng, &format!("tmp.layer{i}"), d, d * cfg.ffn_mult))
                .collect(),
            n_max: cfg.n_max_entities,
        }
    }

    /// The first `n` bank rows refined against the text features.
    pub fn decode(&self, g: &mut Graph, n: usize, text: NodeId, drop: &mut Dropout) -> Result<NodeId> {
        if n == 0 || n > self.n_max {
            return Err(Error::validation(None, format!("entity count {n} outside 1..={}", self.n_max)));
        }
        let bank = g.param(self.bank);
        let mut q = g.slice_rows(bank, 0, n);
        for layer in &self.layers {
            q = layer.apply(g, q, text, None, drop);
        }
        Ok(q)
    }

    /// `n` copies of the shared query (span machinery disabled).
    pub fn shared_queries(&self, g: &mut Graph, n: usize) -> NodeId {
        let shared = g.param(self.shared);
        g.gather_rows(shared, &vec![0; n])
    }
}

/// Maps each refined query to normalized (start, end) predictions in [0, 1].
pub struct PositionHead {
    mlp: Mlp,
}

impl PositionHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        PositionHead { mlp: Mlp::new(store, rng, "tmp.pos_head", &[d, d, 2]) }
    }

    pub fn forward(&self, g: &mut Graph, queries: NodeId) -> NodeId {
        let h = self.mlp.apply(g, queries);
        g.sigmoid(h)
    }
}
