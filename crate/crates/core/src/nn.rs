//! Layers built on the autograd graph: linear maps, layer norm, single-head
//! attention, and pre-norm transformer blocks. Constructors register their
//! parameters under a dotted path so checkpoints and optimizer groups can
//! address them by name.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Attention logits added to masked positions. Large enough to zero the
/// softmax weight, small enough to stay finite in f64.
pub const MASK_NEG: f64 = -1e30;

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

/// Small uniform init for embedding-style tables.
pub fn table_init(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-0.1..0.1))
}

/// Dropout context: `train` carries an RNG that draws one mask per call,
/// `eval` is the identity.
pub enum Dropout<'r> {
    Eval,
    Train { p: f64, rng: &'r mut ChaCha20Rng },
}

impl Dropout<'_> {
    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Dropout::Eval => x,
            Dropout::Train { p, rng } => {
                if *p == 0.0 {
                    return x;
                }
                let keep = 1.0 - *p;
                let shape = g.value(x).shape();
                let mask = Tensor::from_fn(shape.0, shape.1, |_, _| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = g.constant(mask);
                g.mul(x, m)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), xavier_uniform(fan_in, fan_out, rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(1, fan_out));
        Linear { w, b }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add_row_broadcast(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::filled(1, dim, 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(1, dim));
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Two-layer feedforward block with SiLU activation.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.inner"), dim, hidden),
            outer: Linear::new(store, rng, &format!("{name}.outer"), hidden, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.inner.apply(g, x);
        let h = g.silu(h);
        self.outer.apply(g, h)
    }
}

/// Single-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, dim: usize) -> Self {
        Attention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim),
            dim,
        }
    }

    /// `mask`, when given, is added to the logits (use [`MASK_NEG`] entries
    /// to bar keys).
    pub fn apply(&self, g: &mut Graph, queries: NodeId, keys: NodeId, mask: Option<&Tensor>) -> NodeId {
        let q = self.wq.apply(g, queries);
        let k = self.wk.apply(g, keys);
        let v = self.wv.apply(g, keys);
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let mut logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        if let Some(m) = mask {
            let mc = g.constant(m.clone());
            logits = g.add(logits, mc);
        }
        let weights = g.softmax_rows(logits);
        let mixed = g.matmul(weights, v);
        self.wo.apply(g, mixed)
    }
}

/// Pre-norm self-attention encoder block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ffn: FeedForward,
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, dim: usize, ffn_hidden: usize) -> Self {
        EncoderLayer {
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden),
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId, mask: Option<&Tensor>, drop: &mut Dropout) -> NodeId {
        let normed = self.norm_attn.apply(g, x);
        let attended = self.attn.apply(g, normed, normed, mask);
        let attended = drop.apply(g, attended);
        let x = g.add(x, attended);
        let normed = self.norm_ffn.apply(g, x);
        let ff = self.ffn.apply(g, normed);
        let ff = drop.apply(g, ff);
        g.add(x, ff)
    }
}

/// Pre-norm decoder block: self-attention over the queries, cross-attention
/// into a memory, feedforward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub ffn: FeedForward,
    pub norm_self: LayerNorm,
    pub norm_cross: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, dim: usize, ffn_hidden: usize) -> Self {
        DecoderLayer {
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), dim),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden),
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dim),
        }
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        x: NodeId,
        memory: NodeId,
        memory_mask: Option<&Tensor>,
        drop: &mut Dropout,
    ) -> NodeId {
        let normed = self.norm_self.apply(g, x);
        let attended = self.self_attn.apply(g, normed, normed, None);
        let attended = drop.apply(g, attended);
        let x = g.add(x, attended);

        let normed = self.norm_cross.apply(g, x);
        let crossed = self.cross_attn.apply(g, normed, memory, memory_mask);
        let crossed = drop.apply(g, crossed);
        let x = g.add(x, crossed);

        let normed = self.norm_ffn.apply(g, x);
        let ff = self.ffn.apply(g, normed);
        let ff = drop.apply(g, ff);
        g.add(x, ff)
    }
}

/// Stack of linear layers with SiLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, h);
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_shapes_and_bias() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "lin", 3, 5);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(2, 3));
        let y = lin.apply(&mut g, x);
        assert_eq!(g.value(y).shape(), (2, 5));
        // zero input, zero bias -> zero output
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_mask_bars_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "attn", 4);
        let keys_a = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1);
        // change only the masked key row
        let mut keys_b = keys_a.clone();
        for c in 0..4 {
            keys_b.set(2, c, 99.0);
        }
        let queries = Tensor::from_fn(2, 4, |r, c| 0.05 * (r + c) as f64);
        let mut mask = Tensor::zeros(2, 3);
        mask.set(0, 2, MASK_NEG);
        mask.set(1, 2, MASK_NEG);

        let run = |keys: &Tensor| {
            let mut g = Graph::new(&store);
            let q = g.constant(queries.clone());
            let k = g.constant(keys.clone());
            let out = attn.apply(&mut g, q, k, Some(&mask));
            g.value(out).clone()
        };
        assert_eq!(run(&keys_a), run(&keys_b));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_fn(2, 3, |r, c| (r + c) as f64));
        let y = Dropout::Eval.apply(&mut g, x);
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn encoder_layer_preserves_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut rng, "enc", 8, 16);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_fn(5, 8, |r, c| 0.1 * (r * 8 + c) as f64 - 0.3));
        let y = layer.apply(&mut g, x, None, &mut Dropout::Eval);
        assert_eq!(g.value(y).shape(), (5, 8));
        assert!(g.value(y).is_finite());
    }
}
