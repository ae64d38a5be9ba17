//! Text backbone, patch-based visual backbone, and the joint visual-lingual
//! encoder. All three are small trainable stacks behind a fixed interface;
//! captions are processed unpadded, so padding positions never attend or
//! contribute anywhere downstream.

use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::nn::{table_init, Dropout, EncoderLayer, LayerNorm, Linear};
use crate::tensor::Tensor;

pub struct TextEncoder {
    embed: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig, vocab_size: usize) -> Self {
        let d = cfg.hidden;
        let embed = store.add("text.embed", table_init(vocab_size, d, rng));
        let pos = store.add("text.pos", table_init(cfg.max_text_len, d, rng));
        let layers = (0..cfg.text_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("text.layer{i}"), d, d * cfg.ffn_mult))
            .collect();
        let final_norm = LayerNorm::new(store, "text.norm", d);
        TextEncoder { embed, pos, layers, final_norm, max_len: cfg.max_text_len }
    }

    /// Token features for the valid (unpadded) caption prefix.
    pub fn forward(&self, g: &mut Graph, token_ids: &[usize], drop: &mut Dropout) -> Result<NodeId> {
        if token_ids.is_empty() {
            return Err(Error::validation(None, "cannot encode an empty caption"));
        }
        if token_ids.len() > self.max_len {
            return Err(Error::validation(
                None,
                format!("caption length {} exceeds configured maximum {}", token_ids.len(), self.max_len),
            ));
        }
        let embed = g.param(self.embed);
        let tok = g.gather_rows(embed, token_ids);
        let pos = g.param(self.pos);
        let pos_rows: Vec<usize> = (0..token_ids.len()).collect();
        let pos = g.gather_rows(pos, &pos_rows);
        let mut x = g.add(tok, pos);
        for layer in &self.layers {
            x = layer.apply(g, x, None, drop);
        }
        Ok(self.final_norm.apply(g, x))
    }
}

pub struct ImageEncoder {
    proj: Linear,
    row_pos: ParamId,
    col_pos: ParamId,
    grid: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let grid = cfg.image_size / cfg.patch_size;
        let patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        ImageEncoder {
            proj: Linear::new(store, rng, "image.proj", patch_dim, d),
            row_pos: store.add("image.row_pos", table_init(grid, d, rng)),
            col_pos: store.add("image.col_pos", table_init(grid, d, rng)),
            grid,
        }
    }

    /// Patch features: linear projection plus learned 2-D (row + column)
    /// positional encoding. `patches` comes from [`crate::data::extract_patches`].
    pub fn forward(&self, g: &mut Graph, patches: &Tensor) -> Result<NodeId> {
        if patches.rows != self.grid * self.grid {
            return Err(Error::Config(format!(
                "expected {} patches, got {}",
                self.grid * self.grid,
                patches.rows
            )));
        }
        let pc = g.constant(patches.clone());
        let projected = self.proj.apply(g, pc);
        let rows_idx: Vec<usize> = (0..patches.rows).map(|p| p / self.grid).collect();
        let cols_idx: Vec<usize> = (0..patches.rows).map(|p| p % self.grid).collect();
        let row_pos = g.param(self.row_pos);
        let row_pos = g.gather_rows(row_pos, &rows_idx);
        let col_pos = g.param(self.col_pos);
        let col_pos = g.gather_rows(col_pos, &cols_idx);
        let x = g.add(projected, row_pos);
        Ok(g.add(x, col_pos))
    }
}

/// Joint encoder over the concatenated visual and text token streams. Learned
/// modality-type embeddings distinguish the streams; with zero layers the
/// output is exactly the inputs plus those type embeddings.
pub struct FusionEncoder {
    type_visual: ParamId,
    type_text: ParamId,
    layers: Vec<EncoderLayer>,
}

pub struct FusedFeatures {
    pub visual: NodeId,
    pub text: NodeId,
}

impl FusionEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        FusionEncoder {
            type_visual: store.add("fusion.type_visual", table_init(1, d, rng)),
            type_text: store.add("fusion.type_text", table_init(1, d, rng)),
            layers: (0..cfg.fusion_layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("fusion.layer{i}"), d, d * cfg.ffn_mult))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, visual: NodeId, text: NodeId, drop: &mut Dropout) -> Result<FusedFeatures> {
        let (dv, dt) = (g.value(visual).cols, g.value(text).cols);
        if dv != dt {
            return Err(Error::Config(format!("fusion hidden size mismatch ({dv} vs {dt})")));
        }
        let n_visual = g.value(visual).rows;
        let n_text = g.value(text).rows;
        let tv = g.param(self.type_visual);
        let tt = g.param(self.type_text);
        let visual = g.add_row_broadcast(visual, tv);
        let text = g.add_row_broadcast(text, tt);
        let mut joint = g.concat_rows(&[visual, text]);
        for layer in &self.layers {
            joint = layer.apply(g, joint, None, drop);
        }
        Ok(FusedFeatures {
            visual: g.slice_rows(joint, 0, n_visual),
            text: g.slice_rows(joint, n_visual, n_visual + n_text),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::raster::{extract_patches, Raster};
    use rand::SeedableRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            text_layers: 1,
            fusion_layers: 1,
            ffn_mult: 2,
            max_text_len: 10,
            image_size: 8,
            patch_size: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn text_shapes_and_length_guard() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &mut rng, &cfg, 12);
        let mut g = Graph::new(&store);
        let out = enc.forward(&mut g, &[2, 5, 7], &mut Dropout::Eval).unwrap();
        assert_eq!(g.value(out).shape(), (3, 8));
        let mut g = Graph::new(&store);
        assert!(enc.forward(&mut g, &vec![2; 11], &mut Dropout::Eval).is_err());
    }

    #[test]
    fn image_patch_count_and_zero_image() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, &mut rng, &cfg);
        let raster = Raster::new(8, 8, [0, 0, 0]);
        let patches = extract_patches(&raster.to_image(), 4).unwrap();
        let mut g = Graph::new(&store);
        let out = enc.forward(&mut g, &patches).unwrap();
        assert_eq!(g.value(out).shape(), (4, 8));
        // zero input with a zero bias: projection contributes nothing, the
        // output equals the positional encoding alone
        let mut g2 = Graph::new(&store);
        let rp = g2.param(enc.row_pos);
        let rp = g2.gather_rows(rp, &[0, 0, 1, 1]);
        let cp = g2.param(enc.col_pos);
        let cp = g2.gather_rows(cp, &[0, 1, 0, 1]);
        let pos_only = g2.add(rp, cp);
        assert_eq!(g.value(out), g2.value(pos_only));
    }

    #[test]
    fn zero_fusion_layers_is_type_embedding_shift() {
        let cfg = ModelConfig { fusion_layers: 0, ..tiny_cfg() };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let fusion = FusionEncoder::new(&mut store, &mut rng, &cfg);
        let vis_in = Tensor::from_fn(4, 8, |r, c| 0.1 * (r * 8 + c) as f64);
        let txt_in = Tensor::from_fn(3, 8, |r, c| -0.05 * (r + c) as f64);
        let mut g = Graph::new(&store);
        let v = g.constant(vis_in.clone());
        let t = g.constant(txt_in.clone());
        let fused = fusion.forward(&mut g, v, t, &mut Dropout::Eval).unwrap();
        let tv = store.get(fusion.type_visual).clone();
        let tt = store.get(fusion.type_text).clone();
        for r in 0..4 {
            for c in 0..8 {
                assert_eq!(g.value(fused.visual).get(r, c), vis_in.get(r, c) + tv.get(0, c));
            }
        }
        for r in 0..3 {
            for c in 0..8 {
                assert_eq!(g.value(fused.text).get(r, c), txt_in.get(r, c) + tt.get(0, c));
            }
        }
    }

    #[test]
    fn eval_passes_are_bit_identical() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &mut rng, &cfg, 12);
        let run = || {
            let mut g = Graph::new(&store);
            let out = enc.forward(&mut g, &[1, 2, 3, 4], &mut Dropout::Eval).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(), run());
    }
}
