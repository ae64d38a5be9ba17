//! Entity inter-relationship reasoning: a directed pair score matrix built
//! from an interaction-affinity feedforward (conditioned on the pooled visual
//! context) plus asymmetric subject/object projections, a relation count
//! head, and a gated modulation of the entity features by their average
//! relational strength.

use std::collections::BTreeSet;

use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::graph::{Graph, NodeId, ParamId, ParamStore};
use crate::nn::{xavier_uniform, Mlp};
use crate::tensor::Tensor;

pub struct RelationReasoner {
    inter: Mlp,
    w_subj: ParamId,
    w_obj: ParamId,
    count_head: Mlp,
    modulation: Mlp,
    gate: Mlp,
    hidden: usize,
}

impl RelationReasoner {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        RelationReasoner {
            inter: Mlp::new(store, rng, "eir.inter", &[3 * d, d, 1]),
            w_subj: store.add("eir.w_subj", xavier_uniform(d, d, rng)),
            w_obj: store.add("eir.w_obj", xavier_uniform(d, d, rng)),
            count_head: Mlp::new(store, rng, "eir.count_head", &[d, d, cfg.k_max_relations + 1]),
            modulation: Mlp::new(store, rng, "eir.modulation", &[1, d, d]),
            gate: Mlp::new(store, rng, "eir.gate", &[d, d, 1]),
            hidden: d,
        }
    }

    /// Directed pair scores, flattened row-major to an n^2 x 1 column.
    /// Diagonal cells are computed but carry no training signal and are
    /// never selectable.
    pub fn score(&self, g: &mut Graph, queries: NodeId, fused_visual: NodeId) -> NodeId {
        let n = g.value(queries).rows;
        let p = g.value(fused_visual).rows;
        let pool = g.constant(Tensor::filled(1, p, 1.0 / p as f64));
        let v_bar = g.matmul(pool, fused_visual);

        // interaction affinity on [Q_i ; Q_j ; v_bar]
        let mut pair_rows = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let qi = g.slice_rows(queries, i, i + 1);
                let qj = g.slice_rows(queries, j, j + 1);
                pair_rows.push(g.concat_cols(&[qi, qj, v_bar]));
            }
        }
        let pairs = g.concat_rows(&pair_rows);
        let a_inter = self.inter.apply(g, pairs);

        // asymmetric subject-object matching
        let ws = g.param(self.w_subj);
        let wo = g.param(self.w_obj);
        let subj = g.matmul(queries, ws);
        let obj = g.matmul(queries, wo);
        let obj_t = g.transpose(obj);
        let match_mat = g.matmul(subj, obj_t);
        let match_mat = g.scale(match_mat, 1.0 / (self.hidden as f64).sqrt());
        let match_flat = g.reshape(match_mat, n * n, 1);

        g.add(a_inter, match_flat)
    }

    /// K_max + 1 relation-count logits from mean-pooled entity features.
    pub fn count(&self, g: &mut Graph, queries: NodeId) -> NodeId {
        let n = g.value(queries).rows;
        let pool = g.constant(Tensor::filled(1, n, 1.0 / n as f64));
        let pooled = g.matmul(pool, queries);
        self.count_head.apply(g, pooled)
    }

    /// Gated additive update: each entity is shifted by a learned function of
    /// its mean off-diagonal relational strength (row i and column i pooled).
    pub fn modulate(&self, g: &mut Graph, queries: NodeId, scores_flat: NodeId) -> NodeId {
        let n = g.value(queries).rows;
        let pooled = if n == 1 {
            g.constant(Tensor::zeros(1, 1))
        } else {
            // constant selector summing row i and column i, diagonal excluded
            let mut sel = Tensor::zeros(n, n * n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        sel.data[i * n * n + i * n + j] += 1.0;
                        sel.data[i * n * n + j * n + i] += 1.0;
                    }
                }
            }
            let sel = g.constant(sel);
            let sums = g.matmul(sel, scores_flat);
            g.scale(sums, 1.0 / (2 * (n - 1)) as f64)
        };
        let m = self.modulation.apply(g, pooled);
        let gates = self.gate.apply(g, queries);
        let gates = g.sigmoid(gates);
        let shift = g.scale_rows(m, gates);
        g.add(queries, shift)
    }
}

/// The k best-scoring off-diagonal cells, ties broken in row-major order.
/// Out-of-range k is clamped (with a warning on stderr).
pub fn select_top_k(scores: &Tensor, k: usize) -> BTreeSet<(usize, usize)> {
    assert_eq!(scores.rows, scores.cols, "relation matrix must be square");
    let n = scores.rows;
    let max_k = n * (n - 1);
    let k = if k > max_k {
        eprintln!("warning: requested top-{k} relations but only {max_k} are selectable; clamping");
        max_k
    } else {
        k
    };
    let mut cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j)
        .collect();
    // stable sort keeps row-major order among equal scores
    cells.sort_by(|a, b| {
        scores.get(b.0, b.1).partial_cmp(&scores.get(a.0, a.1)).expect("finite scores")
    });
    cells.into_iter().take(k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GradStore;
    use rand::SeedableRng;

    fn setup(hidden: usize, k_max: usize) -> (ParamStore, RelationReasoner) {
        let cfg = ModelConfig { hidden, k_max_relations: k_max, ..ModelConfig::default() };
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let r = RelationReasoner::new(&mut store, &mut rng, &cfg);
        (store, r)
    }

    #[test]
    fn top_k_worked_example() {
        let scores = Tensor::from_vec(3, 3, vec![0.0, 2.0, 0.5, 1.0, 0.0, 0.3, 0.1, 0.2, 0.0]);
        let picked = select_top_k(&scores, 2);
        assert_eq!(picked, BTreeSet::from([(0, 1), (1, 0)]));
        assert!(select_top_k(&scores, 0).is_empty());
        assert_eq!(select_top_k(&scores, 6).len(), 6);
    }

    #[test]
    fn top_k_tie_break_is_row_major() {
        let scores = Tensor::from_vec(3, 3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let picked = select_top_k(&scores, 3);
        assert_eq!(picked, BTreeSet::from([(0, 1), (0, 2), (1, 0)]));
    }

    #[test]
    fn single_entity_matrix_is_degenerate() {
        let (store, r) = setup(8, 4);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::from_fn(1, 8, |_, c| 0.1 * c as f64));
        let vis = g.constant(Tensor::from_fn(4, 8, |r_, c| 0.01 * (r_ + c) as f64));
        let s = r.score(&mut g, q, vis);
        assert_eq!(g.value(s).shape(), (1, 1));
        assert!(select_top_k(&Tensor::scalar(0.3), 0).is_empty());
    }

    #[test]
    fn count_is_permutation_invariant() {
        let (store, r) = setup(8, 4);
        let q_val = Tensor::from_fn(3, 8, |r_, c| (r_ * 8 + c) as f64 * 0.05 - 0.4);
        let perm = [2usize, 0, 1];
        let permuted = Tensor::from_fn(3, 8, |r_, c| q_val.get(perm[r_], c));
        let run = |v: &Tensor| {
            let mut g = Graph::new(&store);
            let q = g.constant(v.clone());
            let c = r.count(&mut g, q);
            g.value(c).clone()
        };
        let a = run(&q_val);
        let b = run(&permuted);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_are_asymmetric_on_random_parameters() {
        let (store, r) = setup(8, 4);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::from_fn(2, 8, |r_, c| ((r_ * 13 + c * 7) % 11) as f64 * 0.1 - 0.5));
        let vis = g.constant(Tensor::from_fn(4, 8, |r_, c| 0.02 * (r_ * 8 + c) as f64));
        let s = r.score(&mut g, q, vis);
        let v = g.value(s);
        // row-major flat: (0,1) at index 1, (1,0) at index 2
        assert_ne!(v.data[1], v.data[2]);
    }

    #[test]
    fn zero_scores_and_zero_modulation_bias_leave_queries_unchanged() {
        let (mut store, r) = setup(8, 4);
        // zero the modulation MLP so m == 0
        for i in 0..r.modulation.layers.len() {
            let (w, b) = (r.modulation.layers[i].w, r.modulation.layers[i].b);
            store.get_mut(w).data.fill(0.0);
            store.get_mut(b).data.fill(0.0);
        }
        let mut g = Graph::new(&store);
        let q_val = Tensor::from_fn(3, 8, |r_, c| 0.3 * (r_ + 1) as f64 - 0.1 * c as f64);
        let q = g.constant(q_val.clone());
        let scores = g.constant(Tensor::zeros(9, 1));
        let out = r.modulate(&mut g, q, scores);
        assert_eq!(g.value(out), &q_val);
    }

    #[test]
    fn gate_bounds_modulation_shift() {
        let (store, r) = setup(8, 4);
        let mut g = Graph::new(&store);
        let q_val = Tensor::from_fn(2, 8, |r_, c| 0.2 * (r_ * 8 + c) as f64 - 0.7);
        let q = g.constant(q_val.clone());
        let scores = g.constant(Tensor::from_fn(4, 1, |r_, _| r_ as f64 * 0.5 - 1.0));
        let out = r.modulate(&mut g, q, scores);
        let m_norms: Vec<f64> = {
            // recompute m alone
            let mut g2 = Graph::new(&store);
            let mut sel = Tensor::zeros(2, 4);
            for i in 0..2 {
                for j in 0..2 {
                    if i != j {
                        sel.data[i * 4 + i * 2 + j] += 1.0;
                        sel.data[i * 4 + j * 2 + i] += 1.0;
                    }
                }
            }
            let sel = g2.constant(sel);
            let sc = g2.constant(Tensor::from_fn(4, 1, |r_, _| r_ as f64 * 0.5 - 1.0));
            let sums = g2.matmul(sel, sc);
            let pooled = g2.scale(sums, 0.5);
            let m = r.modulation.apply(&mut g2, pooled);
            (0..2)
                .map(|i| g2.value(m).row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        };
        for i in 0..2 {
            let shift: f64 = (0..8)
                .map(|c| {
                    let d = g.value(out).get(i, c) - q_val.get(i, c);
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            assert!(shift <= m_norms[i] + 1e-12, "shift {shift} exceeds |m| {}", m_norms[i]);
        }
    }

    #[test]
    fn modulate_backward_is_finite() {
        let (store, r) = setup(8, 4);
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::from_fn(3, 8, |r_, c| 0.1 * (r_ * 8 + c) as f64 - 0.9));
        let vis = g.constant(Tensor::from_fn(4, 8, |r_, c| 0.05 * (r_ + c) as f64));
        let s = r.score(&mut g, q, vis);
        let qr = r.modulate(&mut g, q, s);
        let sq = g.mul(qr, qr);
        let loss = g.sum_all(sq);
        let mut grads = GradStore::zeros_like(&store);
        g.backward(loss, &mut grads);
        assert!(grads.is_finite());
    }
}
