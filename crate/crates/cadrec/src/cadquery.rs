//! Query construction: position selection by image-text similarity,
//! text-dynamic content init, and density-feature cross-attention init.
//!
//! Content init alone is a pure function of the expression, so two scenes
//! sharing an expression would start from identical queries; gathering
//! the density features at the selected positions and cross-attending to
//! them injects the image into the query state before decoding.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::params::ParamStore;
use crate::scenegen::{TextFeatures, TokenRole, NUM_LEVELS};
use crate::{Error, Result};

/// One selected cell: pyramid level, flat cell index, and the cell-center
/// position normalised to the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPosition {
    pub level: usize,
    pub cell: usize,
    pub norm_xy: (f64, f64),
}

/// Selected positions in descending-score order with their scores.
#[derive(Clone, Debug)]
pub struct QueryPositions {
    pub positions: Vec<QueryPosition>,
    pub scores: Vec<f64>,
}

/// Registers the base content table `{prefix}.q [K, C]`.
pub fn init_queries(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    k: usize,
    c: usize,
) -> Result<()> {
    if k == 0 || c == 0 {
        return Err(Error::invalid("cadquery::init_queries", "zero K or C"));
    }
    let std = (2.0 / (k + c) as f64).sqrt();
    let mut q = crate::tensor::Tensor::zeros(vec![k, c]);
    for v in q.data_mut() {
        *v = nn::gaussian(rng) * std;
    }
    store.insert(&format!("{prefix}.q"), q)
}

/// Registers the dynamic text matrix `{prefix}.m [C, C]`.
pub fn init_text_mixer(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    let mut m = crate::tensor::Tensor::zeros(vec![c, c]);
    let m_std = (2.0 / (2 * c) as f64).sqrt();
    for v in m.data_mut() {
        *v = nn::gaussian(rng) * m_std;
    }
    store.insert(&format!("{prefix}.m"), m)
}

/// Registers the density-init cross-attention under `{prefix}.dinit.`.
pub fn init_density_mixer(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    nn::init_mha(store, rng, &format!("{prefix}.dinit"), c, false)
}

/// Registers the base content table `{prefix}.q [K, C]`, the dynamic text
/// matrix `{prefix}.m [C, C]`, and the density-init cross-attention
/// projections under `{prefix}.dinit.`.
pub fn init_query_path(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    k: usize,
    c: usize,
) -> Result<()> {
    init_queries(store, rng, prefix, k, c)?;
    init_text_mixer(store, rng, prefix, c)?;
    init_density_mixer(store, rng, prefix, c)
}

/// Scores every pyramid cell as the max dot product against any non-pad
/// token and keeps the top `k`, ties broken by (level, cell index).
/// Positions are read from node values; selection is not differentiated.
pub fn select_query_positions(
    g: &Graph,
    f_hat: &[NodeId; NUM_LEVELS],
    text: &TextFeatures,
    k: usize,
) -> Result<QueryPositions> {
    let n_real = text.n_real();
    if n_real == 0 {
        return Err(Error::invalid(
            "cadquery::select_query_positions",
            "expression has no non-pad tokens",
        ));
    }
    let c = text.features.shape()[1];
    let total: usize = f_hat
        .iter()
        .map(|l| g.value(*l).shape()[0] * g.value(*l).shape()[1])
        .sum();
    if k == 0 || k > total {
        return Err(Error::Invalid {
            context: "cadquery::select_query_positions",
            message: format!("K={k} outside 1..={total} available cells"),
        });
    }
    let mut scored: Vec<(f64, usize, usize, (f64, f64))> = Vec::with_capacity(total);
    for (lvl, node) in f_hat.iter().enumerate() {
        let t = g.value(*node);
        let (h, w, tc) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if tc != c {
            return Err(Error::ShapeMismatch {
                context: "cadquery::select_query_positions",
                expected: vec![h, w, c],
                got: t.shape().to_vec(),
            });
        }
        for cy in 0..h {
            for cx in 0..w {
                let mut best = f64::NEG_INFINITY;
                for tok in 0..n_real {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        dot += t.at3(cy, cx, ch) * text.features.at2(tok, ch);
                    }
                    best = best.max(dot);
                }
                let cell = cy * w + cx;
                let norm = ((cx as f64 + 0.5) / w as f64, (cy as f64 + 0.5) / h as f64);
                scored.push((best, lvl, cell, norm));
            }
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    scored.truncate(k);
    Ok(QueryPositions {
        positions: scored
            .iter()
            .map(|(_, lvl, cell, norm)| QueryPosition {
                level: *lvl,
                cell: *cell,
                norm_xy: *norm,
            })
            .collect(),
        scores: scored.iter().map(|(s, ..)| *s).collect(),
    })
}

/// Content init from the expression alone:
/// `T' = GELU(F_t M)`, `W = Q T'ᵀ`, `Q̇ = W F_t`.
/// Pad rows of `F_t` are zero, so they contribute nothing to any query.
pub fn text_init(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    text: NodeId,
) -> Result<NodeId> {
    let q = g.param(store, &format!("{prefix}.q"))?;
    let m = g.param(store, &format!("{prefix}.m"))?;
    let tm = g.matmul(text, m)?;
    let t_prime = g.gelu(tm)?;
    let tt = g.transpose(t_prime)?;
    let w = g.matmul(q, tt)?;
    g.matmul(w, text)
}

/// Rows of the density features at the selected positions, `[K, C]`,
/// gathered in query order so gradients flow back into the levels.
pub fn gather_cad(
    g: &mut Graph,
    d_levels: &[NodeId; NUM_LEVELS],
    positions: &[QueryPosition],
) -> Result<NodeId> {
    if positions.is_empty() {
        return Err(Error::invalid("cadquery::gather_cad", "no positions"));
    }
    let c = g.value(d_levels[0]).shape()[2];
    let mut flats = Vec::with_capacity(NUM_LEVELS);
    for node in d_levels {
        let s = g.value(*node).shape().to_vec();
        flats.push(g.reshape(*node, vec![s[0] * s[1], s[2]])?);
    }
    // gather per level in query order, then permute the stacked blocks
    // back to query order with one more gather
    let mut per_level_rows: Vec<Vec<usize>> = vec![Vec::new(); NUM_LEVELS];
    for (qi, p) in positions.iter().enumerate() {
        if p.level >= NUM_LEVELS {
            return Err(Error::invalid("cadquery::gather_cad", "level out of range"));
        }
        let cells = g.value(flats[p.level]).shape()[0];
        if p.cell >= cells {
            return Err(Error::Invalid {
                context: "cadquery::gather_cad",
                message: format!("cell {} out of range for level {} ({cells})", p.cell, qi),
            });
        }
        per_level_rows[p.level].push(p.cell);
    }
    let mut blocks = Vec::new();
    let mut block_offset = [0usize; NUM_LEVELS];
    let mut offset = 0;
    for lvl in 0..NUM_LEVELS {
        if per_level_rows[lvl].is_empty() {
            continue;
        }
        block_offset[lvl] = offset;
        offset += per_level_rows[lvl].len();
        blocks.push(g.gather_rows(flats[lvl], per_level_rows[lvl].clone())?);
    }
    let stacked = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat_first(&blocks)?
    };
    let mut seen = [0usize; NUM_LEVELS];
    let mut perm = Vec::with_capacity(positions.len());
    for p in positions {
        perm.push(block_offset[p.level] + seen[p.level]);
        seen[p.level] += 1;
    }
    let out = g.gather_rows(stacked, perm)?;
    debug_assert_eq!(g.value(out).shape(), &[positions.len(), c]);
    Ok(out)
}

/// One cross-attention layer over the gathered density features with a
/// residual from the content-initialised queries.
pub fn density_init(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_dot: NodeId,
    d_k: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let (qs, ds) = (g.value(q_dot).shape(), g.value(d_k).shape());
    if qs != ds {
        return Err(Error::ShapeMismatch {
            context: "cadquery::density_init",
            expected: qs.to_vec(),
            got: ds.to_vec(),
        });
    }
    let attended = nn::multi_head_attention(
        g,
        store,
        &format!("{prefix}.dinit"),
        q_dot,
        d_k,
        d_k,
        heads,
    )?;
    g.add(q_dot, attended)
}

/// Count of non-pad tokens, shared by the query and decoder text paths.
pub fn real_token_count(text: &TextFeatures) -> usize {
    text.roles.iter().filter(|r| **r != TokenRole::Pad).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::gradcheck;
    use crate::nn::gaussian;
    use crate::scenegen::{embed_expression, Expression, Vocab};
    use crate::tensor::Tensor;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| gaussian(rng)).collect()).unwrap()
    }

    fn noise_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, amp: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * amp).collect(),
        )
        .unwrap()
    }

    fn text_fixture(c: usize) -> TextFeatures {
        let vocab = Vocab::build(2, 3, c, 7).unwrap();
        let expr = Expression::new(0, [0].into_iter().collect(), &vocab, 4).unwrap();
        embed_expression(&expr, &vocab).unwrap()
    }

    fn pyramid(g: &mut Graph, rng: &mut ChaCha8Rng, c: usize, amp: f64) -> [NodeId; NUM_LEVELS] {
        let mut nodes = Vec::new();
        for i in 0..NUM_LEVELS {
            let t = noise_tensor(rng, vec![8 >> i, 8 >> i, c], amp);
            nodes.push(g.input(t).unwrap());
        }
        [nodes[0], nodes[1], nodes[2], nodes[3]]
    }

    #[test]
    fn k_equal_to_total_cells_selects_everything() {
        let c = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let f_hat = pyramid(&mut g, &mut rng, c, 1.0);
        let text = text_fixture(c);
        let total = 64 + 16 + 4 + 1;
        let qp = select_query_positions(&g, &f_hat, &text, total).unwrap();
        assert_eq!(qp.positions.len(), total);
        let mut seen = std::collections::BTreeSet::new();
        for p in &qp.positions {
            assert!(seen.insert((p.level, p.cell)), "duplicate position");
        }
        for w in qp.scores.windows(2) {
            assert!(w[0] >= w[1], "scores not descending");
        }
        assert!(select_query_positions(&g, &f_hat, &text, total + 1).is_err());
    }

    #[test]
    fn dominant_cell_is_ranked_first_at_any_level() {
        let c = 8;
        let text = text_fixture(c);
        for boosted_level in 0..NUM_LEVELS {
            let mut rng = ChaCha8Rng::seed_from_u64(33 + boosted_level as u64);
            let mut g = Graph::new();
            let mut nodes = Vec::new();
            for i in 0..NUM_LEVELS {
                let mut t = noise_tensor(&mut rng, vec![8 >> i, 8 >> i, c], 0.05);
                if i == boosted_level {
                    // cell 0 of this level gets 10x a token embedding
                    for ch in 0..c {
                        t.data_mut()[ch] = 10.0 * text.features.at2(1, ch);
                    }
                }
                nodes.push(g.input(t).unwrap());
            }
            let f_hat = [nodes[0], nodes[1], nodes[2], nodes[3]];
            let qp = select_query_positions(&g, &f_hat, &text, 5).unwrap();
            assert_eq!(qp.positions[0].level, boosted_level);
            assert_eq!(qp.positions[0].cell, 0);
            assert!(qp.scores[0] > qp.scores[1] + 5.0);
        }
    }

    #[test]
    fn ties_break_by_level_then_cell() {
        let c = 4;
        let mut g = Graph::new();
        let mk = |g: &mut Graph, h: usize| g.input(Tensor::full(vec![h, h, c], 0.25)).unwrap();
        let f_hat = [mk(&mut g, 8), mk(&mut g, 4), mk(&mut g, 2), mk(&mut g, 1)];
        let vocab = Vocab::build(1, 2, c, 3).unwrap();
        let expr = Expression::new(0, [0].into_iter().collect(), &vocab, 4).unwrap();
        let text = embed_expression(&expr, &vocab).unwrap();
        let qp = select_query_positions(&g, &f_hat, &text, 70).unwrap();
        for (i, p) in qp.positions.iter().take(64).enumerate() {
            assert_eq!((p.level, p.cell), (0, i));
        }
        for (i, p) in qp.positions.iter().skip(64).enumerate() {
            assert_eq!((p.level, p.cell), (1, i));
        }
    }

    #[test]
    fn normalised_positions_are_cell_centers() {
        let c = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let f_hat = pyramid(&mut g, &mut rng, c, 1.0);
        let vocab = Vocab::build(1, 2, c, 3).unwrap();
        let expr = Expression::new(0, [0].into_iter().collect(), &vocab, 4).unwrap();
        let text = embed_expression(&expr, &vocab).unwrap();
        let qp = select_query_positions(&g, &f_hat, &text, 85).unwrap();
        for p in &qp.positions {
            let w = 8 >> p.level;
            let (cy, cx) = (p.cell / w, p.cell % w);
            assert!((p.norm_xy.0 - (cx as f64 + 0.5) / w as f64).abs() < 1e-15);
            assert!((p.norm_xy.1 - (cy as f64 + 0.5) / w as f64).abs() < 1e-15);
            assert!(p.norm_xy.0 > 0.0 && p.norm_xy.0 < 1.0);
            assert!(p.norm_xy.1 > 0.0 && p.norm_xy.1 < 1.0);
        }
    }

    fn query_store(k: usize, c: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_query_path(&mut store, &mut rng, "query", k, c).unwrap();
        store
    }

    #[test]
    fn zero_m_collapses_content_init_to_zero() {
        let c = 6;
        let mut store = query_store(4, c, 8);
        store.set_value("query.m", Tensor::zeros(vec![c, c])).unwrap();
        let text = text_fixture(c);
        let mut g = Graph::new();
        let tn = g.input(text.features.clone()).unwrap();
        let q_dot = text_init(&mut g, &store, "query", tn).unwrap();
        assert_eq!(g.value(q_dot).shape(), &[4, c]);
        assert!(g.value(q_dot).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_content_init_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        store.insert("query.q", Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        store.insert("query.m", Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let tn = g.input(Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let q_dot = text_init(&mut g, &store, "query", tn).unwrap();
        // closed form with the tanh approximation
        let x: f64 = 3.0;
        let t_prime = 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh());
        let w = 2.0 * t_prime;
        let want = w * 3.0;
        let got = g.value(q_dot).item().unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((t_prime - 2.9964).abs() < 1e-3);
        assert!((got - 17.978).abs() < 5e-3);
    }

    #[test]
    fn content_init_depends_on_the_expression_not_the_scene() {
        let c = 8;
        let store = query_store(5, c, 10);
        let vocab = Vocab::build(2, 3, c, 7).unwrap();
        let e1 = Expression::new(0, [0].into_iter().collect(), &vocab, 4).unwrap();
        let e2 = Expression::new(1, [4].into_iter().collect(), &vocab, 4).unwrap();
        let t1 = embed_expression(&e1, &vocab).unwrap();
        let t2 = embed_expression(&e2, &vocab).unwrap();
        let run = |text: &TextFeatures| {
            let mut g = Graph::new();
            let tn = g.input(text.features.clone()).unwrap();
            let q = text_init(&mut g, &store, "query", tn).unwrap();
            g.value(q).data().to_vec()
        };
        // same expression -> bitwise identical contents, on repeat runs
        assert_eq!(run(&t1), run(&t1));
        // different expression -> different contents even with shared Q
        assert_ne!(run(&t1), run(&t2));
    }

    #[test]
    fn gather_matches_naive_lookup() {
        let c = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut g = Graph::new();
        let d = pyramid(&mut g, &mut rng, c, 1.0);
        let positions = vec![
            QueryPosition { level: 2, cell: 3, norm_xy: (0.5, 0.5) },
            QueryPosition { level: 0, cell: 17, norm_xy: (0.1, 0.1) },
            QueryPosition { level: 0, cell: 2, norm_xy: (0.3, 0.1) },
            QueryPosition { level: 3, cell: 0, norm_xy: (0.5, 0.5) },
            QueryPosition { level: 0, cell: 17, norm_xy: (0.1, 0.1) },
        ];
        let d_k = gather_cad(&mut g, &d, &positions).unwrap();
        let got = g.value(d_k).clone();
        assert_eq!(got.shape(), &[5, c]);
        for (qi, p) in positions.iter().enumerate() {
            let level = g.value(d[p.level]);
            let w = level.shape()[1];
            let (cy, cx) = (p.cell / w, p.cell % w);
            for ch in 0..c {
                assert_eq!(got.at2(qi, ch), level.at3(cy, cx, ch), "query {qi}");
            }
        }
        // all-zero density features gather to zero rows
        let zeros = |g: &mut Graph, h: usize| g.input(Tensor::zeros(vec![h, h, c])).unwrap();
        let dz = [
            zeros(&mut g, 8),
            zeros(&mut g, 4),
            zeros(&mut g, 2),
            zeros(&mut g, 1),
        ];
        let z = gather_cad(&mut g, &dz, &positions).unwrap();
        assert!(g.value(z).data().iter().all(|v| *v == 0.0));
        // out-of-range cell
        let bad = vec![QueryPosition { level: 3, cell: 1, norm_xy: (0.5, 0.5) }];
        assert!(gather_cad(&mut g, &d, &bad).is_err());
    }

    #[test]
    fn zero_density_rows_leave_queries_unchanged_at_init() {
        let (k, c) = (4, 8);
        let store = query_store(k, c, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q_dot_t = rand_tensor(&mut rng, vec![k, c]);
        let mut g = Graph::new();
        let q_dot = g.input(q_dot_t.clone()).unwrap();
        let d_k = g.input(Tensor::zeros(vec![k, c])).unwrap();
        let q_hat = density_init(&mut g, &store, "query", q_dot, d_k, 2).unwrap();
        assert_eq!(g.value(q_hat).data(), q_dot_t.data());
    }

    #[test]
    fn single_key_attention_reduces_to_value_projection() {
        let (k, c) = (1, 6);
        let store = query_store(k, c, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q_dot_t = rand_tensor(&mut rng, vec![1, c]);
        let d_k_t = rand_tensor(&mut rng, vec![1, c]);
        let mut g = Graph::new();
        let q_dot = g.input(q_dot_t.clone()).unwrap();
        let d_k = g.input(d_k_t.clone()).unwrap();
        let q_hat = density_init(&mut g, &store, "query", q_dot, d_k, 2).unwrap();
        // with one key the softmax weight is 1 regardless of the scores,
        // so the output is wo(wv(d)) + q_dot exactly
        let mut g2 = Graph::new();
        let dn = g2.input(d_k_t).unwrap();
        let v = nn::linear(&mut g2, &store, "query.dinit.wv", dn).unwrap();
        let o = nn::linear(&mut g2, &store, "query.dinit.wo", v).unwrap();
        let qn = g2.input(q_dot_t).unwrap();
        let want = g2.add(qn, o).unwrap();
        for (a, b) in g.value(q_hat).data().iter().zip(g2.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn different_density_rows_separate_equal_queries() {
        let (k, c) = (6, 8);
        let store = query_store(k, c, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let q_dot_t = rand_tensor(&mut rng, vec![k, c]);
        let mut cosines = Vec::new();
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..10 {
            let d_k_t = rand_tensor(&mut rng, vec![k, c]);
            let mut g = Graph::new();
            let q_dot = g.input(q_dot_t.clone()).unwrap();
            let d_k = g.input(d_k_t).unwrap();
            let q_hat = density_init(&mut g, &store, "query", q_dot, d_k, 2).unwrap();
            let flat = g.value(q_hat).data().to_vec();
            if let Some(p) = prev.take() {
                let dot: f64 = p.iter().zip(&flat).map(|(a, b)| a * b).sum();
                let na: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
                cosines.push(1.0 - dot / (na * nb));
            }
            prev = Some(flat);
        }
        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
        assert!(mean > 0.01, "mean pairwise cosine distance {mean}");
    }

    #[test]
    fn query_path_parameters_pass_grad_check() {
        let (k, c) = (3, 4);
        let mut store = query_store(k, c, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        gradcheck::jitter_params(&mut store, &mut rng, 0.05);
        let text_t = rand_tensor(&mut rng, vec![4, c]);
        let d_k_t = rand_tensor(&mut rng, vec![k, c]);
        for path in ["query.q", "query.m", "query.dinit.wq.w", "query.dinit.wv.w", "query.dinit.wo.b"] {
            let err = gradcheck::grad_check_param(
                &store,
                path,
                |g, st| {
                    let tn = g.input(text_t.clone())?;
                    let q_dot = text_init(g, st, "query", tn)?;
                    let d_k = g.input(d_k_t.clone())?;
                    let q_hat = density_init(g, st, "query", q_dot, d_k, 2)?;
                    let sq = g.mul(q_hat, q_hat)?;
                    g.sum(sq)
                },
                gradcheck::DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "{path}: {err}");
        }
    }
}
