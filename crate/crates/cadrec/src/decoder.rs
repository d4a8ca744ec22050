//! Query decoder and prediction heads.
//!
//! Each block runs query self-attention, cross-attention over the
//! flattened visual pyramid (sinusoidal position-and-level encodings are
//! added to the keys only), cross-attention over the non-pad text
//! tokens, and a two-layer FFN. Sublayers are pre-norm residuals:
//! `x + f(norm(x))`, with no final norm, so a zero-depth decoder or
//! zeroed output projections leave the queries bit-identical.

use rand::Rng;

use crate::cadquery::QueryPosition;
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::params::ParamStore;
use crate::scenegen::NUM_LEVELS;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Extracted per-query predictions: points in the unit square and
/// per-token probabilities with pad columns exactly zero.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    pub points: Tensor,
    pub probs: Tensor,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.points.shape()[0]
    }
}

/// Prediction head nodes still attached to the graph.
pub struct PredictionNodes {
    pub points: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Registers `blocks` decoder blocks under `{prefix}.b{i}.`.
pub fn init_decoder(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    c: usize,
    blocks: usize,
) -> Result<()> {
    for b in 0..blocks {
        let bp = format!("{prefix}.b{b}");
        nn::init_mha(store, rng, &format!("{bp}.self"), c, false)?;
        nn::init_mha(store, rng, &format!("{bp}.vis"), c, false)?;
        nn::init_mha(store, rng, &format!("{bp}.txt"), c, false)?;
        for n in 1..=4 {
            nn::init_layer_norm(store, &format!("{bp}.n{n}"), c)?;
        }
        nn::init_mlp(store, rng, &format!("{bp}.ffn"), &[c, 2 * c, c])?;
    }
    Ok(())
}

/// Registers the point-offset head (final layer zeroed, so points start
/// at their reference positions) and the token-logit projection.
pub fn init_heads(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, c: usize) -> Result<()> {
    nn::init_linear(store, rng, &format!("{prefix}.point.l0"), c, c, false)?;
    nn::init_linear(store, rng, &format!("{prefix}.point.l1"), c, 2, true)?;
    nn::init_linear(store, rng, &format!("{prefix}.cls"), c, c, false)?;
    Ok(())
}

/// Sinusoidal encodings for every pyramid cell, `[total_cells, C]`,
/// ordered level-major then row-major, matching the flattened key order.
/// Each frequency quad encodes (sin x, cos x, sin y, cos y) of the cell
/// center; the lowest quad additionally carries the level phase.
pub fn visual_position_encodings(shapes: &[(usize, usize); NUM_LEVELS], c: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(Error::Invalid {
            context: "decoder::visual_position_encodings",
            message: format!("channel width {c} must be divisible by 4"),
        });
    }
    let total: usize = shapes.iter().map(|(h, w)| h * w).sum();
    let mut out = Tensor::zeros(vec![total, c]);
    let quads = c / 4;
    let tau = std::f64::consts::TAU;
    let mut row = 0;
    for (level, (h, w)) in shapes.iter().enumerate() {
        let lvl_hat = (level as f64 + 0.5) / NUM_LEVELS as f64;
        for cy in 0..*h {
            for cx in 0..*w {
                let xn = (cx as f64 + 0.5) / *w as f64;
                let yn = (cy as f64 + 0.5) / *h as f64;
                for m in 0..quads {
                    let omega = 10000f64.powf(-(4.0 * m as f64) / c as f64);
                    let base = row * c + 4 * m;
                    out.data_mut()[base] = (tau * xn * omega).sin();
                    out.data_mut()[base + 1] = (tau * xn * omega).cos();
                    out.data_mut()[base + 2] = (tau * yn * omega).sin();
                    out.data_mut()[base + 3] = (tau * yn * omega).cos();
                }
                let base = row * c;
                out.data_mut()[base] += (std::f64::consts::PI * lvl_hat).sin();
                out.data_mut()[base + 1] += (std::f64::consts::PI * lvl_hat).cos();
                out.data_mut()[base + 2] += (tau * lvl_hat).sin();
                out.data_mut()[base + 3] += (tau * lvl_hat).cos();
                row += 1;
            }
        }
    }
    Ok(out)
}

/// Runs `blocks` decoder blocks over the query contents.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    contents: NodeId,
    f_hat: &[NodeId; NUM_LEVELS],
    text: NodeId,
    n_real: usize,
    blocks: usize,
    heads: usize,
) -> Result<NodeId> {
    if n_real == 0 {
        return Err(Error::invalid(
            "decoder::decoder_forward",
            "expression has no non-pad tokens",
        ));
    }
    let c = g.value(contents).shape()[1];
    let mut shapes = [(0usize, 0usize); NUM_LEVELS];
    let mut flats = Vec::with_capacity(NUM_LEVELS);
    for (i, node) in f_hat.iter().enumerate() {
        let s = g.value(*node).shape().to_vec();
        shapes[i] = (s[0], s[1]);
        flats.push(g.reshape(*node, vec![s[0] * s[1], s[2]])?);
    }
    let cells = g.concat_first(&flats)?;
    let pe = g.constant(visual_position_encodings(&shapes, c)?)?;
    let keys = g.add(cells, pe)?;
    let text_real = g.gather_rows(text, (0..n_real).collect())?;

    let mut x = contents;
    for b in 0..blocks {
        let bp = format!("{prefix}.b{b}");
        let n1 = nn::layer_norm(g, store, &format!("{bp}.n1"), x)?;
        let sa = nn::multi_head_attention(g, store, &format!("{bp}.self"), n1, n1, n1, heads)?;
        x = g.add(x, sa)?;
        let n2 = nn::layer_norm(g, store, &format!("{bp}.n2"), x)?;
        let va = nn::multi_head_attention(g, store, &format!("{bp}.vis"), n2, keys, cells, heads)?;
        x = g.add(x, va)?;
        let n3 = nn::layer_norm(g, store, &format!("{bp}.n3"), x)?;
        let ta = nn::multi_head_attention(
            g,
            store,
            &format!("{bp}.txt"),
            n3,
            text_real,
            text_real,
            heads,
        )?;
        x = g.add(x, ta)?;
        let n4 = nn::layer_norm(g, store, &format!("{bp}.n4"), x)?;
        let ff = nn::mlp(g, store, &format!("{bp}.ffn"), n4, 2)?;
        x = g.add(x, ff)?;
    }
    Ok(x)
}

fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// `p̂ = sigmoid(inverse_sigmoid(reference) + offset(content))`: offset
/// regression around each query's cell center, always inside (0,1)².
pub fn predict_points(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    contents: NodeId,
    positions: &[QueryPosition],
) -> Result<NodeId> {
    let k = g.value(contents).shape()[0];
    if positions.len() != k {
        return Err(Error::Invalid {
            context: "decoder::predict_points",
            message: format!("{k} content rows but {} positions", positions.len()),
        });
    }
    let mut ref_logits = Tensor::zeros(vec![k, 2]);
    for (i, p) in positions.iter().enumerate() {
        ref_logits.data_mut()[2 * i] = inverse_sigmoid(p.norm_xy.0);
        ref_logits.data_mut()[2 * i + 1] = inverse_sigmoid(p.norm_xy.1);
    }
    let refs = g.constant(ref_logits)?;
    let h = nn::linear(g, store, &format!("{prefix}.point.l0"), contents)?;
    let h = g.relu(h)?;
    let offset = nn::linear(g, store, &format!("{prefix}.point.l1"), h)?;
    let logits = g.add(refs, offset)?;
    g.sigmoid(logits)
}

/// Token logits `dot(proj(content_k), token_i)/sqrt(C)` and probabilities
/// `sigmoid(logits)` with pad columns forced to exactly zero.
pub fn predict_logits(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    contents: NodeId,
    text: NodeId,
    n_real: usize,
) -> Result<(NodeId, NodeId)> {
    let c = g.value(contents).shape()[1];
    let n = g.value(text).shape()[0];
    if n_real == 0 || n_real > n {
        return Err(Error::Invalid {
            context: "decoder::predict_logits",
            message: format!("{n_real} real tokens outside 1..={n}"),
        });
    }
    let proj = nn::linear(g, store, &format!("{prefix}.cls"), contents)?;
    let tt = g.transpose(text)?;
    let raw = g.matmul(proj, tt)?;
    let logits = g.scale(raw, 1.0 / (c as f64).sqrt())?;
    let probs_all = g.sigmoid(logits)?;
    let mut mask = Tensor::zeros(vec![1, n]);
    for i in 0..n_real {
        mask.data_mut()[i] = 1.0;
    }
    let mask = g.constant(mask)?;
    let probs = g.mul(probs_all, mask)?;
    Ok((logits, probs))
}

/// Reads the head outputs out of the graph as plain values.
pub fn extract_predictions(g: &Graph, nodes: &PredictionNodes) -> PredictionSet {
    PredictionSet {
        points: g.value(nodes.points).clone(),
        probs: g.value(nodes.probs).clone(),
    }
}
