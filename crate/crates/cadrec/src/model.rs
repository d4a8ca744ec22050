//! End-to-end model assembly.
//!
//! Wires the context-density estimator, the attention gates, the query
//! path, the decoder, and the heads into one forward pass, with each
//! stage toggleable for ablations. A disabled stage registers no
//! parameters and contributes nothing to the graph, so the all-off
//! configuration is exactly the plain query-decoder baseline. Stages
//! that consume the context pyramid (spatial gate, density query init,
//! density loss, density-guided counting) are inert when the estimator
//! itself is off.

use rand::Rng;

use crate::cadattn;
use crate::cadgen::{self, CadeConfig, DensityMap};
use crate::cadquery::{self, QueryPositions};
use crate::decoder::{self, PredictionNodes, PredictionSet};
use crate::evalinfer::{self, EvalOptions};
use crate::graph::{Graph, NodeId};
use crate::losses::{self, Assignment, LossReport, LossWeights};
use crate::params::ParamStore;
use crate::scenegen::{
    self, embed_expression, Expression, FeaturePyramid, GenParams, Scene, SceneRecord,
    TextFeatures, Vocab, NUM_LEVELS,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Which optional stages exist. Stages gate independently; the ones
/// that read the context pyramid only take effect while `cadgen` is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub cadgen: bool,
    pub spatial_attn: bool,
    pub channel_attn: bool,
    pub text_init: bool,
    pub density_init: bool,
    pub density_guided_inference: bool,
}

impl AblationFlags {
    /// Everything off: the plain query-decoder baseline.
    pub fn baseline() -> Self {
        AblationFlags {
            cadgen: false,
            spatial_attn: false,
            channel_attn: false,
            text_init: false,
            density_init: false,
            density_guided_inference: false,
        }
    }

    /// Every model stage on, threshold inference.
    pub fn full() -> Self {
        AblationFlags {
            cadgen: true,
            spatial_attn: true,
            channel_attn: true,
            text_init: true,
            density_init: true,
            density_guided_inference: false,
        }
    }

    /// Cumulative ablation presets 1..=7: each row switches on one more
    /// stage, starting from the bare baseline and ending with
    /// density-guided counting.
    pub fn preset(row: usize) -> Result<Self> {
        if !(1..=7).contains(&row) {
            return Err(Error::Invalid {
                context: "model::ablation_preset",
                message: format!("preset {row} outside 1..=7"),
            });
        }
        Ok(AblationFlags {
            cadgen: row >= 2,
            spatial_attn: row >= 3,
            channel_attn: row >= 4,
            text_init: row >= 5,
            density_init: row >= 6,
            density_guided_inference: row >= 7,
        })
    }

    /// The inference strategy this configuration evaluates with.
    pub fn strategy(&self) -> evalinfer::Strategy {
        if self.density_guided_inference {
            evalinfer::Strategy::Density
        } else {
            evalinfer::Strategy::Threshold
        }
    }
}

/// Model hyperparameters; widths shared by every stage.
#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub channels: usize,
    pub queries: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub cade_depth: usize,
    pub flags: AblationFlags,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Invalid {
                context: "model::config",
                message: format!("channels {} must be a positive multiple of 4", self.channels),
            });
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Invalid {
                context: "model::config",
                message: format!("{} heads do not divide {} channels", self.heads, self.channels),
            });
        }
        if self.queries == 0 {
            return Err(Error::invalid("model::config", "at least one query required"));
        }
        if self.cade_depth == 0 {
            return Err(Error::invalid("model::config", "estimator depth must be >= 1"));
        }
        Ok(())
    }

    fn cade(&self) -> CadeConfig {
        CadeConfig {
            channels: self.channels,
            depth: self.cade_depth,
        }
    }
}

/// Registers every parameter the flag set calls for. Initialization
/// order is fixed, so (config, seed) determines all values.
pub fn init_model(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let f = &cfg.flags;
    if f.cadgen {
        cadgen::init_cade(store, rng, "cade", &cfg.cade())?;
        if f.spatial_attn {
            cadattn::init_spatial_attention(store, rng, "attn")?;
        }
    }
    if f.channel_attn {
        cadattn::init_channel_attention(store, rng, "attn", cfg.channels)?;
    }
    cadquery::init_queries(store, rng, "query", cfg.queries, cfg.channels)?;
    if f.text_init {
        cadquery::init_text_mixer(store, rng, "query", cfg.channels)?;
    }
    if f.cadgen && f.density_init {
        cadquery::init_density_mixer(store, rng, "query", cfg.channels)?;
    }
    decoder::init_decoder(store, rng, "dec", cfg.channels, cfg.decoder_blocks)?;
    decoder::init_heads(store, rng, "head", cfg.channels)?;
    losses::init_contrast(store, rng, "con", cfg.channels)
}

/// Everything one forward pass produces, as live graph nodes.
pub struct ForwardPass {
    pub nodes: PredictionNodes,
    /// Predicted density at the finest level; absent without the estimator.
    pub density: Option<NodeId>,
    pub positions: QueryPositions,
    /// Decoder output, `[K, C]`.
    pub contents: NodeId,
    /// Query state before the density cross-attention.
    pub q_dot: NodeId,
    /// Query state entering the decoder.
    pub q_hat: NodeId,
    pub text_node: NodeId,
    pub f_hat: [NodeId; NUM_LEVELS],
}

/// Wraps the pyramid tensors as graph constants; the rendered features
/// stand in for a frozen backbone and receive no gradients.
pub fn pyramid_nodes(g: &mut Graph, pyramid: &FeaturePyramid) -> Result<[NodeId; NUM_LEVELS]> {
    let mut nodes = [NodeId::default(); NUM_LEVELS];
    for (i, level) in pyramid.levels.iter().enumerate() {
        nodes[i] = g.constant(level.clone())?;
    }
    Ok(nodes)
}

/// Full forward pass over one (pyramid, expression) pair.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    f_v: &[NodeId; NUM_LEVELS],
    text: &TextFeatures,
) -> Result<ForwardPass> {
    cfg.validate()?;
    let flags = &cfg.flags;
    let n_real = text.n_real();
    let text_node = g.constant(text.features.clone())?;

    let cad = if flags.cadgen {
        let s = cadgen::similarity_features(g, store, "cade", f_v, text_node, n_real)?;
        Some(cadgen::cade_forward(g, store, "cade", &cfg.cade(), f_v, &s)?)
    } else {
        None
    };

    let mut f_hat = *f_v;
    for lvl in 0..NUM_LEVELS {
        let level_prefix = format!("attn.l{lvl}");
        if let Some(cad) = &cad {
            if flags.spatial_attn {
                let a_s = cadattn::spatial_attention_map(g, store, &level_prefix, cad.levels[lvl])?;
                f_hat[lvl] = cadattn::apply_spatial(g, f_hat[lvl], a_s)?;
            }
        }
        if flags.channel_attn {
            let a_c = cadattn::channel_attention_map(g, store, &level_prefix, f_hat[lvl])?;
            f_hat[lvl] = cadattn::apply_channel(g, f_hat[lvl], a_c)?;
        }
    }

    let positions = cadquery::select_query_positions(g, &f_hat, text, cfg.queries)?;
    let q_dot = if flags.text_init {
        cadquery::text_init(g, store, "query", text_node)?
    } else {
        g.param(store, "query.q")?
    };
    let q_hat = match &cad {
        Some(cad) if flags.density_init => {
            let d_k = cadquery::gather_cad(g, &cad.levels, &positions.positions)?;
            cadquery::density_init(g, store, "query", q_dot, d_k, cfg.heads)?
        }
        _ => q_dot,
    };

    let contents = decoder::decoder_forward(
        g,
        store,
        "dec",
        q_hat,
        &f_hat,
        text_node,
        n_real,
        cfg.decoder_blocks,
        cfg.heads,
    )?;
    let points = decoder::predict_points(g, store, "head", contents, &positions.positions)?;
    let (logits, probs) = decoder::predict_logits(g, store, "head", contents, text_node, n_real)?;

    Ok(ForwardPass {
        nodes: PredictionNodes {
            points,
            logits,
            probs,
        },
        density: cad.as_ref().map(|c| c.density),
        positions,
        contents,
        q_dot,
        q_hat,
        text_node,
    f_hat,
    })
}

/// Token budget for embedding dataset expressions: CLS + class + the
/// widest attribute set the generator can emit (pairs at minimum).
pub fn expression_token_budget(gen: &GenParams) -> usize {
    2 + gen.max_attrs_per_object.max(2)
}

/// Positive and negative attribute embeddings for the alignment term:
/// the expression's own attributes vs the rest of its class's pool.
/// `None` when either side is empty (bare-class expressions, or an
/// expression that uses every registered attribute).
pub fn contrast_embeddings(vocab: &Vocab, expr: &Expression) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    if expr.attribute_ids.is_empty() {
        return Ok(None);
    }
    let others: std::collections::BTreeSet<usize> = vocab
        .class_attrs(expr.class_id)?
        .into_iter()
        .filter(|a| !expr.attribute_ids.contains(a))
        .collect();
    if others.is_empty() {
        return Ok(None);
    }
    let e_pos = vocab.mean_attr_embedding(&expr.attribute_ids)?;
    let e_neg = vocab.mean_attr_embedding(&others)?;
    Ok(Some((e_pos, e_neg)))
}

/// Ground-truth centers of the expression's objects, normalised to the
/// unit square in (x, y) order.
pub fn gt_norm_points(scene: &Scene, expr: &Expression) -> Vec<(f64, f64)> {
    let (h, w) = scene.image_size;
    scene
        .selected_indices(expr.class_id, &expr.attribute_ids)
        .into_iter()
        .map(|i| {
            let (x, y) = scene.objects[i].center;
            (x / w as f64, y / h as f64)
        })
        .collect()
}

/// One step's objective as a graph node plus its scalar report.
pub struct SceneLoss {
    pub total: NodeId,
    pub loc: NodeId,
    pub report: LossReport,
    pub assignment: Assignment,
}

/// Builds the objective for a fixed assignment. The matching itself is
/// never differentiated through.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss_with_assignment(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    fwd: &ForwardPass,
    assignment: Assignment,
    gt_points: &[(f64, f64)],
    contrast: Option<(&[f64], &[f64])>,
    gt_density: Option<&DensityMap>,
    n_real: usize,
    weights: &LossWeights,
) -> Result<SceneLoss> {
    let (l_match, matched) = losses::match_loss(g, &assignment, fwd.nodes.points, gt_points)?;
    let l_cls = losses::cls_loss(g, &assignment, fwd.nodes.probs, n_real)?;
    let (l_contrast, contrast_skipped) = match contrast {
        Some((e_pos, e_neg)) => {
            losses::contrastive_loss(g, store, "con", &assignment, fwd.contents, e_pos, Some(e_neg))?
        }
        None => (g.constant(Tensor::zeros(vec![1]))?, true),
    };
    let l_density = match (fwd.density, gt_density) {
        (Some(pred), Some(gt)) => {
            let gt_node = g.constant(gt.grid.clone())?;
            cadgen::density_loss_node(g, pred, gt_node)?
        }
        (None, None) => g.constant(Tensor::zeros(vec![1]))?,
        _ => {
            return Err(Error::invalid(
                "model::scene_loss",
                "ground-truth density must be supplied exactly when the estimator is on",
            ))
        }
    };
    let (loc, total) = losses::total_loss_nodes(g, l_match, l_cls, l_contrast, l_density, weights)?;
    let report = losses::loss_report(
        g.value(l_match).item()?,
        g.value(l_cls).item()?,
        g.value(l_contrast).item()?,
        g.value(l_density).item()?,
        weights,
        matched,
        contrast_skipped,
    )?;
    debug_assert!(cfg.flags.cadgen == fwd.density.is_some());
    Ok(SceneLoss {
        total,
        loc,
        report,
        assignment,
    })
}

/// Matches predictions to ground truth from current values, then builds
/// the objective with that assignment held fixed.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    fwd: &ForwardPass,
    scene: &Scene,
    expr: &Expression,
    vocab: &Vocab,
    gt_density: Option<&DensityMap>,
    weights: &LossWeights,
) -> Result<SceneLoss> {
    let n_real = embed_n_real(g, fwd);
    let gt_points = gt_norm_points(scene, expr);
    let cost = losses::matching_cost(
        g.value(fwd.nodes.points),
        g.value(fwd.nodes.probs),
        &gt_points,
        n_real,
        weights.lambda1,
    )?;
    let assignment = losses::hungarian_match(&cost)?;
    let contrast = contrast_embeddings(vocab, expr)?;
    scene_loss_with_assignment(
        g,
        store,
        cfg,
        fwd,
        assignment,
        &gt_points,
        contrast.as_ref().map(|(p, n)| (p.as_slice(), n.as_slice())),
        gt_density,
        n_real,
        weights,
    )
}

/// Non-pad token count recovered from the zero pad rows of the text.
fn embed_n_real(g: &Graph, fwd: &ForwardPass) -> usize {
    let text = g.value(fwd.text_node);
    let n = text.shape()[0];
    (0..n)
        .take_while(|&i| (0..text.shape()[1]).any(|c| text.at2(i, c) != 0.0))
        .count()
}

/// One scene-expression prediction with the graph torn down: everything
/// evaluation needs, in value form.
pub struct ScenePrediction {
    pub pred: PredictionSet,
    pub density: Option<DensityMap>,
    pub positions: QueryPositions,
    pub logits: Tensor,
    pub q_dot: Tensor,
    pub q_hat: Tensor,
    pub n_real: usize,
}

/// Renders the scene's features, runs the forward pass, and extracts
/// values. `feature_seed` pins the rendered noise.
pub fn predict_scene(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
    expr: &Expression,
    vocab: &Vocab,
    gen: &GenParams,
    feature_seed: u64,
) -> Result<ScenePrediction> {
    let pyramid = scenegen::render_features(scene, vocab, gen, feature_seed)?;
    let text = embed_expression(expr, vocab)?;
    let mut g = Graph::new();
    let f_v = pyramid_nodes(&mut g, &pyramid)?;
    let fwd = forward(&mut g, store, cfg, &f_v, &text)?;
    let density = match fwd.density {
        Some(node) => Some(cadgen::extract_density(&g, node)?),
        None => None,
    };
    Ok(ScenePrediction {
        pred: decoder::extract_predictions(&g, &fwd.nodes),
        density,
        positions: fwd.positions,
        logits: g.value(fwd.nodes.logits).clone(),
        q_dot: g.value(fwd.q_dot).clone(),
        q_hat: g.value(fwd.q_hat).clone(),
        n_real: text.n_real(),
    })
}

/// Per-quadrant feature seeds reuse the dataset seeding rule on a
/// record wrapping the bare sub-scene.
fn sub_scene_seed(scene: &Scene, base_seed: u64) -> u64 {
    let rec = SceneRecord {
        scene: scene.clone(),
        expressions: vec![],
    };
    scenegen::feature_seed(&rec, base_seed)
}

/// Counts under one strategy, re-rendering and re-running quadrants when
/// the whole-image count exceeds the crop trigger.
#[allow(clippy::too_many_arguments)]
fn strategy_count_with_crop(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
    expr: &Expression,
    vocab: &Vocab,
    gen: &GenParams,
    base_seed: u64,
    opts: &EvalOptions,
    whole_count: usize,
) -> Result<(f64, bool)> {
    if (whole_count as f64) <= opts.crop_trigger {
        return Ok((whole_count as f64, false));
    }
    let quads = evalinfer::split_quadrants(scene)?;
    let mut total = 0.0;
    for quad in &quads {
        let pred = predict_scene(store, cfg, quad, expr, vocab, gen, sub_scene_seed(quad, base_seed))?;
        total += strategy_count(&pred, opts)? as f64;
    }
    Ok((total, true))
}

/// The count a strategy reads off one prediction.
fn strategy_count(pred: &ScenePrediction, opts: &EvalOptions) -> Result<usize> {
    Ok(strategy_selection(pred, opts)?.len())
}

/// The query indices a strategy keeps on one prediction.
fn strategy_selection(pred: &ScenePrediction, opts: &EvalOptions) -> Result<Vec<usize>> {
    match opts.strategy {
        evalinfer::Strategy::Threshold => evalinfer::threshold_select(
            &pred.pred,
            pred.n_real,
            opts.cls_threshold,
            opts.token_threshold,
        ),
        evalinfer::Strategy::Density => {
            let density = pred.density.as_ref().ok_or_else(|| {
                Error::invalid(
                    "model::evaluate_pair",
                    "density strategy requires the estimator stage",
                )
            })?;
            Ok(evalinfer::density_guided_select(&pred.pred, density))
        }
    }
}

/// Evaluates one (scene, expression) pair end to end: forward pass,
/// both counting strategies, and localization under `opts.strategy`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pair(
    store: &ParamStore,
    cfg: &ModelConfig,
    rec: &SceneRecord,
    scene_id: usize,
    expression_id: usize,
    vocab: &Vocab,
    gen: &GenParams,
    base_seed: u64,
    opts: &EvalOptions,
) -> Result<evalinfer::PairOutcome> {
    let spec = rec.expressions.get(expression_id).ok_or_else(|| {
        Error::invalid("model::evaluate_pair", "expression index out of range")
    })?;
    let expr = Expression::new(
        spec.class_id,
        spec.attribute_ids.clone(),
        vocab,
        expression_token_budget(gen),
    )?;
    let seed = scenegen::feature_seed(rec, base_seed);
    let pred = predict_scene(store, cfg, &rec.scene, &expr, vocab, gen, seed)?;

    let kept_threshold =
        evalinfer::threshold_select(&pred.pred, pred.n_real, opts.cls_threshold, opts.token_threshold)?;
    let count_density = pred
        .density
        .as_ref()
        .map(|d| evalinfer::density_guided_select(&pred.pred, d).len());

    let selection = strategy_selection(&pred, opts)?;
    let whole_count = selection.len();
    let (counted, cropped) = strategy_count_with_crop(
        store,
        cfg,
        &rec.scene,
        &expr,
        vocab,
        gen,
        base_seed,
        opts,
        whole_count,
    )?;

    let gt_indices = rec
        .scene
        .selected_indices(expr.class_id, &expr.attribute_ids);
    let gt_px: Vec<(f64, f64)> = gt_indices
        .iter()
        .map(|&i| rec.scene.objects[i].center)
        .collect();
    let pred_px = evalinfer::selected_pixel_points(&pred.pred, &selection, rec.scene.image_size);
    let (tp, precision, recall, f1) = evalinfer::localization_counts(&pred_px, &gt_px, opts.tau)?;

    let strategy_total = if cropped { counted as usize } else { whole_count };
    Ok(evalinfer::PairOutcome {
        scene_id,
        expression_id,
        gt_count: gt_indices.len(),
        count_threshold: if opts.strategy == evalinfer::Strategy::Threshold {
            strategy_total
        } else {
            kept_threshold.len()
        },
        count_density: if opts.strategy == evalinfer::Strategy::Density {
            Some(strategy_total)
        } else {
            count_density
        },
        tp,
        emitted: pred_px.len(),
        precision,
        recall,
        f1,
    })
}

/// Mean cosine distance between row pairs of two equally shaped
/// matrices; all-zero rows count as distance 0 when both are zero.
pub fn mean_row_cosine_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "model::mean_row_cosine_distance",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let mut total = 0.0;
    for r in 0..rows {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for c in 0..cols {
            dot += a.at2(r, c) * b.at2(r, c);
            na += a.at2(r, c) * a.at2(r, c);
            nb += b.at2(r, c) * b.at2(r, c);
        }
        let cos = if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        };
        total += 1.0 - cos;
    }
    Ok(total / rows as f64)
}
