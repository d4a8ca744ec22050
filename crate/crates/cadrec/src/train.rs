//! Training loop: adaptive-moment optimization with decoupled weight
//! decay, a one-cut step-decay schedule, and per-step metric logging.
//!
//! A batch is one scene with all of its expressions; each expression's
//! loss is scaled by 1/n before backward so the batch gradient is the
//! mean. Feature rendering is reseeded per scene from the dataset line,
//! so the same scene yields the same features on every epoch and run.

use std::collections::BTreeMap;
use std::io::Write;

use crate::graph::Graph;
use crate::losses::{LossReport, LossWeights};
use crate::model::{self, ModelConfig};
use crate::params::ParamStore;
use crate::scenegen::{self, Expression, GenParams, SceneRecord, Vocab, LEVEL_STRIDES};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Optimization schedule. The step size drops once, by `decay_factor`,
/// at the start of epoch `decay_epoch` (0-based).
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub step_size: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 200,
            decay_epoch: 100,
            decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("train::config", "step size must be positive"));
        }
        if self.weight_decay < 0.0 || self.decay_factor <= 0.0 {
            return Err(Error::invalid(
                "train::config",
                "weight decay must be >= 0 and decay factor > 0",
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid {
                    context: "train::config",
                    message: format!("{name} = {b} outside [0, 1)"),
                });
            }
        }
        Ok(())
    }

    /// Step size in force during `epoch`.
    pub fn step_size_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.step_size * self.decay_factor
        } else {
            self.step_size
        }
    }
}

/// Adaptive-moment state, keyed by parameter path.
pub struct AdamW {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(tc: &TrainConfig) -> Self {
        AdamW {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
            weight_decay: tc.weight_decay,
        }
    }

    /// One update from the gradients currently in the store. Weight
    /// decay is decoupled: it scales the parameter directly instead of
    /// entering the moment estimates.
    pub fn step(&mut self, store: &mut ParamStore, step_size: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (path, value, grad) in store.iter_mut() {
            let m = self
                .m
                .entry(path.to_string())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self
                .v
                .entry(path.to_string())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            for ((mv, vv), (g, p)) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(grad.data().iter().zip(value.data_mut()))
            {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        context: "train::adamw_step",
                    });
                }
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *p -= step_size * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Per-run training summary: one mean total loss per epoch.
#[derive(Clone, Debug)]
pub struct TrainStats {
    pub steps: u64,
    pub epoch_mean_total: Vec<f64>,
}

/// Writes one metrics line: the step index and all six scalars.
pub fn write_metrics_line(out: &mut impl Write, step: u64, r: &LossReport) -> Result<()> {
    writeln!(
        out,
        "step {} match {} cls {} contrast {} density {} loc {} total {}",
        step, r.l_match, r.l_cls, r.l_contrast, r.l_density, r.l_loc, r.l_total
    )?;
    Ok(())
}

/// A dataset expression with its embedded tokens, built once per run.
struct PreparedExpression {
    expr: Expression,
    gt_density: Option<crate::cadgen::DensityMap>,
}

/// Trains in place. One optimizer step per scene; metric lines carry the
/// scene's mean report. Aborts on the first non-finite loss, naming the
/// step.
#[allow(clippy::too_many_arguments)]
pub fn train(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    weights: &LossWeights,
    dataset: &[SceneRecord],
    vocab: &Vocab,
    gen: &GenParams,
    kernel_size: usize,
    sigma: f64,
    base_seed: u64,
    metrics: &mut impl Write,
) -> Result<TrainStats> {
    cfg.validate()?;
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train::train", "empty dataset"));
    }
    let budget = model::expression_token_budget(gen);
    let level0 = |rec: &SceneRecord| {
        let (h, w) = rec.scene.image_size;
        (h / LEVEL_STRIDES[0], w / LEVEL_STRIDES[0])
    };
    // embed expressions and ground-truth densities once; they are
    // constant across epochs
    let mut prepared: Vec<(usize, Vec<PreparedExpression>)> = Vec::with_capacity(dataset.len());
    for (si, rec) in dataset.iter().enumerate() {
        let mut exprs = Vec::with_capacity(rec.expressions.len());
        for spec in &rec.expressions {
            let expr = Expression::new(spec.class_id, spec.attribute_ids.clone(), vocab, budget)?;
            let gt_density = if cfg.flags.cadgen {
                Some(scenegen::gt_density_map_with_sigma(
                    &rec.scene,
                    &expr,
                    level0(rec),
                    kernel_size,
                    sigma,
                )?)
            } else {
                None
            };
            exprs.push(PreparedExpression { expr, gt_density });
        }
        if !exprs.is_empty() {
            prepared.push((si, exprs));
        }
    }
    if prepared.is_empty() {
        return Err(Error::invalid(
            "train::train",
            "dataset has no expressions to train on",
        ));
    }

    let mut opt = AdamW::new(tc);
    let mut stats = TrainStats {
        steps: 0,
        epoch_mean_total: Vec::with_capacity(tc.epochs),
    };
    let mut step: u64 = 0;
    for epoch in 0..tc.epochs {
        let lr = tc.step_size_at(epoch);
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for (si, exprs) in &prepared {
            let rec = &dataset[*si];
            let feature_seed = scenegen::feature_seed(rec, base_seed);
            let pyramid = scenegen::render_features(&rec.scene, vocab, gen, feature_seed)?;
            store.zero_grads();
            let inv = 1.0 / exprs.len() as f64;
            let mut batch = BatchMean::default();
            for p in exprs {
                let text = scenegen::embed_expression(&p.expr, vocab)?;
                let mut g = Graph::new();
                let f_v = model::pyramid_nodes(&mut g, &pyramid)?;
                let fwd = model::forward(&mut g, store, cfg, &f_v, &text)?;
                let loss = model::scene_loss(
                    &mut g,
                    store,
                    cfg,
                    &fwd,
                    &rec.scene,
                    &p.expr,
                    vocab,
                    p.gt_density.as_ref(),
                    weights,
                )
                .map_err(|e| step_error(e, step))?;
                if !loss.report.l_total.is_finite() {
                    return Err(Error::Invalid {
                        context: "train::train",
                        message: format!("non-finite loss at step {step}"),
                    });
                }
                let scaled = g.scale(loss.total, inv)?;
                g.backward(scaled).map_err(|e| step_error(e, step))?;
                g.add_param_grads_to(store)?;
                batch.add(&loss.report);
            }
            let report = batch.mean(weights)?;
            opt.step(store, lr).map_err(|e| step_error(e, step))?;
            write_metrics_line(metrics, step, &report)?;
            epoch_total += report.l_total;
            epoch_batches += 1;
            step += 1;
        }
        stats.epoch_mean_total.push(epoch_total / epoch_batches as f64);
    }
    stats.steps = step;
    Ok(stats)
}

fn step_error(e: Error, step: u64) -> Error {
    Error::Invalid {
        context: "train::train",
        message: format!("step {step}: {e}"),
    }
}

/// Accumulates scalar reports for one batch and re-derives the mean.
#[derive(Default)]
struct BatchMean {
    n: usize,
    l_match: f64,
    l_cls: f64,
    l_contrast: f64,
    l_density: f64,
    matched: usize,
    any_skipped: bool,
}

impl BatchMean {
    fn add(&mut self, r: &LossReport) {
        self.n += 1;
        self.l_match += r.l_match;
        self.l_cls += r.l_cls;
        self.l_contrast += r.l_contrast;
        self.l_density += r.l_density;
        self.matched += r.matched;
        self.any_skipped |= r.contrast_skipped;
    }

    fn mean(&self, weights: &LossWeights) -> Result<LossReport> {
        if self.n == 0 {
            return Err(Error::invalid("train::batch_mean", "empty batch"));
        }
        let inv = 1.0 / self.n as f64;
        crate::losses::loss_report(
            self.l_match * inv,
            self.l_cls * inv,
            self.l_contrast * inv,
            self.l_density * inv,
            weights,
            self.matched,
            self.any_skipped,
        )
    }
}
