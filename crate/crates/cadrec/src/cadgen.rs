//! Cross-modal similarity features, the U-shaped contextual attribute
//! density estimator, and the density loss.
//!
//! The estimator projects each visual level fused with its similarity
//! level down a coarse-to-fine path: encoder convs squeeze `[F_v ‖ S]`
//! to C channels per level, then starting from the coarsest level each
//! step upsamples, adds the next finer encoder output, and refines with
//! a small conv stack. The per-level results are the density features
//! `D_i`; a 1x1 conv + ReLU on the finest one yields the predicted
//! density map.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::params::ParamStore;
use crate::scenegen::NUM_LEVELS;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Non-negative `[h, w, 1]` grid whose sum is the (soft) object count.
/// `level` tags the pyramid resolution the grid lives at (0 = finest).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub grid: Tensor,
    pub level: usize,
}

impl DensityMap {
    pub fn new(grid: Tensor, level: usize) -> Result<DensityMap> {
        if grid.shape().len() != 3 || grid.shape()[2] != 1 {
            return Err(Error::Invalid {
                context: "density_map::new",
                message: format!("grid shape {:?} is not [h, w, 1]", grid.shape()),
            });
        }
        if grid.data().iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("density_map::new", "negative density value"));
        }
        Ok(DensityMap { grid, level })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    /// Total mass; the soft count before any rounding.
    pub fn count(&self) -> f64 {
        self.grid.data().iter().sum()
    }
}

/// Sum of all cells as a plain value.
pub fn density_count(map: &DensityMap) -> f64 {
    map.count()
}

/// Width and decoder-stack depth of the estimator.
#[derive(Clone, Copy, Debug)]
pub struct CadeConfig {
    pub channels: usize,
    /// Convs applied after each upsample-and-add step.
    pub depth: usize,
}

/// Registers every estimator parameter under `{prefix}.`.
pub fn init_cade(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &CadeConfig,
) -> Result<()> {
    if cfg.channels == 0 || cfg.depth == 0 {
        return Err(Error::invalid("cadgen::init_cade", "zero width or depth"));
    }
    let c = cfg.channels;
    nn::init_linear(store, rng, &format!("{prefix}.sim.proj"), c, c, false)?;
    nn::init_layer_norm(store, &format!("{prefix}.sim.norm"), c)?;
    for i in 0..NUM_LEVELS {
        nn::init_conv(store, rng, &format!("{prefix}.enc{i}"), 3, 2 * c, c, false)?;
    }
    for lvl in 0..NUM_LEVELS - 1 {
        for j in 0..cfg.depth {
            nn::init_conv(store, rng, &format!("{prefix}.dec{lvl}.c{j}"), 3, c, c, false)?;
        }
    }
    nn::init_conv(store, rng, &format!("{prefix}.out"), 1, c, 1, false)?;
    Ok(())
}

/// Pools the non-pad token rows of `text` (`[N, C]`) to a single vector
/// and gates the projected visual features with it, per level:
/// `S_i = layer_norm(linear(F_vi)) * pooled`.
pub fn similarity_features(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    f_v: &[NodeId; NUM_LEVELS],
    text: NodeId,
    n_real: usize,
) -> Result<[NodeId; NUM_LEVELS]> {
    if n_real == 0 {
        return Err(Error::invalid(
            "cadgen::similarity_features",
            "expression has no non-pad tokens",
        ));
    }
    let n_tokens = g.value(text).shape()[0];
    if n_real > n_tokens {
        return Err(Error::Invalid {
            context: "cadgen::similarity_features",
            message: format!("{n_real} real tokens but only {n_tokens} rows"),
        });
    }
    let real = g.gather_rows(text, (0..n_real).collect())?;
    let pooled = g.col_mean(real)?;
    let mut out = Vec::with_capacity(NUM_LEVELS);
    for &level in f_v {
        let proj = nn::linear(g, store, &format!("{prefix}.sim.proj"), level)?;
        let normed = nn::layer_norm(g, store, &format!("{prefix}.sim.norm"), proj)?;
        out.push(g.mul(normed, pooled)?);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// Density features per level plus the predicted map node (still in the
/// graph; extract with [`extract_density`]).
pub struct CadNodes {
    pub levels: [NodeId; NUM_LEVELS],
    pub density: NodeId,
}

/// Runs the U-shaped estimator over the fused pyramids.
pub fn cade_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &CadeConfig,
    f_v: &[NodeId; NUM_LEVELS],
    s: &[NodeId; NUM_LEVELS],
) -> Result<CadNodes> {
    for i in 0..NUM_LEVELS {
        let (fs, ss) = (g.value(f_v[i]).shape(), g.value(s[i]).shape());
        if fs != ss {
            return Err(Error::ShapeMismatch {
                context: "cadgen::cade_forward",
                expected: fs.to_vec(),
                got: ss.to_vec(),
            });
        }
    }
    let mut enc = Vec::with_capacity(NUM_LEVELS);
    for i in 0..NUM_LEVELS {
        let cat = g.concat_last(&[f_v[i], s[i]])?;
        let conv = nn::conv(g, store, &format!("{prefix}.enc{i}"), cat)?;
        enc.push(g.relu(conv)?);
    }
    let mut levels = [enc[NUM_LEVELS - 1]; NUM_LEVELS];
    for lvl in (0..NUM_LEVELS - 1).rev() {
        let up = g.bilinear_upsample(levels[lvl + 1], 2)?;
        let mut x = g.add(up, enc[lvl])?;
        for j in 0..cfg.depth {
            let conv = nn::conv(g, store, &format!("{prefix}.dec{lvl}.c{j}"), x)?;
            x = g.relu(conv)?;
        }
        levels[lvl] = x;
    }
    let pre = nn::conv(g, store, &format!("{prefix}.out"), levels[0])?;
    let density = g.relu(pre)?;
    Ok(CadNodes { levels, density })
}

/// Reads the predicted map out of the graph as a value.
pub fn extract_density(g: &Graph, node: NodeId) -> Result<DensityMap> {
    DensityMap::new(g.value(node).clone(), 0)
}

/// Unnormalised sum of squared differences, as a graph node.
pub fn density_loss_node(g: &mut Graph, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    if g.value(pred).shape() != g.value(gt).shape() {
        return Err(Error::ShapeMismatch {
            context: "cadgen::density_loss",
            expected: g.value(gt).shape().to_vec(),
            got: g.value(pred).shape().to_vec(),
        });
    }
    let diff = g.sub(pred, gt)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// Unnormalised sum of squared differences, as a plain value.
pub fn density_loss_value(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    if pred.grid.shape() != gt.grid.shape() {
        return Err(Error::ShapeMismatch {
            context: "cadgen::density_loss",
            expected: gt.grid.shape().to_vec(),
            got: pred.grid.shape().to_vec(),
        });
    }
    Ok(pred
        .grid
        .data()
        .iter()
        .zip(gt.grid.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum())
}
