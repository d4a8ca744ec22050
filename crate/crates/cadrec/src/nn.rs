//! Parameterised building blocks over the tape: linear/conv layers,
//! layer norm, multi-head attention, and small MLPs, with their
//! initialisers. Each block owns a dotted path prefix inside a
//! [`ParamStore`].
//!
//! Initialisation draws from the caller's RNG in a fixed documented order
//! (weights first, row-major), so parameter values depend only on the seed
//! and the call sequence, never on map iteration order.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::Result;

/// One standard normal draw. Box-Muller on top of the raw RNG keeps the
/// draw sequence pinned to this crate rather than a dependency's
/// implementation details.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

fn gaussian_tensor(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| gaussian(rng) * std).collect();
    Tensor::new(shape, data).expect("finite init")
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

// ---- linear ----

/// Registers `{prefix}.w [din,dout]` (Xavier normal, or zero when
/// `zero_weight`) and `{prefix}.b [dout]` (zero).
pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    din: usize,
    dout: usize,
    zero_weight: bool,
) -> Result<()> {
    let w = if zero_weight {
        Tensor::zeros(vec![din, dout])
    } else {
        gaussian_tensor(rng, vec![din, dout], xavier_std(din, dout))
    };
    store.insert(&format!("{prefix}.w"), w)?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![dout]))?;
    Ok(())
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

// ---- conv ----

/// Registers `{prefix}.w [k,k,cin,cout]` (Xavier normal over receptive
/// field, or zero when `zero_weight`) and `{prefix}.b [cout]` (zero).
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
    zero_weight: bool,
) -> Result<()> {
    let w = if zero_weight {
        Tensor::zeros(vec![k, k, cin, cout])
    } else {
        gaussian_tensor(
            rng,
            vec![k, k, cin, cout],
            xavier_std(k * k * cin, k * k * cout),
        )
    };
    store.insert(&format!("{prefix}.w"), w)?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![cout]))?;
    Ok(())
}

/// Shape-preserving convolution through the registered kernel; padding is
/// derived from the kernel size.
pub fn conv(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let k = g.value(w).shape()[0];
    g.conv2d(x, w, b, (k - 1) / 2)
}

// ---- layer norm ----

/// Registers `{prefix}.gamma` (ones) and `{prefix}.beta` (zeros).
pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::full(vec![d], 1.0))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(vec![d]))?;
    Ok(())
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

// ---- multi-head attention ----

/// Registers query/key/value/output projections under
/// `{prefix}.{wq,wk,wv,wo}` with zero biases. `zero_output` zeroes the
/// output projection weight so the block starts as an exact no-op inside
/// a residual connection.
pub fn init_mha(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    c: usize,
    zero_output: bool,
) -> Result<()> {
    init_linear(store, rng, &format!("{prefix}.wq"), c, c, false)?;
    init_linear(store, rng, &format!("{prefix}.wk"), c, c, false)?;
    init_linear(store, rng, &format!("{prefix}.wv"), c, c, false)?;
    init_linear(store, rng, &format!("{prefix}.wo"), c, c, zero_output)?;
    Ok(())
}

/// Scaled dot-product multi-head attention with learned projections.
/// `q` is `[nq, c]`, `k` and `v` are `[nk, c]`; the output is `[nq, c]`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let c = *g.value(q).shape().last().ok_or_else(|| crate::Error::Invalid {
        context: "nn::multi_head_attention",
        message: "query must have a channel axis".into(),
    })?;
    if heads == 0 || c % heads != 0 {
        return Err(crate::Error::Invalid {
            context: "nn::multi_head_attention",
            message: format!("channels {c} not divisible by heads {heads}"),
        });
    }
    let dh = c / heads;
    let qp = linear(g, store, &format!("{prefix}.wq"), q)?;
    let kp = linear(g, store, &format!("{prefix}.wk"), k)?;
    let vp = linear(g, store, &format!("{prefix}.wv"), v)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_last(qp, lo, hi)?;
        let kh = g.slice_last(kp, lo, hi)?;
        let vh = g.slice_last(vp, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = g.softmax(scaled, 1)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let cat = g.concat_last(&outs)?;
    linear(g, store, &format!("{prefix}.wo"), cat)
}

// ---- MLP ----

/// Registers `{prefix}.l{i}` linear layers for consecutive dim pairs.
pub fn init_mlp(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    dims: &[usize],
) -> Result<()> {
    if dims.len() < 2 {
        return Err(crate::Error::invalid("nn::init_mlp", "need at least two dims"));
    }
    for i in 0..dims.len() - 1 {
        init_linear(store, rng, &format!("{prefix}.l{i}"), dims[i], dims[i + 1], false)?;
    }
    Ok(())
}

/// Applies the MLP with ReLU between layers and no final activation.
pub fn mlp(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    layers: usize,
) -> Result<NodeId> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, store, &format!("{prefix}.l{i}"), h)?;
        if i + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}
