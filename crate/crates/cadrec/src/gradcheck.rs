//! Finite-difference verification of the tape's analytic gradients.
//!
//! `grad_check` takes a graph-building closure so the analytic gradient
//! (one backward pass) and the numeric one (central differences on the
//! re-built forward) are guaranteed to describe the same function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const EPS_MIN: f64 = 1e-7;
pub const EPS_MAX: f64 = 1e-3;
/// Step used by the acceptance suite.
pub const DEFAULT_EPS: f64 = 1e-5;

fn check_eps(eps: f64) -> Result<()> {
    if !(EPS_MIN..=EPS_MAX).contains(&eps) {
        return Err(Error::Invalid {
            context: "gradcheck",
            message: format!("eps {eps} outside [{EPS_MIN}, {EPS_MAX}]"),
        });
    }
    Ok(())
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs())
}

/// Max over coordinates of the relative disagreement between the tape
/// gradient of `f` at `x` and central finite differences with step `eps`.
///
/// `f` must build a single-element root from the provided input node and
/// be deterministic; any non-finite intermediate is an error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    check_eps(eps)?;
    let analytic = {
        let mut g = Graph::new();
        let xn = g.input(x.clone())?;
        let root = f(&mut g, xn)?;
        let root_val = g.value(root);
        if root_val.numel() != 1 {
            return Err(Error::Invalid {
                context: "gradcheck",
                message: format!("f must be scalar, got shape {:?}", root_val.shape()),
            });
        }
        g.backward(root)?;
        g.grad(xn)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.input(probe.clone())?;
        let root = f(&mut g, xn)?;
        g.value(root).item()
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck::numeric",
            });
        }
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`] but differentiates with respect to one named
/// parameter, with the builder reading everything from a store.
pub fn grad_check_param<F>(store: &ParamStore, path: &str, build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    check_eps(eps)?;
    let analytic = {
        let mut shadow = store.clone();
        shadow.zero_grads();
        let mut g = Graph::new();
        let root = build(&mut g, &shadow)?;
        if g.value(root).numel() != 1 {
            return Err(Error::Invalid {
                context: "gradcheck",
                message: "builder must produce a scalar".into(),
            });
        }
        g.backward(root)?;
        g.add_param_grads_to(&mut shadow)?;
        shadow.grad(path)?.clone()
    };

    let mut work = store.clone();
    let base = store.get(path)?.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, work)?;
        g.value(root).item()
    };

    let mut worst = 0.0f64;
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        work.set_value(path, plus)?;
        let fp = eval(&work)?;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        work.set_value(path, minus)?;
        let fm = eval(&work)?;
        let numeric = (fp - fm) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck::numeric",
            });
        }
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    work.set_value(path, base)?;
    Ok(worst)
}

/// One named check over a differentiable operation.
pub struct CaseResult {
    pub name: String,
    pub error: f64,
}

/// Moves every parameter to a generic point by adding uniform noise of
/// the given amplitude. Freshly initialised models hold zero biases, which
/// park ReLU pre-activations exactly on the kink where finite differences
/// disagree with the one-sided derivative; checks run after jittering.
pub fn jitter_params(store: &mut ParamStore, rng: &mut impl Rng, amplitude: f64) {
    for (_, value, _) in store.iter_mut() {
        for v in value.data_mut() {
            *v += (rng.random::<f64>() * 2.0 - 1.0) * amplitude;
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(shape, data).expect("finite")
}

// pushes every entry at least `margin` away from `kink`
fn away_from(mut t: Tensor, kink: f64, margin: f64) -> Tensor {
    for v in t.data_mut() {
        let d = *v - kink;
        if d.abs() < margin {
            *v = kink + margin * if d < 0.0 { -1.0 } else { 1.0 };
        }
    }
    t
}

/// Runs one grad check per differentiable operation, including input and
/// parameter routes where the backward code paths differ. `seed` varies
/// the probe values, `scale` in `0..3` selects one of three shape sets.
pub fn run_standard_cases(seed: u64, scale: usize, eps: f64) -> Result<Vec<CaseResult>> {
    let (m, n, c) = match scale % 3 {
        0 => (2, 3, 4),
        1 => (3, 4, 8),
        _ => (4, 5, 12),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(scale as u64));
    let mut results = Vec::new();
    let mut run = |name: &str,
                   x: Tensor,
                   f: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>|
     -> Result<()> {
        let error = grad_check(f, &x, eps)?;
        results.push(CaseResult {
            name: name.to_string(),
            error,
        });
        Ok(())
    };

    // weighting constant so reductions do not collapse to trivial sums
    let wvec = uniform(&mut rng, vec![m, n]);
    let squash = |g: &mut Graph, y: NodeId| -> Result<NodeId> {
        let s = g.mul(y, y)?;
        let t = g.sum(s)?;
        g.scale(t, 0.5)
    };

    // elementwise binaries
    {
        let cst = uniform(&mut rng, vec![1, n]);
        let x = uniform(&mut rng, vec![m, n]);
        run("add.broadcast", x, &|g, xn| {
            let c = g.constant(cst.clone())?;
            let y = g.add(xn, c)?;
            squash(g, y)
        })?;
    }
    {
        let cst = uniform(&mut rng, vec![m, 1]);
        let x = uniform(&mut rng, vec![m, n]);
        run("sub.broadcast", x, &|g, xn| {
            let c = g.constant(cst.clone())?;
            let y = g.sub(c, xn)?;
            squash(g, y)
        })?;
    }
    {
        let cst = uniform(&mut rng, vec![n]);
        let x = uniform(&mut rng, vec![m, n]);
        run("mul.broadcast", x, &|g, xn| {
            let c = g.constant(cst.clone())?;
            let y = g.mul(xn, c)?;
            squash(g, y)
        })?;
    }
    {
        let mut den = uniform(&mut rng, vec![m, n]);
        for v in den.data_mut() {
            *v = 0.5 + v.abs(); // keep the denominator well away from zero
        }
        let num = uniform(&mut rng, vec![m, n]);
        run("div.numerator", num.clone(), &|g, xn| {
            let c = g.constant(den.clone())?;
            let y = g.div(xn, c)?;
            squash(g, y)
        })?;
        run("div.denominator", den.clone(), &|g, xn| {
            let c = g.constant(num.clone())?;
            let y = g.div(c, xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, n]);
        run("scale_and_offset", x, &|g, xn| {
            let y = g.scale(xn, 1.75)?;
            let z = g.add_scalar(y, 0.3)?;
            squash(g, z)
        })?;
    }

    // matrix ops
    {
        let b = uniform(&mut rng, vec![n, c]);
        let x = uniform(&mut rng, vec![m, n]);
        run("matmul.left", x, &|g, xn| {
            let bc = g.constant(b.clone())?;
            let y = g.matmul(xn, bc)?;
            squash(g, y)
        })?;
        let a = uniform(&mut rng, vec![m, n]);
        let x2 = uniform(&mut rng, vec![n, c]);
        run("matmul.right", x2, &|g, xn| {
            let ac = g.constant(a.clone())?;
            let y = g.matmul(ac, xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, n]);
        run("transpose", x, &|g, xn| {
            let t = g.transpose(xn)?;
            let w = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(1), vec![n, m]))?;
            let y = g.mul(t, w)?;
            squash(g, y)
        })?;
    }

    // linear: all three argument routes
    {
        let w = uniform(&mut rng, vec![n, c]);
        let b = uniform(&mut rng, vec![c]);
        let x = uniform(&mut rng, vec![m, n]);
        run("linear.input", x.clone(), &|g, xn| {
            let wn = g.constant(w.clone())?;
            let bn = g.constant(b.clone())?;
            let y = g.linear(xn, wn, bn)?;
            squash(g, y)
        })?;
        run("linear.weight", w.clone(), &|g, wn| {
            let xn = g.constant(x.clone())?;
            let bn = g.constant(b.clone())?;
            let y = g.linear(xn, wn, bn)?;
            squash(g, y)
        })?;
        run("linear.bias", b.clone(), &|g, bn| {
            let xn = g.constant(x.clone())?;
            let wn = g.constant(w.clone())?;
            let y = g.linear(xn, wn, bn)?;
            squash(g, y)
        })?;
    }

    // conv: all three argument routes
    {
        let (h, wd, cin, cout, k) = (m + 2, n + 1, 2, 3, 3);
        let x = uniform(&mut rng, vec![h, wd, cin]);
        let w = uniform(&mut rng, vec![k, k, cin, cout]);
        let b = uniform(&mut rng, vec![cout]);
        run("conv2d.input", x.clone(), &|g, xn| {
            let wn = g.constant(w.clone())?;
            let bn = g.constant(b.clone())?;
            let y = g.conv2d(xn, wn, bn, 1)?;
            squash(g, y)
        })?;
        run("conv2d.weight", w.clone(), &|g, wn| {
            let xn = g.constant(x.clone())?;
            let bn = g.constant(b.clone())?;
            let y = g.conv2d(xn, wn, bn, 1)?;
            squash(g, y)
        })?;
        run("conv2d.bias", b.clone(), &|g, bn| {
            let xn = g.constant(x.clone())?;
            let wn = g.constant(w.clone())?;
            let y = g.conv2d(xn, wn, bn, 1)?;
            squash(g, y)
        })?;
    }

    {
        let x = uniform(&mut rng, vec![m, n, 2]);
        run("bilinear_upsample", x, &|g, xn| {
            let y = g.bilinear_upsample(xn, 2)?;
            squash(g, y)
        })?;
    }

    // unary elementwise (kinked ones pushed away from their kinks)
    {
        let x = away_from(uniform(&mut rng, vec![m, n]), 0.0, 0.1);
        run("relu", x, &|g, xn| {
            let y = g.relu(xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, n]);
        run("sigmoid", x, &|g, xn| {
            let y = g.sigmoid(xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, n]);
        run("gelu", x, &|g, xn| {
            let y = g.gelu(xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = away_from(uniform(&mut rng, vec![m, n]), 0.0, 0.1);
        run("abs", x, &|g, xn| {
            let y = g.abs(xn)?;
            squash(g, y)
        })?;
    }
    {
        let mut x = uniform(&mut rng, vec![m, n]);
        for v in x.data_mut() {
            *v = 0.5 + v.abs();
        }
        run("log", x.clone(), &|g, xn| {
            let y = g.log(xn)?;
            squash(g, y)
        })?;
        run("sqrt", x, &|g, xn| {
            let y = g.sqrt(xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = away_from(away_from(uniform(&mut rng, vec![m, n]), -0.6, 0.1), 0.6, 0.1);
        run("clamp", x, &|g, xn| {
            let y = g.clamp(xn, -0.6, 0.6)?;
            squash(g, y)
        })?;
    }

    // normalisation
    {
        let x = uniform(&mut rng, vec![m, n]);
        run("softmax", x, &|g, xn| {
            let s = g.softmax(xn, 1)?;
            let w = g.constant(wvec.clone())?;
            let y = g.mul(s, w)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, c]);
        let gamma = uniform(&mut rng, vec![c]);
        let beta = uniform(&mut rng, vec![c]);
        run("layer_norm.input", x.clone(), &|g, xn| {
            let gn = g.constant(gamma.clone())?;
            let bn = g.constant(beta.clone())?;
            let y = g.layer_norm(xn, gn, bn)?;
            squash(g, y)
        })?;
        run("layer_norm.gamma", gamma.clone(), &|g, gn| {
            let xn = g.constant(x.clone())?;
            let bn = g.constant(beta.clone())?;
            let y = g.layer_norm(xn, gn, bn)?;
            squash(g, y)
        })?;
        run("layer_norm.beta", beta.clone(), &|g, bn| {
            let xn = g.constant(x.clone())?;
            let gn = g.constant(gamma.clone())?;
            let y = g.layer_norm(xn, gn, bn)?;
            squash(g, y)
        })?;
    }

    // shape ops
    {
        let x = uniform(&mut rng, vec![m * n]);
        run("reshape", x, &|g, xn| {
            let r = g.reshape(xn, vec![m, n])?;
            let w = g.constant(wvec.clone())?;
            let y = g.mul(r, w)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m + 1, n]);
        run("gather_rows", x, &|g, xn| {
            let y = g.gather_rows(xn, vec![m, 0, m, 1])?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, n + 2]);
        run("slice_and_concat", x, &|g, xn| {
            let a = g.slice_last(xn, 0, n)?;
            let b = g.slice_last(xn, 2, n + 2)?;
            let cat = g.concat_last(&[a, b])?;
            let top = g.gather_rows(cat, (0..m).collect())?;
            let stacked = g.concat_first(&[top, cat])?;
            squash(g, stacked)
        })?;
    }

    // reductions (max margins keep FD off the tie boundary)
    {
        let mut x = uniform(&mut rng, vec![m, n]);
        for r in 0..m {
            let j = r % n;
            let v = x.at2(r, j);
            x.set2(r, j, 2.5 + 0.4 * v);
        }
        run("max_last", x, &|g, xn| {
            let y = g.max_last(xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, n]);
        run("mean_last", x, &|g, xn| {
            let y = g.mean_last(xn)?;
            squash(g, y)
        })?;
    }
    {
        let mut x = uniform(&mut rng, vec![m, n]);
        for j in 0..n {
            let i = j % m;
            let v = x.at2(i, j);
            x.set2(i, j, 2.5 + 0.4 * v);
        }
        run("col_max", x, &|g, xn| {
            let y = g.col_max(xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, n]);
        run("col_mean", x, &|g, xn| {
            let y = g.col_mean(xn)?;
            squash(g, y)
        })?;
    }
    {
        let x = uniform(&mut rng, vec![m, n]);
        run("sum", x, &|g, xn| {
            let s = g.sum(xn)?;
            g.mul(s, s)
        })?;
    }

    // attention: input route and parameter route
    {
        let heads = 2;
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11e);
        nn::init_mha(&mut store, &mut prng, "attn", c, false)?;
        let kv = uniform(&mut rng, vec![m + 1, c]);
        let q = uniform(&mut rng, vec![m, c]);
        let store_q = store.clone();
        let kv_q = kv.clone();
        run("multi_head_attention.query", q.clone(), &|g, qn| {
            let k = g.constant(kv_q.clone())?;
            let v = g.constant(kv_q.clone())?;
            let y = nn::multi_head_attention(g, &store_q, "attn", qn, k, v, heads)?;
            squash(g, y)
        })?;
        let error = grad_check_param(
            &store,
            "attn.wq.w",
            |g, s| {
                let qn = g.constant(q.clone())?;
                let k = g.constant(kv.clone())?;
                let v = g.constant(kv.clone())?;
                let y = nn::multi_head_attention(g, s, "attn", qn, k, v, heads)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            eps,
        )?;
        results.push(CaseResult {
            name: "multi_head_attention.wq".to_string(),
            error,
        });
    }

    Ok(results)
}

/// Negative control for the checker itself: differentiates one function
/// on the tape while numerically probing another, which is exactly what
/// a broken backward rule looks like from the outside. The returned
/// disagreement must be large; a small value means the comparison has
/// lost the power to flag bad gradients.
pub fn corrupted_backward_control(seed: u64, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // generic point away from zero so 0.5*sum(x^2) and sum(x) have
    // visibly different gradients in every coordinate
    let x = away_from(uniform(&mut rng, vec![3, 4]), 1.0, 0.3);
    let analytic = {
        let mut g = Graph::new();
        let xn = g.input(x.clone())?;
        let wrong_root = g.sum(xn)?;
        g.backward(wrong_root)?;
        g.grad(xn)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.input(probe.clone())?;
        let sq = g.mul(xn, xn)?;
        let tot = g.sum(sq)?;
        let half = g.scale(tot, 0.5)?;
        g.value(half).item()
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
