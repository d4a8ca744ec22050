//! Density-guided attention over the visual pyramid.
//!
//! Per level, the density features drive a spatial gate (channelwise
//! max/avg pooling, a 7x7 conv, sigmoid) applied to the visual features,
//! and the gated features then drive a channel gate (spatial mean/max
//! pooling through one shared 4-layer MLP per branch, summed, sigmoid).
//! Gates stay strictly inside (0, 1), so attended features never grow.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::params::ParamStore;
use crate::scenegen::NUM_LEVELS;
use crate::{Error, Result};

pub const SPATIAL_KERNEL: usize = 7;
pub const CHANNEL_MLP_LAYERS: usize = 4;

/// Registers the spatial gate convs for every level under
/// `{prefix}.l{level}.spatial`; the levels do not share weights.
pub fn init_spatial_attention(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
) -> Result<()> {
    for lvl in 0..NUM_LEVELS {
        nn::init_conv(
            store,
            rng,
            &format!("{prefix}.l{lvl}.spatial"),
            SPATIAL_KERNEL,
            2,
            1,
            false,
        )?;
    }
    Ok(())
}

/// Registers the channel gate MLPs for every level under
/// `{prefix}.l{level}.chan`; the levels do not share weights.
pub fn init_channel_attention(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    for lvl in 0..NUM_LEVELS {
        nn::init_mlp(
            store,
            rng,
            &format!("{prefix}.l{lvl}.chan"),
            &[c; CHANNEL_MLP_LAYERS + 1],
        )?;
    }
    Ok(())
}

/// Registers spatial-conv and channel-MLP parameters for every level.
pub fn init_attention(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    c: usize,
) -> Result<()> {
    init_spatial_attention(store, rng, prefix)?;
    init_channel_attention(store, rng, prefix, c)
}

/// `sigmoid(conv7x7([max_c(D) ‖ avg_c(D)]))` as a `[h, w, 1]` gate.
pub fn spatial_attention_map(
    g: &mut Graph,
    store: &ParamStore,
    level_prefix: &str,
    d: NodeId,
) -> Result<NodeId> {
    let maxed = g.max_last(d)?;
    let avged = g.mean_last(d)?;
    let stacked = g.concat_last(&[maxed, avged])?;
    let conv = nn::conv(g, store, &format!("{level_prefix}.spatial"), stacked)?;
    g.sigmoid(conv)
}

/// Gates features spatially: `F ⊙ A_s`, the gate broadcast over channels.
pub fn apply_spatial(g: &mut Graph, f_v: NodeId, a_s: NodeId) -> Result<NodeId> {
    let (fs, as_) = (g.value(f_v).shape(), g.value(a_s).shape());
    if fs.len() != 3 || as_.len() != 3 || fs[..2] != as_[..2] || as_[2] != 1 {
        return Err(Error::ShapeMismatch {
            context: "cadattn::apply_spatial",
            expected: vec![fs[0], fs[1], 1],
            got: as_.to_vec(),
        });
    }
    g.mul(f_v, a_s)
}

/// `sigmoid(MLP(avg_s(F)) + MLP(max_s(F)))` as a `[1, C]` gate; the two
/// pooled branches share one MLP.
pub fn channel_attention_map(
    g: &mut Graph,
    store: &ParamStore,
    level_prefix: &str,
    f: NodeId,
) -> Result<NodeId> {
    let shape = g.value(f).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(
            "cadattn::channel_attention_map",
            "expected a [h, w, C] level",
        ));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(f, vec![h * w, c])?;
    let avg = g.col_mean(flat)?;
    let max = g.col_max(flat)?;
    let mlp_prefix = format!("{level_prefix}.chan");
    let avg_out = nn::mlp(g, store, &mlp_prefix, avg, CHANNEL_MLP_LAYERS)?;
    let max_out = nn::mlp(g, store, &mlp_prefix, max, CHANNEL_MLP_LAYERS)?;
    let summed = g.add(avg_out, max_out)?;
    g.sigmoid(summed)
}

/// Gates features per channel: `F ⊙ A_c`, the gate broadcast spatially.
pub fn apply_channel(g: &mut Graph, f: NodeId, a_c: NodeId) -> Result<NodeId> {
    let (fs, cs) = (g.value(f).shape(), g.value(a_c).shape());
    if fs.len() != 3 || cs != [1, fs[2]] {
        return Err(Error::ShapeMismatch {
            context: "cadattn::apply_channel",
            expected: vec![1, fs[2]],
            got: cs.to_vec(),
        });
    }
    g.mul(f, a_c)
}

/// One level's attended features together with the gates that made them.
pub struct AttendedLevel {
    pub f_hat: NodeId,
    pub spatial: NodeId,
    pub channel: NodeId,
}

/// Full per-level pass: spatial gate from the density features, channel
/// gate from the spatially gated visual features.
pub fn attend_level(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    level: usize,
    f_v: NodeId,
    d: NodeId,
) -> Result<AttendedLevel> {
    let level_prefix = format!("{prefix}.l{level}");
    let a_s = spatial_attention_map(g, store, &level_prefix, d)?;
    let f_dot = apply_spatial(g, f_v, a_s)?;
    let a_c = channel_attention_map(g, store, &level_prefix, f_dot)?;
    let f_hat = apply_channel(g, f_dot, a_c)?;
    Ok(AttendedLevel {
        f_hat,
        spatial: a_s,
        channel: a_c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::gradcheck;
    use crate::nn::gaussian;
    use crate::tensor::Tensor;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| gaussian(rng)).collect()).unwrap()
    }

    fn attn_store(c: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_attention(&mut store, &mut rng, "attn", c).unwrap();
        store
    }

    #[test]
    fn zero_density_gives_half_gate() {
        let store = attn_store(4, 1);
        let mut g = Graph::new();
        let d = g.input(Tensor::zeros(vec![6, 5, 4])).unwrap();
        let a = spatial_attention_map(&mut g, &store, "attn.l0", d).unwrap();
        assert_eq!(g.value(a).shape(), &[6, 5, 1]);
        assert!(g.value(a).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn channelwise_constant_density_gives_flat_interior() {
        let store = attn_store(4, 1);
        let mut g = Graph::new();
        // distinct constants per channel: pooled planes are constant
        let d = Tensor::from_fn(vec![10, 10, 4], |idx| (idx[2] as f64 + 1.0) * 0.3);
        let dn = g.input(d).unwrap();
        let a = spatial_attention_map(&mut g, &store, "attn.l1", dn).unwrap();
        let t = g.value(a);
        let half = SPATIAL_KERNEL / 2;
        let center = t.at3(5, 5, 0);
        for y in half..10 - half {
            for x in half..10 - half {
                assert!((t.at3(y, x, 0) - center).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_map_matches_pool_conv_sigmoid_oracle() {
        let c = 5;
        let store = attn_store(c, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = rand_tensor(&mut rng, vec![8, 9, c]);
        let mut g = Graph::new();
        let dn = g.input(d.clone()).unwrap();
        let a = spatial_attention_map(&mut g, &store, "attn.l2", dn).unwrap();
        let got = g.value(a);

        let w = store.get("attn.l2.spatial.w").unwrap();
        let b = store.get("attn.l2.spatial.b").unwrap();
        let (h, wd) = (8usize, 9usize);
        let k = SPATIAL_KERNEL;
        let half = (k / 2) as isize;
        for y in 0..h {
            for x in 0..wd {
                let mut acc = b.data()[0];
                for kh in 0..k {
                    for kw in 0..k {
                        let sy = y as isize + kh as isize - half;
                        let sx = x as isize + kw as isize - half;
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let (sy, sx) = (sy as usize, sx as usize);
                        let mut maxed = f64::NEG_INFINITY;
                        let mut mean = 0.0;
                        for ch in 0..c {
                            let v = d.at3(sy, sx, ch);
                            maxed = maxed.max(v);
                            mean += v / c as f64;
                        }
                        for (ci, pooled) in [maxed, mean].into_iter().enumerate() {
                            let widx = (kh * k + kw) * 2 + ci;
                            acc += pooled * w.data()[widx];
                        }
                    }
                }
                let want = 1.0 / (1.0 + (-acc).exp());
                assert!((got.at3(y, x, 0) - want).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn apply_spatial_identity_halving_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand_tensor(&mut rng, vec![4, 5, 3]);
        let mut g = Graph::new();
        let fv = g.input(f.clone()).unwrap();
        let ones = g.input(Tensor::full(vec![4, 5, 1], 1.0)).unwrap();
        let id = apply_spatial(&mut g, fv, ones).unwrap();
        assert_eq!(g.value(id).data(), f.data());
        let halves = g.input(Tensor::full(vec![4, 5, 1], 0.5)).unwrap();
        let halved = apply_spatial(&mut g, fv, halves).unwrap();
        for (got, want) in g.value(halved).data().iter().zip(f.data()) {
            assert!((got - want * 0.5).abs() < 1e-15);
        }
        let gate = rand_tensor(&mut rng, vec![4, 5, 1]);
        let gn = g.input(gate.clone()).unwrap();
        let gated = apply_spatial(&mut g, fv, gn).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for ch in 0..3 {
                    let want = f.at3(y, x, ch) * gate.at3(y, x, 0);
                    assert!((g.value(gated).at3(y, x, ch) - want).abs() < 1e-15);
                }
            }
        }
        // mismatched spatial extent
        let bad = g.input(Tensor::full(vec![5, 4, 1], 1.0)).unwrap();
        assert!(apply_spatial(&mut g, fv, bad).is_err());
    }

    #[test]
    fn zero_features_give_half_channel_gate() {
        let store = attn_store(6, 2);
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(vec![3, 7, 6])).unwrap();
        let a = channel_attention_map(&mut g, &store, "attn.l0", f).unwrap();
        assert_eq!(g.value(a).shape(), &[1, 6]);
        assert!(g.value(a).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn channel_map_matches_two_branch_shared_mlp_oracle() {
        let c = 4;
        let store = attn_store(c, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = rand_tensor(&mut rng, vec![5, 6, c]);
        let mut g = Graph::new();
        let fv = g.input(f.clone()).unwrap();
        let a = channel_attention_map(&mut g, &store, "attn.l3", fv).unwrap();
        let got = g.value(a);

        let mut avg = vec![0.0; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for y in 0..5 {
            for x in 0..6 {
                for ch in 0..c {
                    let v = f.at3(y, x, ch);
                    avg[ch] += v / 30.0;
                    max[ch] = max[ch].max(v);
                }
            }
        }
        let run_mlp = |input: &[f64]| -> Vec<f64> {
            let mut h = input.to_vec();
            for layer in 0..CHANNEL_MLP_LAYERS {
                let w = store.get(&format!("attn.l3.chan.l{layer}.w")).unwrap();
                let b = store.get(&format!("attn.l3.chan.l{layer}.b")).unwrap();
                let mut next = b.data().to_vec();
                for (i, hv) in h.iter().enumerate() {
                    for j in 0..c {
                        next[j] += hv * w.at2(i, j);
                    }
                }
                if layer + 1 < CHANNEL_MLP_LAYERS {
                    for v in next.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                h = next;
            }
            h
        };
        let branch_a = run_mlp(&avg);
        let branch_m = run_mlp(&max);
        for ch in 0..c {
            let want = 1.0 / (1.0 + (-(branch_a[ch] + branch_m[ch])).exp());
            assert!((got.at2(0, ch) - want).abs() < 1e-12, "channel {ch}");
        }
    }

    #[test]
    fn apply_channel_identity_masking_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_tensor(&mut rng, vec![3, 4, 3]);
        let mut g = Graph::new();
        let fv = g.input(f.clone()).unwrap();
        let ones = g.input(Tensor::full(vec![1, 3], 1.0)).unwrap();
        let id = apply_channel(&mut g, fv, ones).unwrap();
        assert_eq!(g.value(id).data(), f.data());
        // near-one-hot gate suppresses the other channels
        let hot = g
            .input(Tensor::new(vec![1, 3], vec![0.999, 0.001, 0.001]).unwrap())
            .unwrap();
        let masked = apply_channel(&mut g, fv, hot).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                assert!(g.value(masked).at3(y, x, 1).abs() <= f.at3(y, x, 1).abs() * 0.001 + 1e-15);
            }
        }
        let gate = rand_tensor(&mut rng, vec![1, 3]);
        let gn = g.input(gate.clone()).unwrap();
        let gated = apply_channel(&mut g, fv, gn).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for ch in 0..3 {
                    let want = f.at3(y, x, ch) * gate.at2(0, ch);
                    assert!((g.value(gated).at3(y, x, ch) - want).abs() < 1e-15);
                }
            }
        }
        let bad = g.input(Tensor::full(vec![1, 4], 1.0)).unwrap();
        assert!(apply_channel(&mut g, fv, bad).is_err());
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval_and_shrink_features() {
        let c = 6;
        let store = attn_store(c, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for trial in 0..20 {
            let f = rand_tensor(&mut rng, vec![8, 8, c]);
            let d = rand_tensor(&mut rng, vec![8, 8, c]);
            let mut g = Graph::new();
            let fv = g.input(f.clone()).unwrap();
            let dn = g.input(d).unwrap();
            let out = attend_level(&mut g, &store, "attn", trial % NUM_LEVELS, fv, dn).unwrap();
            for v in g.value(out.spatial).data() {
                assert!(*v > 0.0 && *v < 1.0);
            }
            for v in g.value(out.channel).data() {
                assert!(*v > 0.0 && *v < 1.0);
            }
            assert_eq!(g.value(out.f_hat).shape(), f.shape());
            for (hat, orig) in g.value(out.f_hat).data().iter().zip(f.data()) {
                assert!(hat.abs() <= orig.abs());
            }
        }
    }

    #[test]
    fn attention_parameters_and_density_input_pass_grad_check() {
        let c = 3;
        let mut store = attn_store(c, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        gradcheck::jitter_params(&mut store, &mut rng, 0.05);
        let f = rand_tensor(&mut rng, vec![4, 4, c]);
        let d = rand_tensor(&mut rng, vec![4, 4, c]);
        let build_with = |g: &mut Graph, store: &ParamStore, dn: NodeId| -> crate::Result<NodeId> {
            let fv = g.input(f.clone())?;
            let out = attend_level(g, store, "attn", 0, fv, dn)?;
            let sq = g.mul(out.f_hat, out.f_hat)?;
            g.sum(sq)
        };
        for path in [
            "attn.l0.spatial.w",
            "attn.l0.spatial.b",
            "attn.l0.chan.l0.w",
            "attn.l0.chan.l3.b",
        ] {
            let err = gradcheck::grad_check_param(
                &store,
                path,
                |g, st| {
                    let dn = g.input(d.clone())?;
                    build_with(g, st, dn)
                },
                gradcheck::DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "{path}: {err}");
        }
        // gradient w.r.t. the density features themselves
        let err = gradcheck::grad_check(
            |g, dn| build_with(g, &store, dn),
            &d,
            gradcheck::DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "density input: {err}");
    }
}
