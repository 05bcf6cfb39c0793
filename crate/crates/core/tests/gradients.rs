//! Tape gradients against central finite differences, over 20 seeds per layer.

use gmmt_core::fusion::{HeadConfig, TrackHead, TypicalFuse};
use gmmt_core::metrics::BBox;
use gmmt_core::nets::{Denoiser, DenoiserConfig, Discriminator, DiscriminatorConfig};
use gmmt_core::rng::{normal_tensor, stream, uniform_tensor};
use gmmt_core::tensor::{grad_check, BatchNormMode, Bound, GradCheckOptions, Graph, ParamSet};
use gmmt_core::{Result, Tensor, Var};

const SEEDS: u64 = 20;
const TOLERANCE: f64 = 1e-5;

fn randn(seed: u64, k: u64, shape: &[usize]) -> Tensor<f64> {
    normal_tensor(&mut stream(seed, 100 + k), shape)
}

fn check<F>(name: &str, seed: u64, inputs: &[Tensor<f64>], coords: Option<usize>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions { max_coords_per_input: coords, seed, ..Default::default() };
    let rep = grad_check(f, inputs, &opts).unwrap();
    assert!(rep.checked > 0, "{name} seed {seed}: nothing probed");
    assert!(rep.max_rel_error < TOLERANCE, "{name} seed {seed}: max relative error {:e}", rep.max_rel_error);
}

fn each_seed(mut body: impl FnMut(u64)) {
    for seed in 0..SEEDS {
        body(seed);
    }
}

#[test]
fn conv2d_stride_and_padding() {
    each_seed(|s| {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let ins = [randn(s, 0, &[2, 3, 6, 5]), randn(s, 1, &[4, 3, 3, 3]), randn(s, 2, &[4])];
            check("conv2d", s, &ins, None, |g, v| g.conv2d(v[0], v[1], v[2], stride, pad));
        }
    });
}

#[test]
fn concat_and_slice() {
    each_seed(|s| {
        let ins = [randn(s, 0, &[2, 2, 3, 3]), randn(s, 1, &[2, 3, 3, 3])];
        check("concat", s, &ins, None, |g, v| g.concat(&[v[0], v[1]]));
        check("slice_channels", s, &ins[1..], None, |g, v| g.slice_channels(v[0], 1, 2));
    });
}

#[test]
fn pointwise_activations() {
    each_seed(|s| {
        let ins = [randn(s, 0, &[2, 3, 4, 4])];
        check("relu", s, &ins, None, |g, v| Ok(g.relu(v[0])));
        check("sigmoid", s, &ins, None, |g, v| Ok(g.sigmoid(v[0])));
    });
}

#[test]
fn channel_norm() {
    each_seed(|s| {
        let ins = [randn(s, 0, &[2, 3, 4, 4]), randn(s, 1, &[3]), randn(s, 2, &[3])];
        check("channel_norm", s, &ins, None, |g, v| g.channel_norm(v[0], v[1], v[2]));
        check("channel_norm_eps", s, &ins, None, |g, v| g.channel_norm_eps(v[0], v[1], v[2], 0.5));
    });
}

#[test]
fn batch_norm_train_and_eval() {
    each_seed(|s| {
        let ins = [randn(s, 0, &[3, 2, 4, 4]), randn(s, 1, &[2]), randn(s, 2, &[2])];
        check("batch_norm/train", s, &ins, None, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train)?.0));
        let (mean, var) = ([0.3, -0.2], [1.5, 0.7]);
        check("batch_norm/eval", s, &ins, None, |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var })?.0)
        });
    });
}

#[test]
fn arithmetic_and_reductions() {
    each_seed(|s| {
        let ins = [randn(s, 0, &[2, 2, 3, 3]), randn(s, 1, &[2, 2, 3, 3])];
        check("mse", s, &ins, None, |g, v| g.mse(v[0], v[1]));
        check("add", s, &ins, None, |g, v| g.add(v[0], v[1]));
        check("sub", s, &ins, None, |g, v| g.sub(v[0], v[1]));
        check("mul", s, &ins, None, |g, v| g.mul(v[0], v[1]));
        check("scale", s, &ins[..1], None, |g, v| Ok(g.scale(v[0], -1.7)));
        check("scale_batch", s, &ins[..1], None, |g, v| g.scale_batch(v[0], &[0.5, -2.0]));
        check("spatial_mean", s, &ins[..1], None, |g, v| g.spatial_mean(v[0]));
        check("select", s, &ins[..1], None, |g, v| g.select(v[0], &[0, 5, 5, 35]));
        check("sum", s, &ins[..1], None, |g, v| Ok(g.sum(v[0])));
    });
}

#[test]
fn linear_and_broadcast() {
    each_seed(|s| {
        let ins = [randn(s, 0, &[3, 4]), randn(s, 1, &[5, 4]), randn(s, 2, &[5])];
        check("linear", s, &ins, None, |g, v| g.linear(v[0], v[1], v[2]));
        check("broadcast_spatial", s, &ins[..1], None, |g, v| g.broadcast_spatial(v[0], 2, 3));
    });
}

/// Inputs followed by every parameter of `ps`; `f` gets the parameters re-bound.
fn with_params(inputs: Vec<Tensor<f64>>, ps: &ParamSet<f64>) -> Vec<Tensor<f64>> {
    let mut all = inputs;
    all.extend(ps.iter().map(|(_, p)| p.value.clone()));
    all
}

fn small_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        blocks: 2,
        base_channels: 6,
        feature_channels: 4,
        height: 8,
        width: 8,
        time_embed_dim: 8,
        max_timestep: 1000,
    }
}

#[test]
fn full_denoiser() {
    each_seed(|s| {
        let mut d = Denoiser::<f64>::new(small_denoiser(), &mut stream(s, 1)).unwrap();
        // Nonzero output projection so every parameter receives gradient.
        let out = d.params.by_name_mut("out.weight").unwrap();
        out.value = uniform_tensor(&mut stream(s, 2), out.value.shape(), -0.3, 0.3);
        let x: Vec<Tensor<f64>> = (0..3).map(|k| randn(s, k, &[2, 4, 8, 8])).collect();
        let ins = with_params(x, &d.params);
        check("denoiser", s, &ins, Some(24), |g, v| {
            let p = Bound::from_vars(v[3..].to_vec());
            d.forward(g, &p, v[0], v[1], v[2], &[17, 640])
        });
    });
}

#[test]
fn discriminator() {
    each_seed(|s| {
        let cfg = DiscriminatorConfig { feature_channels: 2, height: 16, width: 16, base_channels: 3 };
        let d = Discriminator::<f64>::new(cfg, &mut stream(s, 3)).unwrap();
        let x: Vec<Tensor<f64>> = (0..3).map(|k| randn(s, k, &[3, 2, 16, 16])).collect();
        let ins = with_params(x, &d.params);
        for batch_stats in [true, false] {
            check("discriminator", s, &ins, Some(24), |g, v| {
                let p = Bound::from_vars(v[3..].to_vec());
                Ok(d.forward(g, &p, v[0], v[1], v[2], batch_stats)?.0)
            });
        }
    });
}

#[test]
fn typical_fusion() {
    each_seed(|s| {
        let t = TypicalFuse::<f64>::new(3, &mut stream(s, 4));
        let ins = with_params(vec![randn(s, 0, &[2, 3, 5, 5]), randn(s, 1, &[2, 3, 5, 5])], &t.params);
        check("typical", s, &ins, Some(40), |g, v| {
            let p = Bound::from_vars(v[2..].to_vec());
            t.forward(g, &p, v[0], v[1])
        });
    });
}

#[test]
fn tracking_head_and_loss() {
    each_seed(|s| {
        let head = TrackHead::<f64>::new(HeadConfig { hidden_channels: 5 }, 3, &mut stream(s, 5)).unwrap();
        let ins = with_params(vec![randn(s, 0, &[2, 3, 6, 6])], &head.params);
        let truth = [BBox::new(1.0, 4.0, 2.0, 3.0), BBox::new(5.0, 0.0, 3.0, 2.0)];
        check("head", s, &ins, Some(40), |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let out = head.forward(g, &p, v[0])?;
            head.loss(g, out, &truth)
        });
    });
}
