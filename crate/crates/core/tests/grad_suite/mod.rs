//! Finite-difference checks of every taped operation and of the full model,
//! shared by the `gradients` and `acceptance` targets.
#![allow(dead_code)]

use std::rc::Rc;
use std::time::Instant;

use crate::common::{check_op, randn, uniform};
use stereomamba::model::{AggregateConfig, BackboneConfig, ModelConfig, StereoModel};
use stereomamba::regress;
use stereomamba::Tensor;

/// Values bounded away from the ReLU kink so `x ± h` never straddles it.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| if v.abs() < 0.1 { v + 0.3f64.copysign(v) } else { v })
}

pub fn elementwise_and_broadcast() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    let row = randn(&[4], 3);
    check_op("add", &[a.clone(), row.clone()], 64, |g, v| g.add(v[0], v[1]));
    check_op("sub", &[a.clone(), b.clone()], 64, |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[a.clone(), b.clone()], 64, |g, v| g.mul(v[0], v[1]));
    check_op("mul_broadcast", &[a.clone(), row], 64, |g, v| g.mul(v[0], v[1]));
    check_op("scale", &[a.clone()], 64, |g, v| Ok(g.scale(v[0], -1.7)));
    check_op("add_scalar", &[a.clone()], 64, |g, v| Ok(g.add_scalar(v[0], 0.4)));
    check_op("sum", &[a.clone()], 64, |g, v| Ok(g.sum(v[0])));
    check_op("mean", &[a], 64, |g, v| Ok(g.mean(v[0])));
}

pub fn structural_ops() {
    let a = randn(&[3, 4], 4);
    let b = randn(&[2, 4], 5);
    check_op("reshape", &[a.clone()], 64, |g, v| g.reshape(v[0], &[2, 6]));
    check_op("transpose2", &[a.clone()], 64, |g, v| g.transpose2(v[0]));
    check_op("concat", &[a.clone(), b], 64, |g, v| g.concat(&[v[0], v[1]]));
    // Repeated and dropped indices exercise scatter-add in the adjoint.
    let index: Rc<[usize]> = vec![11, 0, 0, 5, 7, 3, 3, 3, 9, 1].into();
    check_op("gather", &[a], 64, move |g, v| g.gather(v[0], index.clone(), &[2, 5]));
}

pub fn unary_ops() {
    let x = away_from_zero(&[4, 5], 6);
    check_op("relu", &[x.clone()], 64, |g, v| Ok(g.relu(v[0])));
    check_op("silu", &[x.clone()], 64, |g, v| Ok(g.silu(v[0])));
    check_op("gelu", &[x.clone()], 64, |g, v| Ok(g.gelu(v[0])));
    check_op("softplus", &[x.clone()], 64, |g, v| Ok(g.softplus(v[0])));
    check_op("exp", &[x], 64, |g, v| Ok(g.exp(v[0])));
}

pub fn softmax_and_norms() {
    let x = randn(&[3, 4, 2], 7);
    check_op("softmax_axis0", &[x.clone()], 64, |g, v| g.softmax(v[0], 0));
    check_op("softmax_axis1", &[x.clone()], 64, |g, v| g.softmax(v[0], 1));
    check_op("softmax_lastdim", &[x], 64, |g, v| g.softmax_lastdim(v[0]));
    let x = randn(&[4, 5], 8);
    let gain = uniform(&[5], 0.5, 1.5, 9);
    let bias = randn(&[5], 10);
    check_op("layer_norm", &[x.clone(), gain.clone(), bias], 64, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    check_op("rms_norm", &[x, gain], 64, |g, v| g.rms_norm(v[0], v[1], 1e-6));
}

pub fn linear_with_and_without_bias() {
    let x = randn(&[2, 3, 4], 11);
    let w = randn(&[5, 4], 12);
    let b = randn(&[5], 13);
    check_op("linear", &[x.clone(), w.clone(), b], 128, |g, v| g.linear(v[0], v[1], Some(v[2])));
    check_op("linear_nobias", &[x, w], 128, |g, v| g.linear(v[0], v[1], None));
}

pub fn conv2d_family() {
    let x = randn(&[2, 5, 6], 14);
    let w = randn(&[3, 2, 3, 3], 15);
    let b = randn(&[3], 16);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        check_op(&format!("conv2d_s{stride}p{pad}"), &[x.clone(), w.clone(), b.clone()], 80, move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        });
    }
    let dw = randn(&[2, 1, 3, 3], 17);
    let db = randn(&[2], 18);
    check_op("depthwise2d", &[x.clone(), dw, db], 80, |g, v| g.depthwise2d(v[0], v[1], Some(v[2]), 1));
    let xt = randn(&[2, 3, 4], 19);
    let wt = randn(&[2, 3, 2, 2], 20);
    let bt = randn(&[3], 21);
    check_op("transpose2d", &[xt.clone(), wt, bt.clone()], 80, |g, v| g.transpose2d(v[0], v[1], Some(v[2]), 2, 0));
    let wt3 = randn(&[2, 3, 3, 3], 22);
    check_op("transpose2d_k3p1", &[xt, wt3, bt], 80, |g, v| g.transpose2d(v[0], v[1], Some(v[2]), 2, 1));
}

pub fn conv3d_family() {
    let x = randn(&[2, 4, 4, 5], 23);
    let w = randn(&[3, 2, 3, 3, 3], 24);
    let b = randn(&[3], 25);
    for stride in [1, 2] {
        check_op(&format!("conv3d_s{stride}"), &[x.clone(), w.clone(), b.clone()], 80, move |g, v| {
            g.conv3d(v[0], v[1], Some(v[2]), stride, 1)
        });
    }
    let xt = randn(&[2, 2, 2, 3], 26);
    let wt = randn(&[2, 3, 2, 2, 2], 27);
    check_op("transpose3d", &[xt, wt, b], 80, |g, v| g.transpose3d(v[0], v[1], Some(v[2]), 2, 0));
}

pub fn selective_scan() {
    let (t, n, p) = (9, 4, 3);
    let a = uniform(&[t], 0.2, 0.95, 28);
    let b = randn(&[t, n], 29);
    let c = randn(&[t, n], 30);
    let x = randn(&[t, p], 31);
    check_op("ssm_scan", &[a, b, c, x], 64, |g, v| g.ssm_scan(v[0], v[1], v[2], v[3]));
}

pub fn correlation_volume() {
    let l = randn(&[4, 8, 8], 32);
    let r = randn(&[4, 8, 8], 33);
    check_op("gwc_volume", &[l, r], 96, |g, v| g.gwc_volume(v[0], v[1], 4, 2));
}

pub fn upsample_and_regression_ops() {
    let x = randn(&[2, 3, 4], 34);
    check_op("upsample_x2", &[x.clone()], 64, |g, v| g.upsample_trilinear(v[0], [4, 6, 8]));
    check_op("upsample_odd", &[x], 64, |g, v| g.upsample_trilinear(v[0], [3, 5, 7]));
    let x = randn(&[4, 3, 5], 35);
    let weights: Rc<[f64]> = vec![0.0, 1.0, 2.0, 3.0].into();
    check_op("weighted_sum_axis0", &[x], 64, move |g, v| g.weighted_sum_axis0(v[0], weights.clone()));
    // Offsets on both sides of the unit breakpoint, never at it.
    let pred = Tensor::from_fn(&[4, 5], |i| (i as f64 - 9.5) * 0.37);
    let target: Rc<[f64]> = vec![0.0; 20].into();
    let mask: Rc<[bool]> = (0..20).map(|i| i % 3 != 0).collect();
    check_op("smooth_l1_masked", &[pred], 64, move |g, v| g.smooth_l1_masked(v[0], target.clone(), mask.clone()));
}

pub fn three_layer_composite() {
    let x = randn(&[6, 4], 36);
    let w1 = randn(&[5, 4], 37);
    let w2 = randn(&[5, 5], 38);
    let w3 = randn(&[2, 5], 39);
    check_op("composite", &[x, w1, w2, w3], 64, |g, v| {
        let h = g.linear(v[0], v[1], None)?;
        let h = g.gelu(h);
        let h = g.linear(h, v[2], None)?;
        let h = g.silu(h);
        let h = g.linear(h, v[3], None)?;
        g.softmax_lastdim(h)
    });
}

/// Image 32×64 gives an 8×16 quarter-resolution volume; `D_max = 16`.
fn tiny_model() -> StereoModel {
    let cfg = ModelConfig {
        channels: BackboneConfig {
            c0: 8,
            c1: 8,
            c2: 8,
            c3: 8,
            c4: 8,
            vss_blocks_per_stage: [1, 1, 1, 1],
            state_dim: 4,
            ffn_expansion: 2,
        },
        fused_channels: 8,
        groups: 4,
        d_max: 16,
        aggregate: AggregateConfig {
            channels: 4,
            hourglass_count: 3,
            flat_hourglass: false,
        },
        ..ModelConfig::default()
    };
    let mut model = StereoModel::new(cfg, 7).unwrap();
    // Zero-initialized biases put dead ReLU inputs exactly on the kink, where
    // central differences see the average of both one-sided slopes.
    for (k, name) in model.params.names().iter().enumerate() {
        let p = model.params.get(name).unwrap();
        let jitter = randn(p.shape(), 500 + k as u64).scale(0.05);
        let moved = p.zip_map(&jitter, |a, b| a + b).unwrap();
        model.params.set(name, moved).unwrap();
    }
    model
}

fn model_loss(model: &StereoModel, left: &Tensor, right: &Tensor, gt: &Tensor, mask: &[bool]) -> (stereomamba::Graph, stereomamba::Var) {
    let mut g = stereomamba::Graph::new();
    let l = g.constant(left.clone());
    let r = g.constant(right.clone());
    let out = model.forward(&mut g, l, r, true).unwrap();
    let loss = regress::multi_output_loss(&mut g, &out.disparities, gt, mask, [0.5, 0.5, 0.7, 1.0]).unwrap();
    (g, loss)
}

/// Each loss evaluation sums thousands of terms of an O(10) loss, so `f(θ ± h)`
/// carries ~1e-14 absolute round-off and the quotient ~1e-9. Directional
/// derivatives below this scale are compared absolutely at `1e-5 · 1e-3`.
const MODEL_FD_FLOOR: f64 = 1e-3;

pub fn full_tiny_model_matches_finite_differences() {
    let started = Instant::now();
    let mut model = tiny_model();
    let (h, w) = (32, 64);
    let left = randn(&[3, h, w], 40);
    let right = randn(&[3, h, w], 41);
    let gt = uniform(&[h, w], 0.5, 14.0, 42);
    let mask: Vec<bool> = (0..h * w).map(|i| i % 7 != 0).collect();

    let (mut g, loss) = model_loss(&model, &left, &right, &gt, &mask);
    let grads = g.backward(loss).unwrap();
    let pg = g.param_grads(&grads);
    assert_eq!(pg.len(), model.params.len(), "every parameter reaches the loss");

    let names = model.params.names();
    let mut worst: f64 = 0.0;
    for (k, name) in names.iter().enumerate() {
        let base = model.params.get(name).unwrap().clone();
        // Unit direction, so the step in parameter space is exactly `FD_STEP`.
        let dir = randn(base.shape(), 1000 + k as u64);
        let dir = dir.scale(1.0 / dir.dot(&dir).sqrt());
        let analytic = pg[name].dot(&dir);
        let eval = |model: &mut StereoModel, s: f64| {
            let moved = base.zip_map(&dir, |p, d| p + s * d).unwrap();
            model.params.set(name, moved).unwrap();
            let (g, loss) = model_loss(model, &left, &right, &gt, &mask);
            g.value(loss).item()
        };
        let up = eval(&mut model, crate::common::FD_STEP);
        let down = eval(&mut model, -crate::common::FD_STEP);
        model.params.set(name, base.clone()).unwrap();
        let numeric = (up - down) / (2.0 * crate::common::FD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MODEL_FD_FLOOR);
        worst = worst.max(rel);
        assert!(rel <= crate::common::FD_REL_TOL, "{name}: adjoint {analytic:e} vs finite difference {numeric:e}");
    }
    eprintln!("model gradient check: {} tensors, worst relative error {worst:.2e}, {:.1?}", names.len(), started.elapsed());
}

pub const ALL: &[(&str, fn())] = &[
    ("elementwise_and_broadcast", elementwise_and_broadcast),
    ("structural_ops", structural_ops),
    ("unary_ops", unary_ops),
    ("softmax_and_norms", softmax_and_norms),
    ("linear_with_and_without_bias", linear_with_and_without_bias),
    ("conv2d_family", conv2d_family),
    ("conv3d_family", conv3d_family),
    ("selective_scan", selective_scan),
    ("correlation_volume", correlation_volume),
    ("upsample_and_regression_ops", upsample_and_regression_ops),
    ("three_layer_composite", three_layer_composite),
    ("full_tiny_model_matches_finite_differences", full_tiny_model_matches_finite_differences),
];
