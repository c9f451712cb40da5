//! Structural checks of the network: shape schedule, weight sharing,
//! directional scans, gradient reachability.

mod common;

use common::{randn, uniform};
use stereomamba::model::{fe_mamba, fusion, layers, AggregateConfig, BackboneConfig, BackboneKind, ModelConfig, StereoModel};
use stereomamba::model::aggregate;
use stereomamba::ssm::{ssm_scan, SsmSequence};
use stereomamba::{Graph, ParamStore, Tensor};

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        c0: 8,
        c1: 8,
        c2: 12,
        c3: 16,
        c4: 8,
        vss_blocks_per_stage: [1, 1, 1, 1],
        state_dim: 4,
        ffn_expansion: 2,
    }
}

fn small_model(backbone: BackboneKind, mff: bool) -> StereoModel {
    let cfg = ModelConfig {
        backbone,
        channels: small_backbone(),
        mff_enabled: mff,
        fused_channels: 8,
        groups: 4,
        d_max: 16,
        aggregate: AggregateConfig {
            channels: 4,
            hourglass_count: 3,
            flat_hourglass: false,
        },
    };
    StereoModel::new(cfg, 3).unwrap()
}

#[test]
fn default_model_follows_the_resolution_schedule() {
    let model = StereoModel::new(ModelConfig::default(), 0).unwrap();
    let c = &model.config.channels;
    let mut g = Graph::new();
    let l = g.constant(uniform(&[3, 64, 128], 0.0, 1.0, 1));
    let r = g.constant(uniform(&[3, 64, 128], 0.0, 1.0, 2));
    let out = model.forward(&mut g, l, r, true).unwrap();
    for p in [&out.left, &out.right] {
        assert_eq!(g.shape(p.f0), &[c.c0, 16, 32]);
        assert_eq!(g.shape(p.f1), &[c.c1, 16, 32]);
        assert_eq!(g.shape(p.f2), &[c.c2, 8, 16]);
        assert_eq!(g.shape(p.f3), &[c.c3, 4, 8]);
        assert_eq!(g.shape(p.f4), &[c.c4, 16, 32]);
    }
    assert_eq!(g.shape(out.fused_left), &[64, 16, 32]);
    assert_eq!(model.config.volume_feature_channels(), 64);
    assert_eq!(g.shape(out.volume), &[8, 16, 16, 32]);
    for r in out.raw {
        assert_eq!(g.shape(r), &[1, 16, 16, 32]);
    }
    for d in out.disparities {
        assert_eq!(g.shape(d), &[64, 128]);
    }
}

#[test]
fn aggregation_always_yields_four_outputs() {
    for hourglass_count in 0..=3 {
        let cfg = AggregateConfig {
            channels: 4,
            hourglass_count,
            flat_hourglass: false,
        };
        let mut store = ParamStore::new(1);
        aggregate::init(&mut store, &cfg, 8);
        let mut g = Graph::new();
        let v = g.input(randn(&[8, 8, 4, 8], 3));
        let outs = aggregate::aggregate(&mut g, &store, &cfg, v, false).unwrap();
        assert_eq!(outs.len(), 4);
        for o in outs {
            assert_eq!(g.shape(o), &[1, 8, 4, 8]);
        }
        let mut total = g.sum(outs[0]);
        for o in &outs[1..] {
            let s = g.sum(*o);
            total = g.add(total, s).unwrap();
        }
        let grads = g.backward(total).unwrap();
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), store.len(), "hourglass_count {hourglass_count}");
        for (name, grad) in &pg {
            assert!(grad.max_abs() > 0.0, "{name} has a zero gradient");
        }
    }
}

#[test]
fn small_volumes_need_the_flat_variant() {
    let mut g = Graph::new();
    let v = g.input(randn(&[4, 6, 5, 6], 4));
    let deep = AggregateConfig {
        channels: 4,
        hourglass_count: 2,
        flat_hourglass: false,
    };
    let mut store = ParamStore::new(1);
    aggregate::init(&mut store, &deep, 4);
    assert!(aggregate::aggregate(&mut g, &store, &deep, v, false).is_err());
    let flat = AggregateConfig {
        flat_hourglass: true,
        ..deep
    };
    let mut store = ParamStore::new(1);
    aggregate::init(&mut store, &flat, 4);
    let outs = aggregate::aggregate(&mut g, &store, &flat, v, false).unwrap();
    assert_eq!(g.shape(outs[3]), &[1, 6, 5, 6]);
}

#[test]
fn swapping_the_pair_swaps_the_features() {
    for kind in [BackboneKind::FeMamba, BackboneKind::PlainCnn] {
        let model = small_model(kind, true);
        let a = randn(&[3, 32, 48], 5);
        let b = randn(&[3, 32, 48], 6);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let (pl, pr) = model.extract(&mut g, va, vb).unwrap();
        let (ql, qr) = model.extract(&mut g, vb, va).unwrap();
        for (x, y) in [(pl.f1, qr.f1), (pl.f2, qr.f2), (pl.f3, qr.f3), (pl.f4, qr.f4), (pr.f4, ql.f4), (pr.f1, ql.f1)] {
            assert_eq!(g.value(x), g.value(y), "{kind:?}");
        }
        // Cross features genuinely mix the views.
        let mut g2 = Graph::new();
        let (va, vb) = (g2.constant(randn(&[3, 32, 48], 5)), g2.constant(randn(&[3, 32, 48], 7)));
        let (pl2, _) = model.extract(&mut g2, va, vb).unwrap();
        if kind == BackboneKind::FeMamba {
            assert_ne!(g.value(pl.f4), g2.value(pl2.f4));
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let model = small_model(BackboneKind::FeMamba, true);
        model.predict(&randn(&[3, 32, 48], 8), &randn(&[3, 32, 48], 9)).unwrap()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn predictions_stay_in_the_disparity_range() {
    let model = small_model(BackboneKind::FeMamba, true);
    let d = model.predict(&randn(&[3, 32, 64], 10).scale(5.0), &randn(&[3, 32, 64], 11).scale(5.0)).unwrap();
    assert_eq!(d.shape(), &[32, 64]);
    assert!(d.data().iter().all(|&v| (0.0..=15.0).contains(&v)));
}

#[test]
fn stem_is_a_patch_convolution() {
    let cfg = small_backbone();
    let mut store = ParamStore::new(0);
    fe_mamba::init_stem(&mut store, &cfg);
    store.set("backbone.stem.b", Tensor::zeros(&[cfg.c0])).unwrap();
    let mut g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[3, 64, 128]));
    let f0 = fe_mamba::stem_embed(&mut g, &store, zero).unwrap();
    assert_eq!(g.shape(f0), &[cfg.c0, 16, 32]);
    assert_eq!(g.value(f0).max_abs(), 0.0);

    // Against an explicit loop over each 4×4 patch.
    let img = randn(&[3, 16, 16], 12);
    store.set("backbone.stem.b", randn(&[cfg.c0], 13)).unwrap();
    let w = store.get("backbone.stem.w").unwrap().clone();
    let b = store.get("backbone.stem.b").unwrap().clone();
    // Parameter leaves are cached per graph, so the new bias needs a new tape.
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let f0 = fe_mamba::stem_embed(&mut g, &store, x).unwrap();
    for o in 0..cfg.c0 {
        for py in 0..4 {
            for px in 0..4 {
                let mut acc = b.data()[o];
                for c in 0..3 {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            acc += w.at(&[o, c, ky, kx]) * img.at(&[c, 4 * py + ky, 4 * px + kx]);
                        }
                    }
                }
                assert!((g.value(f0).at(&[o, py, px]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ss2d_branches_are_plain_scans_of_the_flattened_map() {
    let (c, n, h, w) = (3, 4, 3, 5);
    let mut store = ParamStore::new(2);
    fe_mamba::init_ss2d(&mut store, "s", c, n);
    let chw = randn(&[c, h, w], 14);
    let mut g = Graph::new();
    let x = g.input(chw.clone());
    let tokens = layers::chw_to_tokens(&mut g, x).unwrap();
    let orders = layers::scan_orders(h, w);
    for (dir, order) in orders.iter().enumerate() {
        let br = fe_mamba::ss2d_branch(&mut g, &store, "s", tokens, h, w, dir).unwrap();
        let seq = g.value(br.sequence);
        // Flattened by hand: token `order[i]` at position i.
        for (i, &tok) in order.iter().enumerate() {
            let (y, xx) = (tok / w, tok % w);
            for ch in 0..c {
                assert_eq!(seq.at(&[i, ch]), chw.at(&[ch, y, xx]));
            }
        }
        let a = g.value(br.decay).data().to_vec();
        assert!(a.iter().all(|&v| v > 0.0 && v <= 1.0));
        let scanned = g.value(br.scanned);
        let out = g.value(br.output);
        for ch in 0..c {
            let xs: Vec<f64> = (0..h * w).map(|i| seq.at(&[i, ch])).collect();
            let s = SsmSequence::new(a.clone(), g.value(br.b).clone(), g.value(br.c).clone(), xs).unwrap();
            let y = ssm_scan(&s).unwrap();
            for (i, &tok) in order.iter().enumerate() {
                assert!((scanned.at(&[i, ch]) - y[i]).abs() < 1e-12);
                assert_eq!(out.at(&[tok, ch]), scanned.at(&[i, ch]));
            }
        }
    }
}

#[test]
fn single_pixel_directions_coincide() {
    let (c, n) = (3, 2);
    let mut store = ParamStore::new(3);
    fe_mamba::init_ss2d(&mut store, "s", c, n);
    let mut g = Graph::new();
    let tokens = g.input(randn(&[1, c], 15));
    let outs: Vec<Tensor> = (0..4)
        .map(|dir| {
            let br = fe_mamba::ss2d_branch(&mut g, &store, "s", tokens, 1, 1, dir).unwrap();
            g.value(br.sequence).clone()
        })
        .collect();
    assert!(outs.iter().all(|o| o == &outs[0]));
}

#[test]
fn vss_block_preserves_shape_and_reaches_every_parameter() {
    for (c, h, w) in [(4, 3, 5), (6, 4, 4)] {
        let mut store = ParamStore::new(4);
        fe_mamba::init_vss_block(&mut store, "v", c, 3, 2);
        let mut g = Graph::new();
        let x = g.input(randn(&[c, h, w], 16));
        let y = fe_mamba::vss_block(&mut g, &store, "v", x).unwrap();
        assert_eq!(g.shape(y), &[c, h, w]);
        let r = g.constant(randn(&[c, h, w], 17));
        let p = g.mul(y, r).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), store.len());
        for (name, grad) in &pg {
            assert!(grad.max_abs() > 0.0, "{name}");
        }
    }
}

#[test]
fn cross_attention_zero_inputs_give_the_output_bias() {
    let cfg = small_backbone();
    let mut store = ParamStore::new(5);
    fe_mamba::init_cross_attention(&mut store, &cfg);
    let xw = store.get("backbone.cross.x_proj.w").unwrap().shape().to_vec();
    store.set("backbone.cross.x_proj.w", Tensor::zeros(&xw)).unwrap();
    store.set("backbone.cross.x_proj.b", Tensor::zeros(&[xw[0]])).unwrap();
    let bias = randn(&[cfg.c4], 18);
    store.set("backbone.cross.out_proj.b", bias.clone()).unwrap();
    let mut g = Graph::new();
    let l = g.input(randn(&[cfg.c0, 4, 6], 19));
    let r = g.input(randn(&[cfg.c0, 4, 6], 20));
    let (f4l, _) = fe_mamba::cross_attention_block(&mut g, &store, l, r).unwrap();
    let f = g.value(f4l);
    assert_eq!(f.shape(), &[cfg.c4, 4, 6]);
    for ch in 0..cfg.c4 {
        for i in 0..24 {
            assert_eq!(f.data()[ch * 24 + i], bias.data()[ch]);
        }
    }
}

#[test]
fn cross_attention_matches_finite_differences_on_8x8() {
    let cfg = small_backbone();
    let mut store = ParamStore::new(6);
    fe_mamba::init_cross_attention(&mut store, &cfg);
    let worst = common::check_op("cross_attention", &[randn(&[cfg.c0, 8, 8], 21), randn(&[cfg.c0, 8, 8], 22)], 48, |g, v| {
        let (a, b) = fe_mamba::cross_attention_block(g, &store, v[0], v[1])?;
        g.concat(&[a, b])
    });
    assert!(worst <= common::FD_REL_TOL);
}

#[test]
fn fusion_output_and_reachability() {
    let cfg = BackboneConfig::default();
    assert_eq!(fusion::FusionPlan::new(&cfg, 48).output_channels(), 64);
    let mut store = ParamStore::new(7);
    fusion::init(&mut store, &cfg, 48);
    let mut g = Graph::new();
    let f = |g: &mut Graph, c: usize, h: usize, w: usize, seed: u64| g.input(randn(&[c, h, w], seed));
    let pyr = fe_mamba::FeaturePyramid {
        f0: f(&mut g, cfg.c0, 8, 16, 23),
        f1: f(&mut g, cfg.c1, 8, 16, 24),
        f2: f(&mut g, cfg.c2, 4, 8, 25),
        f3: f(&mut g, cfg.c3, 2, 4, 26),
        f4: f(&mut g, cfg.c4, 8, 16, 27),
        side: fe_mamba::Side::Left,
    };
    let fg = fusion::mff_fuse(&mut g, &store, &pyr).unwrap().fg;
    assert_eq!(g.shape(fg), &[64, 8, 16]);
    let loss = g.sum(fg);
    let grads = g.backward(loss).unwrap();
    for v in [pyr.f1, pyr.f2, pyr.f3, pyr.f4] {
        assert!(grads.get(v).is_some_and(|t| t.max_abs() > 0.0));
    }

    // All-zero pyramid and zero biases give zero features.
    for name in store.names() {
        if name.ends_with(".b") {
            let s = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::zeros(&s)).unwrap();
        }
    }
    let mut g = Graph::new();
    let z = |g: &mut Graph, c: usize, h: usize, w: usize| g.input(Tensor::zeros(&[c, h, w]));
    let pyr = fe_mamba::FeaturePyramid {
        f0: z(&mut g, cfg.c0, 8, 16),
        f1: z(&mut g, cfg.c1, 8, 16),
        f2: z(&mut g, cfg.c2, 4, 8),
        f3: z(&mut g, cfg.c3, 2, 4),
        f4: z(&mut g, cfg.c4, 8, 16),
        side: fe_mamba::Side::Left,
    };
    let fg = fusion::mff_fuse(&mut g, &store, &pyr).unwrap().fg;
    assert_eq!(g.value(fg).max_abs(), 0.0);
}

#[test]
fn every_model_parameter_gets_a_gradient() {
    for (kind, mff) in [(BackboneKind::FeMamba, true), (BackboneKind::FeMamba, false), (BackboneKind::PlainCnn, true)] {
        let model = small_model(kind, mff);
        let mut g = Graph::new();
        let l = g.constant(randn(&[3, 32, 64], 28));
        let r = g.constant(randn(&[3, 32, 64], 29));
        let out = model.forward(&mut g, l, r, true).unwrap();
        let gt = uniform(&[32, 64], 0.5, 15.0, 30);
        let mask = vec![true; 32 * 64];
        let loss = stereomamba::regress::multi_output_loss(&mut g, &out.disparities, &gt, &mask, [0.5, 0.5, 0.7, 1.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads);
        // Without fusion only f1 feeds the volume.
        let unused = |n: &str| !mff && (n.starts_with("backbone.cross") || n.starts_with("backbone.stage2") || n.starts_with("backbone.stage3") || n.starts_with("backbone.stage4") || n.starts_with("backbone.down"));
        for name in model.params.names() {
            if unused(&name) {
                continue;
            }
            let grad = pg.get(&name).unwrap_or_else(|| panic!("{kind:?} mff={mff}: {name} unreached"));
            assert!(grad.max_abs() > 0.0, "{kind:?} mff={mff}: {name} has a zero gradient");
        }
    }
}

#[test]
fn plain_cnn_swaps_only_the_backbone() {
    let mamba = small_model(BackboneKind::FeMamba, true);
    let cnn = small_model(BackboneKind::PlainCnn, true);
    let rest = |m: &StereoModel| -> Vec<(String, Vec<usize>)> {
        m.params
            .iter()
            .filter(|(n, _)| !n.starts_with("backbone."))
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    };
    assert_eq!(rest(&mamba), rest(&cnn));
    assert!(cnn.params.names().iter().filter(|n| n.starts_with("backbone.")).all(|n| n.starts_with("backbone.cnn") || n.starts_with("backbone.stem")));
}
