//! Property-based invariants.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereomamba::cost_volume::build_gwc_volume;
use stereomamba::data::formats::{decode_mask, decode_pfm, decode_ppm, encode_mask, encode_pfm, encode_ppm};
use stereomamba::data::{augment, synth_stereogram, Calib, ChannelStats, SynthParams};
use stereomamba::metrics::{disparity_metrics, psnr, ssim};
use stereomamba::train::optim::{one_cycle_lr, START_DIV};
use stereomamba::{Graph, Tensor};

fn tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bad_thresholds_are_ordered(h in 1usize..10, w in 1usize..10, seed: u64, spread in 0.1f64..12.0) {
        let gt = tensor(&[h, w], 0.0, 40.0, seed);
        let pred = gt.zip_map(&tensor(&[h, w], -spread, spread, seed ^ 1), |a, b| a + b).unwrap();
        let r = disparity_metrics(&pred, &gt, &vec![true; h * w], &Calib::default()).unwrap();
        prop_assert!(r.bad5_pct <= r.bad3_pct && r.bad3_pct <= r.bad2_pct);
        prop_assert!(r.bad2_pct <= 100.0 && r.bad5_pct >= 0.0);
    }

    #[test]
    fn more_error_never_improves_metrics(h in 1usize..8, w in 1usize..8, seed: u64, extra in 0.0f64..4.0) {
        let gt = tensor(&[h, w], 0.0, 20.0, seed);
        let pred = gt.zip_map(&tensor(&[h, w], -6.0, 6.0, seed ^ 2), |a, b| a + b).unwrap();
        let bump = tensor(&[h, w], 0.0, extra, seed ^ 3);
        // Push every prediction further from the ground truth.
        let worse = Tensor::from_fn(&[h, w], |i| {
            let (p, g) = (pred.data()[i], gt.data()[i]);
            if p >= g { p + bump.data()[i] } else { p - bump.data()[i] }
        });
        let valid = vec![true; h * w];
        let a = disparity_metrics(&pred, &gt, &valid, &Calib::default()).unwrap();
        let b = disparity_metrics(&worse, &gt, &valid, &Calib::default()).unwrap();
        prop_assert!(b.epe_px >= a.epe_px);
        prop_assert!(b.bad2_pct >= a.bad2_pct && b.bad3_pct >= a.bad3_pct && b.bad5_pct >= a.bad5_pct);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(h in 11usize..20, w in 11usize..20, seed: u64, noise in 0.0f64..0.5) {
        let a = tensor(&[3, h, w], 0.0, 1.0, seed);
        let b = a.zip_map(&tensor(&[3, h, w], -noise, noise, seed ^ 4), |x, y| (x + y).clamp(0.0, 1.0)).unwrap();
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0);
    }

    #[test]
    fn psnr_falls_as_mse_grows(seed: u64, k1 in 0.01f64..0.5, dk in 0.01f64..0.5) {
        let a = tensor(&[3, 6, 7], 0.0, 1.0, seed);
        let dir = tensor(&[3, 6, 7], -1.0, 1.0, seed ^ 5);
        let near = a.zip_map(&dir, |x, d| x + k1 * d).unwrap();
        let far = a.zip_map(&dir, |x, d| x + (k1 + dk) * d).unwrap();
        prop_assert!(psnr(&a, &far).unwrap() < psnr(&a, &near).unwrap());
    }

    #[test]
    fn pfm_roundtrip_is_bit_exact(h in 1usize..12, w in 1usize..12, seed: u64) {
        let f32s: Vec<f32> = tensor(&[h, w], -1e3, 1e3, seed).data().iter().map(|&v| v as f32).collect();
        let map = Tensor::from_f32(&[h, w], &f32s).unwrap();
        let back = decode_pfm(&encode_pfm(&map).unwrap()).unwrap();
        prop_assert_eq!(back.to_f32(), f32s);
    }

    #[test]
    fn ppm_roundtrip_is_quantization_bounded(h in 1usize..10, w in 1usize..10, seed: u64) {
        let img = tensor(&[3, h, w], 0.0, 1.0, seed);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-12);
    }

    #[test]
    fn mask_roundtrip(h in 1usize..10, w in 1usize..10, bits in proptest::collection::vec(any::<bool>(), 100)) {
        let mask: Vec<bool> = bits[..h * w].to_vec();
        let (rh, rw, back) = decode_mask(&encode_mask(&mask, h, w).unwrap()).unwrap();
        prop_assert_eq!((rh, rw), (h, w));
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn one_cycle_has_no_jumps(total in 1000usize..20000, lr in 1e-5f64..1e-1) {
        let mut prev = one_cycle_lr(0, total, lr);
        prop_assert!((prev - lr / START_DIV).abs() < 1e-15 * lr);
        let mut peak: f64 = 0.0;
        for step in 1..total {
            let cur = one_cycle_lr(step, total, lr);
            prop_assert!((cur - prev).abs() < lr / 100.0);
            prop_assert!(cur > 0.0 && cur <= lr);
            peak = peak.max(cur);
            prev = cur;
        }
        prop_assert!(peak > lr * 0.999);
    }

    #[test]
    fn gwc_scales_quadratically(seed: u64, s in -3.0f64..3.0) {
        let l = tensor(&[4, 3, 6], -1.0, 1.0, seed);
        let r = tensor(&[4, 3, 6], -1.0, 1.0, seed ^ 6);
        let base = build_gwc_volume(&l, &r, 3, 2).unwrap().values;
        let scaled = build_gwc_volume(&l.scale(s), &r.scale(s), 3, 2).unwrap().values;
        prop_assert!(scaled.max_abs_diff(&base.scale(s * s)) < 1e-12);
        let same = build_gwc_volume(&l, &l, 3, 2).unwrap().values;
        prop_assert!(same.data().iter().step_by(18).all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed: u64, shift in -500.0f64..500.0) {
        let x = tensor(&[5, 9], -10.0, 10.0, seed);
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|v| v + shift));
        let sa = g.softmax_lastdim(a).unwrap();
        let sb = g.softmax_lastdim(b).unwrap();
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
        for row in g.value(sa).data().chunks(9) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crops_keep_disparity_values(seed: u64) {
        let s = synth_stereogram(&SynthParams::default(), seed % 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = augment(&s, (32, 64), &ChannelStats::identity(), &mut rng).unwrap();
        prop_assert_eq!(c.left.shape(), &[3, 32, 64]);
        // Locate the window through the left image, then compare ground truth.
        let found = (0..=32).flat_map(|y| (0..=64).map(move |x| (y, x))).find(|&(y0, x0)| {
            (0..3).all(|ch| (0..32).all(|y| (0..64).all(|x| c.left.at(&[ch, y, x]) == s.left.at(&[ch, y0 + y, x0 + x]))))
        });
        let (y0, x0) = found.expect("crop window");
        for y in 0..32 {
            for x in 0..64 {
                prop_assert_eq!(c.gt_disparity.at(&[y, x]), s.gt_disparity.at(&[y0 + y, x0 + x]));
                prop_assert_eq!(c.valid_mask[y * 64 + x], s.valid_mask[(y0 + y) * 128 + x0 + x]);
            }
        }
    }
}

#[test]
fn synthetic_pairs_are_photometrically_consistent() {
    let p = SynthParams::default();
    for seed in 0..100 {
        let s = synth_stereogram(&p, seed).unwrap();
        assert_eq!(s, synth_stereogram(&p, seed).unwrap(), "seed {seed} not deterministic");
        let (h, w) = (s.height(), s.width());
        let mut checked = 0;
        for y in 0..h {
            for x in 0..w {
                if !s.valid_mask[y * w + x] {
                    continue;
                }
                let d = s.gt_disparity.at(&[y, x]);
                assert_eq!(d.fract(), 0.0);
                let xr = x - d as usize;
                for c in 0..3 {
                    assert_eq!(s.left.at(&[c, y, x]), s.right.at(&[c, y, xr]), "seed {seed} ({x}, {y})");
                }
                checked += 1;
            }
        }
        assert!(checked > h * w / 2, "seed {seed}: only {checked} valid pixels");
    }
}

#[test]
fn normalized_training_set_is_standardized() {
    let p = SynthParams::default();
    let samples: Vec<_> = (0..40).map(|i| synth_stereogram(&p, 1000 + i).unwrap()).collect();
    let stats = ChannelStats::measure(&samples).unwrap();
    let normalized: Vec<_> = samples
        .iter()
        .map(|s| {
            let mut n = s.clone();
            n.left = stats.normalize(&s.left);
            n.right = stats.normalize(&s.right);
            n
        })
        .collect();
    let after = ChannelStats::measure(&normalized).unwrap();
    for c in 0..3 {
        assert!(after.mean[c].abs() <= 0.02, "channel {c} mean {}", after.mean[c]);
        assert!((after.std[c] - 1.0).abs() <= 0.05, "channel {c} std {}", after.std[c]);
    }
}
