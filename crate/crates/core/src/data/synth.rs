//! Random-dot style stereograms with exact ground truth.
//!
//! A piecewise-constant integer disparity map is built from fronto-parallel
//! rectangles over a background. The right view is produced by forward
//! mapping each left pixel to `x - d`, nearest surface winning, so every
//! valid left pixel has an exact copy in the right image.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Calib, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub d_max_gt: usize,
    pub n_layers: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            d_max_gt: 16,
            n_layers: 4,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(format!("image {h}x{w} must be positive multiples of 16")));
        }
        if self.d_max_gt >= w / 4 {
            return Err(Error::invalid(format!(
                "d_max_gt {} must be below a quarter of the width ({})",
                self.d_max_gt,
                w / 4
            )));
        }
        Ok(())
    }
}

/// Separable binomial blur `[1, 4, 6, 4, 1] / 16` with clamped borders.
fn blur(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5).map(|k| K[k] * plane[y * w + clamp(x as isize + k as isize - 2, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5).map(|k| K[k] * tmp[clamp(y as isize + k as isize - 2, h) * w + x]).sum();
        }
    }
    out
}

/// Low-pass RGB noise: fine blurred noise plus a coarser octave, stretched
/// to mean 0.5 and clamped into `[0, 1]`.
fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let fine: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let fine = blur(&fine, h, w);
        let mut coarse: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        for _ in 0..4 {
            coarse = blur(&coarse, h, w);
        }
        let mix: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a + 0.5 * b).collect();
        let mean = mix.iter().sum::<f64>() / mix.len() as f64;
        let std = (mix.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mix.len() as f64).sqrt();
        data.extend(mix.iter().map(|v| (0.5 + 0.2 * (v - mean) / std.max(1e-12)).clamp(0.0, 1.0)));
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Result of forward-mapping a left image through a disparity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub right: Tensor,
    /// Right pixels that received a left sample.
    pub filled: Vec<bool>,
    /// Left pixels whose correspondence is in frame and unoccluded.
    pub valid: Vec<bool>,
}

/// Forward maps `left(x, y)` to `right(x - d, y)`; where several left pixels
/// land on one right pixel the larger disparity wins. Unfilled right pixels
/// take their value from `filler`. Disparities must be non-negative integers.
pub fn render_right(left: &Tensor, disparity: &Tensor, filler: &Tensor) -> Result<Rendered> {
    let [h, w] = match disparity.shape() {
        &[h, w] => [h, w],
        s => return Err(Error::invalid(format!("disparity must be [H, W], got {s:?}"))),
    };
    if left.shape() != [3, h, w] || filler.shape() != left.shape() {
        return Err(Error::shape("render_right", left.shape(), filler.shape()));
    }
    if disparity.data().iter().any(|&d| !(d >= 0.0) || d.fract() != 0.0) {
        return Err(Error::invalid("forward mapping needs non-negative integer disparities"));
    }
    let plane = h * w;
    let mut right = filler.clone();
    let mut owner: Vec<i64> = vec![-1; plane];
    for y in 0..h {
        for x in 0..w {
            let d = disparity.data()[y * w + x] as usize;
            if d > x {
                continue;
            }
            let dst = y * w + x - d;
            if owner[dst] < d as i64 {
                owner[dst] = d as i64;
                for c in 0..3 {
                    right.data_mut()[c * plane + dst] = left.data()[c * plane + y * w + x];
                }
            }
        }
    }
    let valid = (0..plane)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let d = disparity.data()[i] as usize;
            d <= x && owner[y * w + x - d] == d as i64
        })
        .collect();
    Ok(Rendered {
        right,
        filled: owner.iter().map(|&o| o >= 0).collect(),
        valid,
    })
}

/// Background in `[1, max(1, d_max/4)]` and `n_layers` rectangles with
/// disparities above it, drawn nearest-last.
fn disparity_map(p: &SynthParams, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (p.height, p.width);
    if p.d_max_gt == 0 {
        return Tensor::zeros(&[h, w]);
    }
    let bg = rng.gen_range(1..=(p.d_max_gt / 4).max(1));
    let mut map = vec![bg as f64; h * w];
    let mut layers: Vec<usize> = (0..p.n_layers)
        .map(|_| if bg < p.d_max_gt { rng.gen_range(bg + 1..=p.d_max_gt) } else { bg })
        .collect();
    layers.sort_unstable();
    for d in layers {
        let rh = rng.gen_range(h / 8..=h / 2).max(1);
        let rw = rng.gen_range(w / 8..=w / 2).max(1);
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        for y in y0..y0 + rh {
            map[y * w + x0..y * w + x0 + rw].fill(d as f64);
        }
    }
    Tensor::from_parts(vec![h, w], map)
}

/// Deterministic synthetic sample for `seed`.
pub fn synth_stereogram(p: &SynthParams, seed: u64) -> Result<StereoSample> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disparity = disparity_map(p, &mut rng);
    let left = texture(p.height, p.width, &mut rng);
    let filler = texture(p.height, p.width, &mut rng);
    let r = render_right(&left, &disparity, &filler)?;
    Ok(StereoSample {
        left,
        right: r.right,
        gt_disparity: disparity,
        valid_mask: r.valid,
        calib: Calib::default(),
    })
}
