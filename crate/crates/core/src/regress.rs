//! Probability volumes, soft-argmin disparity regression and the weighted
//! smooth-L1 training loss.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default weights of the four supervised outputs.
pub const DEFAULT_LOSS_WEIGHTS: [f64; 4] = [0.5, 0.5, 0.7, 1.0];

pub fn smooth_l1(diff: f64) -> f64 {
    let a = diff.abs();
    if a < 1.0 {
        0.5 * diff * diff
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(diff: f64) -> f64 {
    diff.clamp(-1.0, 1.0)
}

/// Per-axis linear interpolation taps, half-pixel aligned: destination `o`
/// samples source coordinate `max(0, (o + 0.5) · in / out − 0.5)`.
fn taps(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(from - 1);
            let i1 = (i0 + 1).min(from - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resamples one axis of a row-major block `[outer, from, inner]`.
fn resample_axis(x: &[f64], outer: usize, from: usize, to: usize, inner: usize) -> Vec<f64> {
    let t = taps(from, to);
    let mut out = vec![0.0; outer * to * inner];
    for o in 0..outer {
        for (k, &(i0, i1, w1)) in t.iter().enumerate() {
            let dst = &mut out[(o * to + k) * inner..(o * to + k + 1) * inner];
            let a = &x[(o * from + i0) * inner..(o * from + i0 + 1) * inner];
            let b = &x[(o * from + i1) * inner..(o * from + i1 + 1) * inner];
            for j in 0..inner {
                dst[j] = (1.0 - w1) * a[j] + w1 * b[j];
            }
        }
    }
    out
}

fn resample_axis_adjoint(g: &[f64], outer: usize, from: usize, to: usize, inner: usize) -> Vec<f64> {
    let t = taps(from, to);
    let mut out = vec![0.0; outer * from * inner];
    for o in 0..outer {
        for (k, &(i0, i1, w1)) in t.iter().enumerate() {
            let src = &g[(o * to + k) * inner..(o * to + k + 1) * inner];
            for j in 0..inner {
                out[(o * from + i0) * inner + j] += (1.0 - w1) * src[j];
                out[(o * from + i1) * inner + j] += w1 * src[j];
            }
        }
    }
    out
}

/// Trilinear resampling of `[D, H, W]` to `to`, applied separably (W, H, D).
pub fn trilinear_forward(x: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let [d0, h0, w0] = from;
    let [d1, h1, w1] = to;
    let a = resample_axis(x, d0 * h0, w0, w1, 1);
    let b = resample_axis(&a, d0, h0, h1, w1);
    resample_axis(&b, 1, d0, d1, h1 * w1)
}

pub fn trilinear_backward(g: &[f64], from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let [d0, h0, w0] = from;
    let [d1, h1, w1] = to;
    let b = resample_axis_adjoint(g, 1, d0, d1, h1 * w1);
    let a = resample_axis_adjoint(&b, d0, h0, h1, w1);
    resample_axis_adjoint(&a, d0 * h0, w0, w1, 1)
}

/// Per-pixel distribution over `D_max` candidate disparities, `[D_max, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    pub p: Tensor,
}

impl ProbabilityVolume {
    /// Checks non-negativity and unit per-pixel mass (within `1e-9`).
    pub fn new(p: Tensor) -> Result<Self> {
        if p.ndim() != 3 {
            return Err(Error::invalid(format!("probability volume must be [D, H, W], got {:?}", p.shape())));
        }
        let (dmax, plane) = (p.shape()[0], p.shape()[1] * p.shape()[2]);
        if p.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("probability volume has negative or NaN entries"));
        }
        for j in 0..plane {
            let s: f64 = (0..dmax).map(|k| p.data()[k * plane + j]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("pixel {j} has probability mass {s}")));
            }
        }
        Ok(Self { p })
    }

    pub fn levels(&self) -> usize {
        self.p.shape()[0]
    }
}

/// Soft-argmin `Σ_k k · p_k` per pixel.
pub fn soft_argmin(p: &ProbabilityVolume) -> Tensor {
    let s = p.p.shape();
    let plane = s[1] * s[2];
    let mut out = vec![0.0; plane];
    for k in 0..s[0] {
        let row = &p.p.data()[k * plane..(k + 1) * plane];
        out.iter_mut().zip(row).for_each(|(o, v)| *o += k as f64 * v);
    }
    Tensor::from_parts(vec![s[1], s[2]], out)
}

/// Taped: trilinear upsampling of a `[1, D_q, h, w]` raw volume to
/// `[D_max, H, W]` followed by a softmax over the disparity axis.
pub fn upsample_to_probability(g: &mut Graph, raw: Var, d_max: usize, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(raw).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::invalid(format!("raw volume must be [1, D, H, W], got {s:?}")));
    }
    if d_max != 4 * s[1] {
        return Err(Error::invalid(format!("D_max {d_max} must be 4 x {} quarter levels", s[1])));
    }
    let squeezed = g.reshape(raw, &s[1..])?;
    let up = g.upsample_trilinear(squeezed, [d_max, h, w])?;
    g.softmax(up, 0)
}

/// Taped soft-argmin over axis 0 of a `[D, H, W]` probability volume.
pub fn disparity_regression(g: &mut Graph, prob: Var) -> Result<Var> {
    let levels = g.shape(prob)[0];
    let weights: Rc<[f64]> = (0..levels).map(|k| k as f64).collect();
    g.weighted_sum_axis0(prob, weights)
}

/// Pixels that carry supervision: marked valid, finite, and `0 < gt < D_max`.
pub fn supervision_mask(gt: &Tensor, valid: &[bool], d_max: usize) -> Vec<bool> {
    gt.data()
        .iter()
        .zip(valid)
        .map(|(&d, &v)| v && d.is_finite() && d > 0.0 && d < d_max as f64)
        .collect()
}

/// `Σ_i w_i · mean_valid smoothL1(d̂_i, d)` over the four outputs.
pub fn multi_output_loss(g: &mut Graph, outputs: &[Var; 4], gt: &Tensor, mask: &[bool], weights: [f64; 4]) -> Result<Var> {
    if mask.len() != gt.numel() {
        return Err(Error::invalid("mask and ground truth differ in size"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("empty valid mask: the loss mean is undefined"));
    }
    // Masked-out ground truth is replaced so NaN never reaches the tape.
    let target: Rc<[f64]> = gt
        .data()
        .iter()
        .zip(mask)
        .map(|(&d, &m)| if m { d } else { 0.0 })
        .collect();
    let mask: Rc<[bool]> = mask.into();
    let mut total: Option<Var> = None;
    for (out, w) in outputs.iter().zip(weights) {
        if g.shape(*out) != gt.shape() {
            return Err(Error::shape("multi_output_loss", g.shape(*out), gt.shape()));
        }
        let term = g.smooth_l1_masked(*out, target.clone(), mask.clone())?;
        let term = g.scale(term, w);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("four outputs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1_grad(-3.0), -1.0);
    }

    #[test]
    fn identity_resample_is_exact() {
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        assert_eq!(trilinear_forward(&x, [2, 3, 4], [2, 3, 4]), x);
    }

    #[test]
    fn one_hot_and_uniform() {
        let mut p = Tensor::zeros(&[8, 1, 2]);
        p.set(&[5, 0, 0], 1.0);
        p.set(&[5, 0, 1], 1.0);
        let d = soft_argmin(&ProbabilityVolume::new(p).unwrap());
        assert_eq!(d.data(), &[5.0, 5.0]);
        let u = Tensor::full(&[192, 1, 1], 1.0 / 192.0);
        assert!((soft_argmin(&ProbabilityVolume::new(u).unwrap()).item() - 95.5).abs() < 1e-12);
    }

    #[test]
    fn probability_volume_rejects_bad_mass() {
        assert!(ProbabilityVolume::new(Tensor::full(&[4, 1, 1], 0.3)).is_err());
        assert!(ProbabilityVolume::new(Tensor::full(&[2, 1, 1], 0.5)).is_ok());
    }
}
