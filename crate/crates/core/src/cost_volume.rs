//! Group-wise correlation cost volumes.
//!
//! Left pixel `(x, y)` is matched against right pixel `(x - d, y)`; candidates
//! that fall outside the right image contribute exactly zero.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Extents of one correlation: features `[C, H, W]` split into `groups`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GwcDims {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
    pub disparities: usize,
}

impl GwcDims {
    pub fn new(feature_shape: &[usize], groups: usize, disparities: usize) -> Result<Self> {
        let [channels, h, w] = match feature_shape {
            &[c, h, w] => [c, h, w],
            other => return Err(Error::invalid(format!("features must be [C, H, W], got {other:?}"))),
        };
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(format!(
                "{channels} feature channels cannot be split into {groups} equal groups"
            )));
        }
        if disparities == 0 {
            return Err(Error::invalid("cost volume needs at least one disparity level"));
        }
        Ok(Self {
            channels,
            h,
            w,
            groups,
            disparities,
        })
    }

    pub fn per_group(&self) -> usize {
        self.channels / self.groups
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.groups, self.disparities, self.h, self.w]
    }
}

/// A `[N_g, D_q, H, W]` correlation volume.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub values: Tensor,
}

impl CostVolume {
    pub fn groups(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn disparities(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn gwc_forward(left: &[f64], right: &[f64], d: &GwcDims) -> Vec<f64> {
    let (h, w, cpg) = (d.h, d.w, d.per_group());
    let plane = h * w;
    let mut out = vec![0.0; d.groups * d.disparities * plane];
    let inv = 1.0 / cpg as f64;
    for g in 0..d.groups {
        for disp in 0..d.disparities.min(w) {
            let o = &mut out[(g * d.disparities + disp) * plane..(g * d.disparities + disp + 1) * plane];
            for ch in g * cpg..(g + 1) * cpg {
                let l = &left[ch * plane..(ch + 1) * plane];
                let r = &right[ch * plane..(ch + 1) * plane];
                for y in 0..h {
                    let (lrow, rrow) = (&l[y * w..(y + 1) * w], &r[y * w..(y + 1) * w]);
                    let orow = &mut o[y * w..(y + 1) * w];
                    for x in disp..w {
                        orow[x] += lrow[x] * rrow[x - disp];
                    }
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

pub fn gwc_backward(left: &[f64], right: &[f64], dy: &[f64], d: &GwcDims) -> (Vec<f64>, Vec<f64>) {
    let (h, w, cpg) = (d.h, d.w, d.per_group());
    let plane = h * w;
    let inv = 1.0 / cpg as f64;
    let mut gl = vec![0.0; left.len()];
    let mut gr = vec![0.0; right.len()];
    for g in 0..d.groups {
        for disp in 0..d.disparities.min(w) {
            let go = &dy[(g * d.disparities + disp) * plane..(g * d.disparities + disp + 1) * plane];
            for ch in g * cpg..(g + 1) * cpg {
                let range = ch * plane..(ch + 1) * plane;
                let (l, r) = (&left[range.clone()], &right[range.clone()]);
                for y in 0..h {
                    let row = y * w..(y + 1) * w;
                    for x in disp..w {
                        let gv = go[y * w + x] * inv;
                        gl[range.start + row.start + x] += gv * r[y * w + x - disp];
                        gr[range.start + row.start + x - disp] += gv * l[y * w + x];
                    }
                }
            }
        }
    }
    (gl, gr)
}

fn check_pair(left: &Tensor, right: &Tensor) -> Result<()> {
    if left.shape() != right.shape() {
        return Err(Error::shape("gwc volume", left.shape(), right.shape()));
    }
    Ok(())
}

/// Group-wise correlation of two `[C_g, H, W]` feature maps over `disparities`
/// candidate shifts, averaged within each of `groups` channel groups.
pub fn build_gwc_volume(left: &Tensor, right: &Tensor, disparities: usize, groups: usize) -> Result<CostVolume> {
    check_pair(left, right)?;
    let d = GwcDims::new(left.shape(), groups, disparities)?;
    let values = gwc_forward(left.data(), right.data(), &d);
    Ok(CostVolume {
        values: Tensor::from_parts(d.output_shape().to_vec(), values),
    })
}

/// Straight nested-loop evaluation of the same volume, kept free of any
/// slicing tricks so it can serve as an independent reference.
pub fn gwc_volume_oracle(left: &Tensor, right: &Tensor, disparities: usize, groups: usize) -> Result<CostVolume> {
    check_pair(left, right)?;
    let d = GwcDims::new(left.shape(), groups, disparities)?;
    let cpg = d.per_group();
    let mut out = Tensor::zeros(&d.output_shape());
    for g in 0..groups {
        for disp in 0..disparities {
            for y in 0..d.h {
                for x in 0..d.w {
                    if x < disp {
                        continue;
                    }
                    let mut acc = 0.0;
                    for k in 0..cpg {
                        let ch = g * cpg + k;
                        acc += left.at(&[ch, y, x]) * right.at(&[ch, y, x - disp]);
                    }
                    out.set(&[g, disp, y, x], acc / cpg as f64);
                }
            }
        }
    }
    Ok(CostVolume { values: out })
}
