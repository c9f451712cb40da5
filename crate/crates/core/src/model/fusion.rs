//! Multidimensional feature fusion: merges the self-attention pyramid
//! coarse-to-fine (f3 → f2 → f1) and appends the cross-attention map f4.

use super::fe_mamba::{BackboneConfig, FeaturePyramid, Side};
use super::layers;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Fused feature map `[C_g, H/4, W/4]` of one image.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeature {
    pub fg: Var,
    pub side: Side,
}

/// Channel plan of the fusion path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionPlan {
    pub up3_out: usize,
    pub up2_out: usize,
    pub fused: usize,
    pub c4: usize,
}

impl FusionPlan {
    pub fn new(cfg: &BackboneConfig, fused: usize) -> Self {
        let up3_out = (cfg.c3 / 2).max(1);
        let up2_out = ((up3_out + cfg.c2) / 2).max(1);
        Self {
            up3_out,
            up2_out,
            fused,
            c4: cfg.c4,
        }
    }

    /// `C_g`: fused self-attention channels plus the cross-attention channels.
    pub fn output_channels(&self) -> usize {
        self.fused + self.c4
    }
}

pub fn init(store: &mut ParamStore, cfg: &BackboneConfig, fused: usize) {
    let plan = FusionPlan::new(cfg, fused);
    layers::init_transpose2d(store, "mff.up3", cfg.c3, plan.up3_out, 2);
    layers::init_transpose2d(store, "mff.up2", plan.up3_out + cfg.c2, plan.up2_out, 2);
    layers::init_conv2d(store, "mff.fuse", plan.up2_out + cfg.c1, fused, 3);
}

/// `(f1, f2, f3, f4)` → `f_g`.
pub fn mff_fuse(g: &mut Graph, store: &ParamStore, p: &FeaturePyramid) -> Result<FusedFeature> {
    let (s1, s2, s3, s4) = (g.shape(p.f1).to_vec(), g.shape(p.f2).to_vec(), g.shape(p.f3).to_vec(), g.shape(p.f4).to_vec());
    let halves = |a: &[usize], b: &[usize]| a[1] == 2 * b[1] && a[2] == 2 * b[2];
    if !halves(&s1, &s2) || !halves(&s2, &s3) || s1[1..] != s4[1..] {
        return Err(Error::invalid(format!(
            "inconsistent pyramid f1{s1:?} f2{s2:?} f3{s3:?} f4{s4:?}"
        )));
    }
    let up = layers::transpose2d(g, store, "mff.up3", p.f3, 2, 0)?;
    let up = g.relu(up);
    let x = g.concat(&[up, p.f2])?;
    let up = layers::transpose2d(g, store, "mff.up2", x, 2, 0)?;
    let up = g.relu(up);
    let x = g.concat(&[up, p.f1])?;
    let x = layers::conv2d(g, store, "mff.fuse", x, 1, 1)?;
    let x = g.relu(x);
    let fg = g.concat(&[x, p.f4])?;
    Ok(FusedFeature { fg, side: p.side })
}
