//! Convolutional stand-in for the state-space extractor, used in ablations.
//! It follows the same 1/4, 1/8, 1/16 schedule and fills the same pyramid
//! slots, so everything downstream is unchanged.

use super::fe_mamba::{stem_embed, BackboneConfig, FeaturePyramid, Side};
use super::layers;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

pub fn init(store: &mut ParamStore, cfg: &BackboneConfig) {
    super::fe_mamba::init_stem(store, cfg);
    layers::init_conv2d(store, "backbone.cnn1", cfg.c0, cfg.c1, 3);
    layers::init_conv2d(store, "backbone.cnn2", cfg.c1, cfg.c2, 3);
    layers::init_conv2d(store, "backbone.cnn3", cfg.c2, cfg.c3, 3);
    layers::init_conv2d(store, "backbone.cnn4", cfg.c3, cfg.c3, 3);
    layers::init_conv2d(store, "backbone.cnn_cross", cfg.c0, cfg.c4, 3);
}

fn conv_relu(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = layers::conv2d(g, store, name, x, stride, 1)?;
    Ok(g.relu(y))
}

fn pyramid(g: &mut Graph, store: &ParamStore, image: Var, side: Side) -> Result<FeaturePyramid> {
    let f0 = stem_embed(g, store, image)?;
    let f1 = conv_relu(g, store, "backbone.cnn1", f0, 1)?;
    let f2 = conv_relu(g, store, "backbone.cnn2", f1, 2)?;
    let x = conv_relu(g, store, "backbone.cnn3", f2, 2)?;
    let f3 = conv_relu(g, store, "backbone.cnn4", x, 1)?;
    let f4 = conv_relu(g, store, "backbone.cnn_cross", f0, 1)?;
    Ok(FeaturePyramid {
        f0,
        f1,
        f2,
        f3,
        f4,
        side,
    })
}

pub fn extract(g: &mut Graph, store: &ParamStore, left: Var, right: Var) -> Result<(FeaturePyramid, FeaturePyramid)> {
    Ok((pyramid(g, store, left, Side::Left)?, pyramid(g, store, right, Side::Right)?))
}
