//! 3D cost aggregation: a pre-aggregation block followed by encoder–decoder
//! hourglasses, with a two-convolution head per supervised output.

use serde::{Deserialize, Serialize};

use super::layers;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    /// Channels of the full-resolution aggregation volume.
    pub channels: usize,
    /// Number of hourglasses; outputs are the pre-block plus one per hourglass.
    pub hourglass_count: usize,
    /// Replace the encoder–decoder hourglasses by flat residual 3D-conv
    /// stacks, for volumes that cannot be halved twice.
    pub flat_hourglass: bool,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            hourglass_count: 3,
            flat_hourglass: false,
        }
    }
}

/// Hourglasses need two exact stride-2 halvings on every axis.
pub fn supports_hourglass(volume: [usize; 3]) -> bool {
    volume.iter().all(|&e| e % 4 == 0 && e >= 4)
}

pub fn init(store: &mut ParamStore, cfg: &AggregateConfig, groups: usize) {
    let c = cfg.channels;
    layers::init_conv3d(store, "agg.pre0", groups, c, 3);
    layers::init_conv3d(store, "agg.pre1", c, c, 3);
    for i in 0..cfg.hourglass_count.min(3) {
        let p = format!("agg.hg{i}");
        if cfg.flat_hourglass {
            layers::init_conv3d(store, &format!("{p}.flat0"), c, c, 3);
            layers::init_conv3d(store, &format!("{p}.flat1"), c, c, 3);
            continue;
        }
        layers::init_conv3d(store, &format!("{p}.down1"), c, 2 * c, 3);
        layers::init_conv3d(store, &format!("{p}.conv1"), 2 * c, 2 * c, 3);
        layers::init_conv3d(store, &format!("{p}.down2"), 2 * c, 4 * c, 3);
        layers::init_conv3d(store, &format!("{p}.conv2"), 4 * c, 4 * c, 3);
        layers::init_transpose3d(store, &format!("{p}.up2"), 4 * c, 2 * c, 2);
        layers::init_transpose3d(store, &format!("{p}.up1"), 2 * c, c, 2);
    }
    for i in 0..head_count(cfg) {
        layers::init_conv3d(store, &format!("agg.head{i}.c0"), c, c, 3);
        layers::init_conv3d(store, &format!("agg.head{i}.c1"), c, 1, 3);
    }
}

/// Distinct heads: one per computed output (at most four).
pub fn head_count(cfg: &AggregateConfig) -> usize {
    cfg.hourglass_count.min(3) + 1
}

fn conv_relu(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = layers::conv3d(g, store, name, x, stride, 1)?;
    Ok(g.relu(y))
}

fn hourglass(g: &mut Graph, store: &ParamStore, cfg: &AggregateConfig, p: &str, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if !cfg.flat_hourglass && !supports_hourglass([s[1], s[2], s[3]]) {
        return Err(Error::invalid(format!(
            "aggregation volume {:?} cannot be halved twice; build the model with flat_hourglass",
            &s[1..]
        )));
    }
    if cfg.flat_hourglass {
        let y = conv_relu(g, store, &format!("{p}.flat0"), x, 1)?;
        let y = layers::conv3d(g, store, &format!("{p}.flat1"), y, 1, 1)?;
        let y = g.add(y, x)?;
        return Ok(g.relu(y));
    }
    let d1 = conv_relu(g, store, &format!("{p}.down1"), x, 2)?;
    let d1 = conv_relu(g, store, &format!("{p}.conv1"), d1, 1)?;
    let d2 = conv_relu(g, store, &format!("{p}.down2"), d1, 2)?;
    let d2 = conv_relu(g, store, &format!("{p}.conv2"), d2, 1)?;
    let u1 = layers::transpose3d(g, store, &format!("{p}.up2"), d2, 2, 0)?;
    let u1 = g.add(u1, d1)?;
    let u1 = g.relu(u1);
    let u0 = layers::transpose3d(g, store, &format!("{p}.up1"), u1, 2, 0)?;
    let u0 = g.add(u0, x)?;
    Ok(g.relu(u0))
}

fn head(g: &mut Graph, store: &ParamStore, i: usize, x: Var) -> Result<Var> {
    let y = conv_relu(g, store, &format!("agg.head{i}.c0"), x, 1)?;
    layers::conv3d(g, store, &format!("agg.head{i}.c1"), y, 1, 1)
}

/// Cost volume `[N_g, D_q, h, w]` → four raw volumes `[1, D_q, h, w]`.
///
/// With `last_only`, only the final head is evaluated and returned in every
/// slot (inference path).
pub fn aggregate(g: &mut Graph, store: &ParamStore, cfg: &AggregateConfig, volume: Var, last_only: bool) -> Result<[Var; 4]> {
    let s = g.shape(volume).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(format!("cost volume must be [G, D, H, W], got {s:?}")));
    }
    let x = conv_relu(g, store, "agg.pre0", volume, 1)?;
    let mut x = conv_relu(g, store, "agg.pre1", x, 1)?;
    let heads = head_count(cfg);
    let mut outputs = Vec::with_capacity(4);
    if !last_only || heads == 1 {
        outputs.push(head(g, store, 0, x)?);
    }
    for i in 0..heads - 1 {
        x = hourglass(g, store, cfg, &format!("agg.hg{i}"), x)?;
        if !last_only || i + 2 == heads {
            outputs.push(head(g, store, i + 1, x)?);
        }
    }
    let last = *outputs.last().expect("at least one head");
    while outputs.len() < 4 {
        outputs.push(last);
    }
    if last_only {
        return Ok([last; 4]);
    }
    Ok([outputs[0], outputs[1], outputs[2], outputs[3]])
}
