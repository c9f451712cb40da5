//! Small building blocks shared by the network modules.

use std::rc::Rc;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const RMS_NORM_EPS: f64 = 1e-6;

pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.init_uniform(&format!("{prefix}.w"), &[fan_out, fan_in], fan_in);
    store.init_zeros(&format!("{prefix}.b"), &[fan_out]);
}

pub fn init_conv2d(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    store.init_uniform(&format!("{prefix}.w"), &[c_out, c_in, k, k], c_in * k * k);
    store.init_zeros(&format!("{prefix}.b"), &[c_out]);
}

/// Transposed-conv weights are laid out `[c_in, c_out, k, k]`.
pub fn init_transpose2d(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    store.init_uniform(&format!("{prefix}.w"), &[c_in, c_out, k, k], c_in * k * k);
    store.init_zeros(&format!("{prefix}.b"), &[c_out]);
}

pub fn init_depthwise(store: &mut ParamStore, prefix: &str, c: usize, k: usize) {
    store.init_uniform(&format!("{prefix}.w"), &[c, 1, k, k], k * k);
    store.init_zeros(&format!("{prefix}.b"), &[c]);
}

pub fn init_conv3d(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    store.init_uniform(&format!("{prefix}.w"), &[c_out, c_in, k, k, k], c_in * k * k * k);
    store.init_zeros(&format!("{prefix}.b"), &[c_out]);
}

pub fn init_transpose3d(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    store.init_uniform(&format!("{prefix}.w"), &[c_in, c_out, k, k, k], c_in * k * k * k);
    store.init_zeros(&format!("{prefix}.b"), &[c_out]);
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, n: usize) {
    store.init_const(&format!("{prefix}.gain"), &[n], 1.0);
    store.init_zeros(&format!("{prefix}.bias"), &[n]);
}

fn wb(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<(Var, Var)> {
    Ok((
        g.param(store, &format!("{prefix}.w"))?,
        g.param(store, &format!("{prefix}.b"))?,
    ))
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let (w, b) = wb(g, store, prefix)?;
    g.linear(x, w, Some(b))
}

pub fn conv2d(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let (w, b) = wb(g, store, prefix)?;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub fn transpose2d(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let (w, b) = wb(g, store, prefix)?;
    g.transpose2d(x, w, Some(b), stride, pad)
}

pub fn depthwise(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, pad: usize) -> Result<Var> {
    let (w, b) = wb(g, store, prefix)?;
    g.depthwise2d(x, w, Some(b), pad)
}

pub fn conv3d(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let (w, b) = wb(g, store, prefix)?;
    g.conv3d(x, w, Some(b), stride, pad)
}

pub fn transpose3d(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let (w, b) = wb(g, store, prefix)?;
    g.transpose3d(x, w, Some(b), stride, pad)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// `[C, H, W]` → `[H·W, C]` (row-major tokens).
pub fn chw_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose2(flat)
}

/// `[H·W, C]` → `[C, H, W]`.
pub fn tokens_to_chw(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let t = g.transpose2(x)?;
    g.reshape(t, &[c, h, w])
}

/// Traversal orders used by the four-way scan, as token indices in visit
/// order: row-major forward, row-major reverse, column-major forward,
/// column-major reverse.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
    let row_rev = row.iter().rev().copied().collect();
    let col_rev = col.iter().rev().copied().collect();
    [row, row_rev, col, col_rev]
}

/// Row gather of a `[T, C]` token matrix: output row `i` is input row `order[i]`.
pub fn gather_rows(g: &mut Graph, x: Var, order: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let c = s[1];
    let idx: Rc<[usize]> = order.iter().flat_map(|&r| (0..c).map(move |j| r * c + j)).collect();
    g.gather(x, idx, &[order.len(), c])
}

/// Inverse permutation.
pub fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Selective-scan decay `A_t = exp(-softplus(a) · Δ_t)` with
/// `Δ_t = softplus(dt(u_t))`, so `0 < A_t <= 1`.
pub fn decay(g: &mut Graph, store: &ParamStore, prefix: &str, u: Var) -> Result<Var> {
    let t = g.shape(u)[0];
    let dt = linear(g, store, &format!("{prefix}.dt"), u)?;
    let dt = g.softplus(dt);
    let dt = g.reshape(dt, &[t])?;
    let a = g.param(store, &format!("{prefix}.a_log"))?;
    let rate = g.softplus(a);
    let scaled = g.mul(dt, rate)?;
    let neg = g.scale(scaled, -1.0);
    Ok(g.exp(neg))
}

/// Parameters read by [`decay`]; `softplus(a_log)` starts at 0.1.
pub fn init_decay(store: &mut ParamStore, prefix: &str, c: usize) {
    init_linear(store, &format!("{prefix}.dt"), c, 1);
    store.init_const(&format!("{prefix}.a_log"), &[1], (0.1f64.exp() - 1.0).ln());
}
