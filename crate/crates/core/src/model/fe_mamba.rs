//! Feature extraction with state-space self- and cross-attention.
//!
//! Self-attention: a stride-4 patch stem, then four stages of VSS blocks. Stage
//! 1 runs at 1/4 resolution, stages 2 and 3 are each preceded by a stride-2
//! downsample, and stage 4 refines the 1/16 map without a further downsample.
//!
//! Cross-attention: each side's scan reads its own decay and output
//! projection but the other side's inputs and input projection, so
//! `Y_left = SSM(A_left, B_right, C_left, x_right)` and symmetrically.

use serde::{Deserialize, Serialize};

use super::layers::{self, scan_orders};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Channel counts and depth of the feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub c4: usize,
    pub vss_blocks_per_stage: [usize; 4],
    pub state_dim: usize,
    pub ffn_expansion: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            c0: 16,
            c1: 16,
            c2: 32,
            c3: 64,
            c4: 16,
            vss_blocks_per_stage: [2, 2, 2, 2],
            state_dim: 8,
            ffn_expansion: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.c0, self.c1, self.c2, self.c3, self.c4, self.state_dim, self.ffn_expansion];
        if all.contains(&0) {
            return Err(Error::invalid("backbone channel counts, state_dim and ffn_expansion must be positive"));
        }
        Ok(())
    }
}

/// Which image of the pair a feature map belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Multi-scale features of one image: `f0`, `f1`, `f4` at 1/4, `f2` at 1/8,
/// `f3` at 1/16 resolution.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f0: Var,
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
    pub side: Side,
}

/// Rejects images whose extents are not multiples of 16.
pub fn check_image(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[3, h, w] if h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0 => Ok((h, w)),
        &[3, h, w] => Err(Error::invalid(format!(
            "image extents {h}x{w} must be multiples of 16"
        ))),
        other => Err(Error::invalid(format!("image must be [3, H, W], got {other:?}"))),
    }
}

pub fn init_stem(store: &mut ParamStore, cfg: &BackboneConfig) {
    layers::init_conv2d(store, "backbone.stem", 3, cfg.c0, 4);
}

/// Kernel-4, stride-4 patch embedding: `[3, H, W]` → `[C0, H/4, W/4]`.
pub fn stem_embed(g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
    check_image(g.shape(image))?;
    layers::conv2d(g, store, "backbone.stem", image, 4, 0)
}

pub fn init_ss2d(store: &mut ParamStore, prefix: &str, c: usize, n: usize) {
    for dir in 0..4 {
        let p = format!("{prefix}.dir{dir}");
        layers::init_decay(store, &p, c);
        layers::init_linear(store, &format!("{p}.b_proj"), c, n);
        layers::init_linear(store, &format!("{p}.c_proj"), c, n);
    }
    layers::init_linear(store, &format!("{prefix}.out_proj"), c, c);
}

/// One traversal of the four-way scan, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ScanBranch {
    /// Tokens in traversal order, `[T, C]`.
    pub sequence: Var,
    pub decay: Var,
    pub b: Var,
    pub c: Var,
    /// Scan output in traversal order, `[T, C]`.
    pub scanned: Var,
    /// Scan output back in row-major token order.
    pub output: Var,
}

pub fn ss2d_branch(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    tokens: Var,
    h: usize,
    w: usize,
    dir: usize,
) -> Result<ScanBranch> {
    let order = &scan_orders(h, w)[dir];
    let p = format!("{prefix}.dir{dir}");
    let sequence = layers::gather_rows(g, tokens, order)?;
    let decay = layers::decay(g, store, &p, sequence)?;
    let b = layers::linear(g, store, &format!("{p}.b_proj"), sequence)?;
    let c = layers::linear(g, store, &format!("{p}.c_proj"), sequence)?;
    let scanned = g.ssm_scan(decay, b, c, sequence)?;
    let output = layers::gather_rows(g, scanned, &layers::invert(order))?;
    Ok(ScanBranch {
        sequence,
        decay,
        b,
        c,
        scanned,
        output,
    })
}

/// Four-way 2D selective scan over `[H·W, C]` tokens, merged by summation and
/// passed through an output projection.
pub fn ss2d(g: &mut Graph, store: &ParamStore, prefix: &str, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let mut merged = None;
    for dir in 0..4 {
        let br = ss2d_branch(g, store, prefix, tokens, h, w, dir)?;
        merged = Some(match merged {
            Some(m) => g.add(m, br.output)?,
            None => br.output,
        });
    }
    layers::linear(g, store, &format!("{prefix}.out_proj"), merged.expect("four branches"))
}

pub fn init_vss_block(store: &mut ParamStore, prefix: &str, c: usize, n: usize, expansion: usize) {
    layers::init_layer_norm(store, &format!("{prefix}.ln_in"), c);
    layers::init_linear(store, &format!("{prefix}.in_proj"), c, c);
    layers::init_depthwise(store, &format!("{prefix}.dw"), c, 3);
    init_ss2d(store, &format!("{prefix}.ss2d"), c, n);
    layers::init_layer_norm(store, &format!("{prefix}.ln_mix"), c);
    layers::init_layer_norm(store, &format!("{prefix}.ln_ffn"), c);
    layers::init_linear(store, &format!("{prefix}.ffn1"), c, c * expansion);
    layers::init_linear(store, &format!("{prefix}.ffn2"), c * expansion, c);
}

/// Visual state-space block on `[C, H, W]`:
/// `x + LN(SS2D(SiLU(DWConv(Linear(LN(x))))))`, then `x + FFN(LN(x))`.
pub fn vss_block(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[1], s[2]);
    let tokens = layers::chw_to_tokens(g, x)?;
    let t = layers::layer_norm(g, store, &format!("{prefix}.ln_in"), tokens)?;
    let t = layers::linear(g, store, &format!("{prefix}.in_proj"), t)?;
    let u = layers::tokens_to_chw(g, t, h, w)?;
    let u = layers::depthwise(g, store, &format!("{prefix}.dw"), u, 1)?;
    let u = g.silu(u);
    let u = layers::chw_to_tokens(g, u)?;
    let mixed = ss2d(g, store, &format!("{prefix}.ss2d"), u, h, w)?;
    let mixed = layers::layer_norm(g, store, &format!("{prefix}.ln_mix"), mixed)?;
    let tokens = g.add(tokens, mixed)?;
    let f = layers::layer_norm(g, store, &format!("{prefix}.ln_ffn"), tokens)?;
    let f = layers::linear(g, store, &format!("{prefix}.ffn1"), f)?;
    let f = g.gelu(f);
    let f = layers::linear(g, store, &format!("{prefix}.ffn2"), f)?;
    let tokens = g.add(tokens, f)?;
    layers::tokens_to_chw(g, tokens, h, w)
}

pub fn init_self_attention(store: &mut ParamStore, cfg: &BackboneConfig) {
    let n = cfg.state_dim;
    let widths = [cfg.c1, cfg.c2, cfg.c3, cfg.c3];
    if cfg.c0 != cfg.c1 {
        layers::init_conv2d(store, "backbone.proj1", cfg.c0, cfg.c1, 1);
    }
    layers::init_conv2d(store, "backbone.down2", cfg.c1, cfg.c2, 2);
    layers::init_conv2d(store, "backbone.down3", cfg.c2, cfg.c3, 2);
    for (stage, &c) in widths.iter().enumerate() {
        for blk in 0..cfg.vss_blocks_per_stage[stage] {
            init_vss_block(store, &format!("backbone.stage{}.block{blk}", stage + 1), c, n, cfg.ffn_expansion);
        }
    }
}

fn run_stage(g: &mut Graph, store: &ParamStore, stage: usize, blocks: usize, mut x: Var) -> Result<Var> {
    for blk in 0..blocks {
        x = vss_block(g, store, &format!("backbone.stage{stage}.block{blk}"), x)?;
    }
    Ok(x)
}

/// `f0` → `(f1, f2, f3)` at 1/4, 1/8 and 1/16 resolution.
pub fn self_attention_backbone(g: &mut Graph, store: &ParamStore, cfg: &BackboneConfig, f0: Var) -> Result<(Var, Var, Var)> {
    let s = g.shape(f0).to_vec();
    if s.len() != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::invalid(format!(
            "stem features {s:?} cannot be downsampled twice more without reaching zero extent"
        )));
    }
    let mut x = f0;
    if cfg.c0 != cfg.c1 {
        x = layers::conv2d(g, store, "backbone.proj1", x, 1, 0)?;
    }
    let f1 = run_stage(g, store, 1, cfg.vss_blocks_per_stage[0], x)?;
    let x = layers::conv2d(g, store, "backbone.down2", f1, 2, 0)?;
    let f2 = run_stage(g, store, 2, cfg.vss_blocks_per_stage[1], x)?;
    let x = layers::conv2d(g, store, "backbone.down3", f2, 2, 0)?;
    let x = run_stage(g, store, 3, cfg.vss_blocks_per_stage[2], x)?;
    let f3 = run_stage(g, store, 4, cfg.vss_blocks_per_stage[3], x)?;
    Ok((f1, f2, f3))
}

pub fn init_cross_attention(store: &mut ParamStore, cfg: &BackboneConfig) {
    let (c0, c4, n) = (cfg.c0, cfg.c4, cfg.state_dim);
    let p = "backbone.cross";
    layers::init_linear(store, &format!("{p}.in_proj"), c0, c4);
    layers::init_depthwise(store, &format!("{p}.dw"), c4, 3);
    layers::init_decay(store, p, c4);
    layers::init_linear(store, &format!("{p}.x_proj"), c4, c4);
    layers::init_linear(store, &format!("{p}.b_proj"), c4, n);
    layers::init_linear(store, &format!("{p}.c_proj"), c4, n);
    layers::init_linear(store, &format!("{p}.gate"), c0, c4);
    store.init_const(&format!("{p}.norm.gain"), &[c4], 1.0);
    layers::init_linear(store, &format!("{p}.out_proj"), c4, c4);
}

/// Per-side scan operands of the cross-attention block, row-major token order.
#[derive(Clone, Copy, Debug)]
pub struct CrossHeads {
    pub tokens: Var,
    pub x: Var,
    pub b: Var,
    pub c: Var,
    pub decay: Var,
}

pub fn cross_heads(g: &mut Graph, store: &ParamStore, f0: Var) -> Result<CrossHeads> {
    let p = "backbone.cross";
    let s = g.shape(f0).to_vec();
    let tokens = layers::chw_to_tokens(g, f0)?;
    let z = layers::linear(g, store, &format!("{p}.in_proj"), tokens)?;
    let z = layers::tokens_to_chw(g, z, s[1], s[2])?;
    let z = layers::depthwise(g, store, &format!("{p}.dw"), z, 1)?;
    let z = g.silu(z);
    let u = layers::chw_to_tokens(g, z)?;
    Ok(CrossHeads {
        tokens,
        x: layers::linear(g, store, &format!("{p}.x_proj"), u)?,
        b: layers::linear(g, store, &format!("{p}.b_proj"), u)?,
        c: layers::linear(g, store, &format!("{p}.c_proj"), u)?,
        decay: layers::decay(g, store, p, u)?,
    })
}

/// Cross scan over forward and reverse row-major orders, summed.
fn cross_scan(g: &mut Graph, own: &CrossHeads, other: &CrossHeads, h: usize, w: usize) -> Result<Var> {
    let orders = scan_orders(h, w);
    let mut total = None;
    for order in &orders[..2] {
        let identity = order.iter().enumerate().all(|(i, &o)| i == o);
        let a = if identity {
            own.decay
        } else {
            let t = order.len();
            let idx: std::rc::Rc<[usize]> = order.iter().copied().collect();
            g.gather(own.decay, idx, &[t])?
        };
        let b = layers::gather_rows(g, other.b, order)?;
        let c = layers::gather_rows(g, own.c, order)?;
        let x = layers::gather_rows(g, other.x, order)?;
        let y = g.ssm_scan(a, b, c, x)?;
        let y = layers::gather_rows(g, y, &layers::invert(order))?;
        total = Some(match total {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    Ok(total.expect("two directions"))
}

fn cross_output(g: &mut Graph, store: &ParamStore, heads: &CrossHeads, y: Var, h: usize, w: usize) -> Result<Var> {
    let p = "backbone.cross";
    let gate = layers::linear(g, store, &format!("{p}.gate"), heads.tokens)?;
    let gate = g.gelu(gate);
    let gated = g.mul(y, gate)?;
    let gain = g.param(store, &format!("{p}.norm.gain"))?;
    let normed = g.rms_norm(gated, gain, layers::RMS_NORM_EPS)?;
    let out = layers::linear(g, store, &format!("{p}.out_proj"), normed)?;
    layers::tokens_to_chw(g, out, h, w)
}

/// `(f0_left, f0_right)` → `(f4_left, f4_right)`, each `[C4, H/4, W/4]`.
pub fn cross_attention_block(g: &mut Graph, store: &ParamStore, f0_left: Var, f0_right: Var) -> Result<(Var, Var)> {
    if g.shape(f0_left) != g.shape(f0_right) {
        return Err(Error::shape("cross_attention_block", g.shape(f0_left), g.shape(f0_right)));
    }
    let s = g.shape(f0_left).to_vec();
    let (h, w) = (s[1], s[2]);
    let left = cross_heads(g, store, f0_left)?;
    let right = cross_heads(g, store, f0_right)?;
    let y_left = cross_scan(g, &left, &right, h, w)?;
    let y_right = cross_scan(g, &right, &left, h, w)?;
    let f4_left = cross_output(g, store, &left, y_left, h, w)?;
    let f4_right = cross_output(g, store, &right, y_right, h, w)?;
    Ok((f4_left, f4_right))
}

pub fn init(store: &mut ParamStore, cfg: &BackboneConfig) {
    init_stem(store, cfg);
    init_self_attention(store, cfg);
    init_cross_attention(store, cfg);
}

/// Full extractor on a stereo pair; both images share every weight.
pub fn extract(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    left: Var,
    right: Var,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    let f0_l = stem_embed(g, store, left)?;
    let f0_r = stem_embed(g, store, right)?;
    let (f1_l, f2_l, f3_l) = self_attention_backbone(g, store, cfg, f0_l)?;
    let (f1_r, f2_r, f3_r) = self_attention_backbone(g, store, cfg, f0_r)?;
    let (f4_l, f4_r) = cross_attention_block(g, store, f0_l, f0_r)?;
    Ok((
        FeaturePyramid {
            f0: f0_l,
            f1: f1_l,
            f2: f2_l,
            f3: f3_l,
            f4: f4_l,
            side: Side::Left,
        },
        FeaturePyramid {
            f0: f0_r,
            f1: f1_r,
            f2: f2_r,
            f3: f3_r,
            f4: f4_r,
            side: Side::Right,
        },
    ))
}
