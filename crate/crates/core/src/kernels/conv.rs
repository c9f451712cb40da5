//! Convolution kernels over up to three spatial axes (depth, height, width).
//!
//! Two-dimensional convolutions run through the same code with a unit depth
//! axis. Regular convolutions lower to im2col + GEMM; transposed convolutions
//! are the exact adjoint (GEMM + col2im) and share the kernel layout
//! `[c_in_of_forward_conv... ]`, i.e. a conv weight `[O, C, k..]` used as a
//! transposed-conv weight maps `O` channels back to `C` channels.

use super::gemm::{gemm, gemm_strided, Strided};

/// Kernel size, stride and zero padding per spatial axis `[d, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new2d(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn new3d(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents of a regular convolution, `None` if any would be empty.
    pub fn conv_out(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.pad[a];
            if span < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Output extents of the transposed convolution.
    pub fn transpose_out(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.pad[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = full - 2 * self.pad[a];
        }
        Some(out)
    }
}

fn vol(e: [usize; 3]) -> usize {
    e[0] * e[1] * e[2]
}

/// Output columns `xo` whose input column `xo * stride + tap - pad` is in range.
fn valid_range(out: usize, input: usize, stride: usize, tap: usize, pad: usize) -> std::ops::Range<usize> {
    // smallest xo with xo*stride + tap >= pad
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // largest xo with xo*stride + tap - pad <= input - 1
    let hi = if input + pad > tap {
        ((input + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    lo.min(hi)..hi
}

/// Lowers `x[c, input]` to columns `[c * taps, vol(output)]`.
pub fn im2col(x: &[f64], c: usize, input: [usize; 3], g: &ConvGeom, output: [usize; 3]) -> Vec<f64> {
    let p = vol(output);
    let mut cols = vec![0.0; c * g.taps() * p];
    walk(c, input, g, output, |ch_off, row, src_row, dst_row, xs, sw, first_src| {
        let dst = &mut cols[row * p + dst_row..];
        let xc = &x[ch_off + src_row..];
        if sw == 1 {
            dst[xs.clone()].copy_from_slice(&xc[first_src..first_src + xs.len()]);
        } else {
            for (k, xo) in xs.enumerate() {
                dst[xo] = xc[first_src + k * sw];
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im(cols: &[f64], c: usize, input: [usize; 3], g: &ConvGeom, output: [usize; 3], x: &mut [f64]) {
    let p = vol(output);
    walk(c, input, g, output, |ch_off, row, src_row, dst_row, xs, sw, first_src| {
        let src = &cols[row * p + dst_row..];
        let xc = &mut x[ch_off + src_row..];
        if sw == 1 {
            let n = xs.len();
            for (d, s) in xc[first_src..first_src + n].iter_mut().zip(&src[xs]) {
                *d += s;
            }
        } else {
            for (k, xo) in xs.enumerate() {
                xc[first_src + k * sw] += src[xo];
            }
        }
    });
}

/// Visits every (channel, tap, output row) with its in-range column span.
/// The callback receives the channel offset into `x`, the column-matrix row,
/// the input row offset, the output row offset, the valid output columns,
/// the width stride and the input column of the first valid output.
fn walk(
    c: usize,
    input: [usize; 3],
    g: &ConvGeom,
    output: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize, std::ops::Range<usize>, usize, usize),
) {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [id, ih, iw] = input;
    let [od, oh, ow] = output;
    for ch in 0..c {
        let ch_off = ch * vol(input);
        for a in 0..kd {
            let zr = valid_range(od, id, sd, a, pd);
            for b in 0..kh {
                let yr = valid_range(oh, ih, sh, b, ph);
                for e in 0..kw {
                    let row = ((ch * kd + a) * kh + b) * kw + e;
                    let xs = valid_range(ow, iw, sw, e, pw);
                    if xs.is_empty() {
                        continue;
                    }
                    let first_src = xs.start * sw + e - pw;
                    for z in zr.clone() {
                        let zi = z * sd + a - pd;
                        for y in yr.clone() {
                            let yi = y * sh + b - ph;
                            f(ch_off, row, (zi * ih + yi) * iw, (z * oh + y) * ow, xs.clone(), sw, first_src);
                        }
                    }
                }
            }
        }
    }
}

/// Shape bundle for one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeom,
}

fn add_bias(y: &mut [f64], bias: Option<&[f64]>, p: usize) {
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(dy: &[f64], c: usize, p: usize) -> Vec<f64> {
    (0..c).map(|o| dy[o * p..(o + 1) * p].iter().sum()).collect()
}

/// `y[c_out, output] = w[c_out, c_in * taps] · im2col(x) + bias`.
pub fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    if d.geom.stride == [1, 1, 1] {
        let mut y = Shifted::new(d).forward(x, w);
        add_bias(&mut y, bias, vol(d.output));
        return y;
    }
    let p = vol(d.output);
    let k = d.c_in * d.geom.taps();
    let cols = im2col(x, d.c_in, d.input, &d.geom, d.output);
    let mut y = vec![0.0; d.c_out * p];
    gemm(d.c_out, k, p, w, false, &cols, false, &mut y, false);
    add_bias(&mut y, bias, p);
    y
}

/// Returns `(dx, dw, dbias)` for [`conv_forward`].
pub fn conv_backward(x: &[f64], w: &[f64], dy: &[f64], d: &ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    if d.geom.stride == [1, 1, 1] {
        let (dx, dw) = Shifted::new(d).backward(x, w, dy);
        return (dx, dw, bias_grad(dy, d.c_out, vol(d.output)));
    }
    let p = vol(d.output);
    let k = d.c_in * d.geom.taps();
    let cols = im2col(x, d.c_in, d.input, &d.geom, d.output);
    let mut dw = vec![0.0; d.c_out * k];
    gemm(d.c_out, p, k, dy, false, &cols, true, &mut dw, false);
    let mut dcols = vec![0.0; k * p];
    gemm(k, d.c_out, p, w, true, dy, false, &mut dcols, false);
    let mut dx = vec![0.0; d.c_in * vol(d.input)];
    col2im(&dcols, d.c_in, d.input, &d.geom, d.output, &mut dx);
    (dx, dw, bias_grad(dy, d.c_out, p))
}

/// Stride-1 convolution without im2col. The input is zero-padded once; on
/// the padded grid every tap is a constant flat offset, so each tap is a
/// single GEMM over a shifted view. Results are computed on the padded grid
/// (`q` positions) and cropped.
struct Shifted<'a> {
    d: &'a ConvDims,
    padded: [usize; 3],
    /// Flat span covering every valid output position on the padded grid.
    q: usize,
    offsets: Vec<usize>,
}

impl<'a> Shifted<'a> {
    fn new(d: &'a ConvDims) -> Self {
        let [pd, ph, pw] = d.geom.pad;
        let [id, ih, iw] = d.input;
        let padded = [id + 2 * pd, ih + 2 * ph, iw + 2 * pw];
        let [od, oh, ow] = d.output;
        let q = ((od - 1) * padded[1] + oh - 1) * padded[2] + ow;
        let [kd, kh, kw] = d.geom.kernel;
        let mut offsets = Vec::with_capacity(d.geom.taps());
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    offsets.push((a * padded[1] + b) * padded[2] + e);
                }
            }
        }
        Self { d, padded, q, offsets }
    }

    fn rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [od, oh, ow] = self.d.output;
        let [_, ph, pw] = self.padded;
        (0..od * oh).map(move |r| ((r / oh * ph + r % oh) * pw, r * ow))
    }

    fn pad(&self, x: &[f64]) -> Vec<f64> {
        let [pd, ph, pw] = self.d.geom.pad;
        let [id, ih, iw] = self.d.input;
        let [_, pah, paw] = self.padded;
        let vp = vol(self.padded);
        let mut xp = vec![0.0; self.d.c_in * vp];
        for c in 0..self.d.c_in {
            for z in 0..id {
                for y in 0..ih {
                    let dst = c * vp + ((z + pd) * pah + y + ph) * paw + pw;
                    let src = (c * id + z) * ih * iw + y * iw;
                    xp[dst..dst + iw].copy_from_slice(&x[src..src + iw]);
                }
            }
        }
        xp
    }

    fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let d = self.d;
        let (taps, vp, q) = (d.geom.taps(), vol(self.padded), self.q);
        let xp = self.pad(x);
        let mut yq = vec![0.0; d.c_out * q];
        for (t, &off) in self.offsets.iter().enumerate() {
            gemm_strided(
                d.c_out,
                d.c_in,
                q,
                w,
                Strided { off: t, rs: d.c_in * taps, cs: taps },
                &xp,
                Strided { off, rs: vp, cs: 1 },
                &mut yq,
                Strided { off: 0, rs: q, cs: 1 },
                t > 0,
            );
        }
        let (p, ow) = (vol(d.output), d.output[2]);
        let mut y = vec![0.0; d.c_out * p];
        for o in 0..d.c_out {
            for (src, dst) in self.rows() {
                y[o * p + dst..o * p + dst + ow].copy_from_slice(&yq[o * q + src..o * q + src + ow]);
            }
        }
        y
    }

    fn backward(&self, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let (taps, vp, q) = (d.geom.taps(), vol(self.padded), self.q);
        let (p, ow) = (vol(d.output), d.output[2]);
        let mut dyq = vec![0.0; d.c_out * q];
        for o in 0..d.c_out {
            for (dst, src) in self.rows() {
                dyq[o * q + dst..o * q + dst + ow].copy_from_slice(&dy[o * p + src..o * p + src + ow]);
            }
        }
        let xp = self.pad(x);
        let mut dw = vec![0.0; w.len()];
        let mut dxp = vec![0.0; d.c_in * vp];
        for (t, &off) in self.offsets.iter().enumerate() {
            gemm_strided(
                d.c_out,
                q,
                d.c_in,
                &dyq,
                Strided { off: 0, rs: q, cs: 1 },
                &xp,
                Strided { off, rs: 1, cs: vp },
                &mut dw,
                Strided { off: t, rs: d.c_in * taps, cs: taps },
                false,
            );
            gemm_strided(
                d.c_in,
                d.c_out,
                q,
                w,
                Strided { off: t, rs: taps, cs: d.c_in * taps },
                &dyq,
                Strided { off: 0, rs: q, cs: 1 },
                &mut dxp,
                Strided { off, rs: vp, cs: 1 },
                true,
            );
        }
        // Crop the padded input gradient.
        let [pd, ph, pw] = d.geom.pad;
        let [id, ih, iw] = d.input;
        let [_, pah, paw] = self.padded;
        let mut dx = vec![0.0; d.c_in * vol(d.input)];
        for c in 0..d.c_in {
            for z in 0..id {
                for y in 0..ih {
                    let src = c * vp + ((z + pd) * pah + y + ph) * paw + pw;
                    let dst = (c * id + z) * ih * iw + y * iw;
                    dx[dst..dst + iw].copy_from_slice(&dxp[src..src + iw]);
                }
            }
        }
        (dx, dw)
    }
}

/// Transposed convolution. Here `d.input` is the spatial extent of `x`
/// (which plays the role of a conv *output*) and `d.output` the extent of the
/// result; `w` is laid out `[c_in, c_out * taps]`.
pub fn transpose_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let pin = vol(d.input);
    let k = d.c_out * d.geom.taps();
    let mut cols = vec![0.0; k * pin];
    gemm(k, d.c_in, pin, w, true, x, false, &mut cols, false);
    let mut y = vec![0.0; d.c_out * vol(d.output)];
    col2im(&cols, d.c_out, d.output, &d.geom, d.input, &mut y);
    add_bias(&mut y, bias, vol(d.output));
    y
}

/// Returns `(dx, dw, dbias)` for [`transpose_forward`].
pub fn transpose_backward(x: &[f64], w: &[f64], dy: &[f64], d: &ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pin = vol(d.input);
    let k = d.c_out * d.geom.taps();
    let dcols = im2col(dy, d.c_out, d.output, &d.geom, d.input);
    let mut dx = vec![0.0; d.c_in * pin];
    gemm(d.c_in, k, pin, w, false, &dcols, false, &mut dx, false);
    let mut dw = vec![0.0; d.c_in * k];
    gemm(d.c_in, pin, k, x, false, &dcols, true, &mut dw, false);
    (dx, dw, bias_grad(dy, d.c_out, vol(d.output)))
}

/// Per-channel 2D convolution, stride 1, `w[c, kh, kw]`, symmetric padding.
pub fn depthwise_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let [_, ih, iw] = d.input;
    let [_, oh, ow] = d.output;
    let [_, kh, kw] = d.geom.kernel;
    let [_, ph, pw] = d.geom.pad;
    let mut y = vec![0.0; d.c_in * oh * ow];
    for c in 0..d.c_in {
        let xc = &x[c * ih * iw..(c + 1) * ih * iw];
        let yc = &mut y[c * oh * ow..(c + 1) * oh * ow];
        for a in 0..kh {
            for b in 0..kw {
                let wv = w[(c * kh + a) * kw + b];
                for yo in 0..oh {
                    let yi = (yo + a) as isize - ph as isize;
                    if yi < 0 || yi >= ih as isize {
                        continue;
                    }
                    for xo in 0..ow {
                        let xi = (xo + b) as isize - pw as isize;
                        if xi >= 0 && xi < iw as isize {
                            yc[yo * ow + xo] += wv * xc[yi as usize * iw + xi as usize];
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            yc.iter_mut().for_each(|v| *v += bias[c]);
        }
    }
    y
}

pub fn depthwise_backward(x: &[f64], w: &[f64], dy: &[f64], d: &ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [_, ih, iw] = d.input;
    let [_, oh, ow] = d.output;
    let [_, kh, kw] = d.geom.kernel;
    let [_, ph, pw] = d.geom.pad;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for c in 0..d.c_in {
        let xc = &x[c * ih * iw..(c + 1) * ih * iw];
        let dyc = &dy[c * oh * ow..(c + 1) * oh * ow];
        let dxc = &mut dx[c * ih * iw..(c + 1) * ih * iw];
        for a in 0..kh {
            for b in 0..kw {
                let wi = (c * kh + a) * kw + b;
                let wv = w[wi];
                let mut acc = 0.0;
                for yo in 0..oh {
                    let yi = (yo + a) as isize - ph as isize;
                    if yi < 0 || yi >= ih as isize {
                        continue;
                    }
                    for xo in 0..ow {
                        let xi = (xo + b) as isize - pw as isize;
                        if xi >= 0 && xi < iw as isize {
                            let src = yi as usize * iw + xi as usize;
                            let g = dyc[yo * ow + xo];
                            acc += g * xc[src];
                            dxc[src] += g * wv;
                        }
                    }
                }
                dw[wi] = acc;
            }
        }
    }
    (dx, dw, bias_grad(dy, d.c_in, oh * ow))
}
