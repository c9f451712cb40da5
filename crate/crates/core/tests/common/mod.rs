//! Shared helpers for the integration tests: central finite differences and
//! small fixtures.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereomamba::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;
/// Magnitudes below this are compared absolutely (`FD_REL_TOL · FD_FLOOR`),
/// which keeps round-off in `f(x ± h)` from dominating near-zero entries.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut rng(seed))
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_REL_TOL * analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Records `f` on fresh inputs and reduces its output to a scalar through a
/// fixed random projection.
fn project(f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], proj_seed: u64) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let shape = g.shape(y).to_vec();
    let loss = if shape.iter().product::<usize>() == 1 {
        let s = g.reshape(y, &[1])?;
        g.sum(s)
    } else {
        let r = g.constant(randn(&shape, proj_seed));
        let p = g.mul(y, r)?;
        g.sum(p)
    };
    Ok((g, vars, loss))
}

fn scalar(f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], proj_seed: u64) -> f64 {
    let (g, _, loss) = project(f, inputs, proj_seed).expect("forward");
    g.value(loss).item()
}

/// Compares the adjoint of every input against central differences. At most
/// `max_coords` coordinates per input are probed, spread evenly.
/// Returns the worst relative error seen.
pub fn check_op(name: &str, inputs: &[Tensor], max_coords: usize, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let proj_seed = 0x5eed ^ name.len() as u64;
    let (mut g, vars, loss) = project(&f, inputs, proj_seed).expect("forward");
    let grads = g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let n = t.numel();
        let step = (n / max_coords.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let mut perturbed = inputs.to_vec();
            perturbed[k].data_mut()[i] += FD_STEP;
            let up = scalar(&f, &perturbed, proj_seed);
            perturbed[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = scalar(&f, &perturbed, proj_seed);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            assert!(close(a, numeric), "{name}: input {k} coord {i}: adjoint {a:e} vs finite difference {numeric:e}");
        }
    }
    worst
}

/// Direct 2D convolution: `x[C, H, W]`, `w[O, C, k, k]`.
pub fn conv2d_loops(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (o, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[o, oh, ow]);
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.at(&[oc, ic, ky, kx]) * x.at(&[ic, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out.set(&[oc, y, xx], acc);
            }
        }
    }
    out
}

/// Direct transposed 2D convolution by scattering: `w[C_in, C_out, k, k]`.
pub fn transpose2d_loops(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (o, k) = (w.dim(1), w.dim(2));
    let oh = (h - 1) * stride + k - 2 * pad;
    let ow = (wd - 1) * stride + k - 2 * pad;
    let mut out = Tensor::from_fn(&[o, oh, ow], |i| b[i / (oh * ow)]);
    for ic in 0..c {
        for y in 0..h {
            for xx in 0..wd {
                for oc in 0..o {
                    for ky in 0..k {
                        for kx in 0..k {
                            let oy = (y * stride + ky) as isize - pad as isize;
                            let ox = (xx * stride + kx) as isize - pad as isize;
                            if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                let idx = [oc, oy as usize, ox as usize];
                                let v = out.at(&idx) + w.at(&[ic, oc, ky, kx]) * x.at(&[ic, y, xx]);
                                out.set(&idx, v);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Direct 3D convolution: `x[C, D, H, W]`, `w[O, C, k, k, k]`.
pub fn conv3d_loops(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let s = x.shape();
    let (c, dims) = (s[0], [s[1], s[2], s[3]]);
    let (o, k) = (w.dim(0), w.dim(2));
    let od: Vec<usize> = dims.iter().map(|&e| (e + 2 * pad - k) / stride + 1).collect();
    let mut out = Tensor::zeros(&[o, od[0], od[1], od[2]]);
    for oc in 0..o {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let p = [z * stride + kz, y * stride + ky, xx * stride + kx];
                                    if p.iter().zip(&dims).all(|(&q, &e)| q >= pad && q - pad < e) {
                                        acc += w.at(&[oc, ic, kz, ky, kx]) * x.at(&[ic, p[0] - pad, p[1] - pad, p[2] - pad]);
                                    }
                                }
                            }
                        }
                    }
                    out.set(&[oc, z, y, xx], acc);
                }
            }
        }
    }
    out
}

/// Group-wise correlation by five nested loops, shift `x - d`.
pub fn gwc_loops(l: &Tensor, r: &Tensor, d_q: usize, groups: usize) -> Tensor {
    let (c, h, w) = (l.dim(0), l.dim(1), l.dim(2));
    let per = c / groups;
    let mut out = Tensor::zeros(&[groups, d_q, h, w]);
    for gi in 0..groups {
        for d in 0..d_q {
            for y in 0..h {
                for x in d..w {
                    let mut acc = 0.0;
                    for ch in gi * per..(gi + 1) * per {
                        acc += l.at(&[ch, y, x]) * r.at(&[ch, y, x - d]);
                    }
                    out.set(&[gi, d, y, x], acc / per as f64);
                }
            }
        }
    }
    out
}

/// EPE, Bad2/3/5 and depth MAE by an explicit per-pixel loop.
pub fn metric_loops(pred: &[f64], gt: &[f64], valid: &[bool], fb: f64) -> (f64, [f64; 3], Option<f64>) {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| valid[i]).collect();
    let n = idx.len() as f64;
    let epe = idx.iter().map(|&i| (pred[i] - gt[i]).abs()).sum::<f64>() / n;
    let bad = [2.0, 3.0, 5.0].map(|t| 100.0 * idx.iter().filter(|&&i| (pred[i] - gt[i]).abs() > t).count() as f64 / n);
    let depth: Vec<f64> = idx
        .iter()
        .filter(|&&i| pred[i] > 0.5 && gt[i] > 0.5)
        .map(|&i| (fb / pred[i] - fb / gt[i]).abs())
        .collect();
    let mae = (!depth.is_empty()).then(|| depth.iter().sum::<f64>() / depth.len() as f64);
    (epe, bad, mae)
}

/// SSIM of one plane straight from the definition: for every window position
/// the Gaussian-weighted means, variances and covariance are summed directly.
pub fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const K: usize = 11;
    let sigma: f64 = 1.5;
    let mut win = [[0.0; K]; K];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - K {
        for x0 in 0..=w - K {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let p = (y0 + i) * w + x0 + j;
                    ma += win[i][j] / total * a[p];
                    mb += win[i][j] / total * b[p];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let p = (y0 + i) * w + x0 + j;
                    let wt = win[i][j] / total;
                    va += wt * (a[p] - ma) * (a[p] - ma);
                    vb += wt * (b[p] - mb) * (b[p] - mb);
                    cov += wt * (a[p] - ma) * (b[p] - mb);
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// A training setup small enough for a few steps per test: 32×64 synthetic
/// pairs, `D_max = 16`, narrow channels and one hourglass.
pub fn tiny_config() -> stereomamba::train::TrainConfig {
    use stereomamba::data::SynthParams;
    use stereomamba::model::{AggregateConfig, BackboneConfig, ModelConfig};
    use stereomamba::train::{DataConfig, TrainConfig};
    TrainConfig {
        seed: 11,
        epochs: 2,
        batch_size: 2,
        lr_max: 1e-3,
        model: ModelConfig {
            channels: BackboneConfig {
                c0: 8,
                c1: 8,
                c2: 8,
                c3: 8,
                c4: 8,
                vss_blocks_per_stage: [1, 1, 1, 1],
                state_dim: 4,
                ffn_expansion: 2,
            },
            fused_channels: 8,
            groups: 4,
            d_max: 16,
            aggregate: AggregateConfig {
                channels: 4,
                hourglass_count: 1,
                flat_hourglass: false,
            },
            ..ModelConfig::default()
        },
        data: DataConfig {
            synth: SynthParams {
                height: 32,
                width: 64,
                d_max_gt: 8,
                n_layers: 2,
            },
            train_samples: 4,
            val_samples: 2,
            train_dir: None,
            val_dir: None,
        },
        ..TrainConfig::default()
    }
}
