//! Disparity accuracy metrics and the warp-synthesis image metrics.

use serde::Serialize;

use crate::data::Calib;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disparities at or below this are excluded from depth MAE.
pub const DEPTH_MIN_DISPARITY: f64 = 0.5;
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Frames whose valid mask covers less than this fraction are skipped.
pub const MIN_VALID_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub epe_px: f64,
    pub bad2_pct: f64,
    pub bad3_pct: f64,
    pub bad5_pct: f64,
    /// `None` when every valid pixel has a near-zero disparity.
    pub depth_mae_mm: Option<f64>,
    pub valid_count: usize,
    pub ssim: Option<f64>,
    pub psnr_db: Option<f64>,
}

pub fn disparity_metrics(pred: &Tensor, gt: &Tensor, valid: &[bool], calib: &Calib) -> Result<MetricReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("disparity_metrics", pred.shape(), gt.shape()));
    }
    if valid.len() != gt.numel() {
        return Err(Error::invalid("valid mask size differs from the disparity map"));
    }
    if !(calib.focal_px > 0.0 && calib.baseline_mm > 0.0) {
        return Err(Error::invalid("calibration must be positive"));
    }
    let fb = calib.focal_px * calib.baseline_mm;
    let (mut n, mut abs, mut b2, mut b3, mut b5) = (0usize, 0.0, 0usize, 0usize, 0usize);
    let (mut depth_n, mut depth_abs) = (0usize, 0.0);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(valid) {
        if !m {
            continue;
        }
        let e = (p - g).abs();
        n += 1;
        abs += e;
        b2 += (e > 2.0) as usize;
        b3 += (e > 3.0) as usize;
        b5 += (e > 5.0) as usize;
        if p > DEPTH_MIN_DISPARITY && g > DEPTH_MIN_DISPARITY {
            depth_n += 1;
            depth_abs += (fb / p - fb / g).abs();
        }
    }
    if n == 0 {
        return Err(Error::invalid("empty valid mask"));
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(MetricReport {
        epe_px: abs / n as f64,
        bad2_pct: pct(b2),
        bad3_pct: pct(b3),
        bad5_pct: pct(b5),
        depth_mae_mm: (depth_n > 0).then(|| depth_abs / depth_n as f64),
        valid_count: n,
        ssim: None,
        psnr_db: None,
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

fn ssim_formula(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

/// Per-window SSIM of one plane, `[(H - 10) · (W - 10)]`. With a mask the
/// window moments are taken over masked pixels only, Gaussian weights
/// renormalized; windows without any masked pixel come out as NaN.
fn ssim_map(a: &[f64], b: &[f64], mask: Option<&[bool]>, h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_window();
    let m: Vec<f64> = match mask {
        Some(m) => m.iter().map(|&v| v as u8 as f64).collect(),
        None => vec![1.0; a.len()],
    };
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let f = |x: Vec<f64>| filter_valid(&x, h, w, &k);
    let mu_a = f(prod(&|i| m[i] * a[i]));
    let mu_b = f(prod(&|i| m[i] * b[i]));
    let aa = f(prod(&|i| m[i] * a[i] * a[i]));
    let bb = f(prod(&|i| m[i] * b[i] * b[i]));
    let ab = f(prod(&|i| m[i] * a[i] * b[i]));
    let wsum = mask.map(|_| f(m.clone()));
    (0..mu_a.len())
        .map(|i| {
            let norm = wsum.as_ref().map_or(1.0, |ws| ws[i]);
            if norm <= 0.0 {
                return f64::NAN;
            }
            let (ma, mb) = (mu_a[i] / norm, mu_b[i] / norm);
            let va = aa[i] / norm - ma * ma;
            let vb = bb[i] / norm - mb * mb;
            let cov = ab[i] / norm - ma * mb;
            ssim_formula(ma, mb, va, vb, cov)
        })
        .collect()
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, w] => Ok((1, h, w)),
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::invalid(format!("expected [H, W] or [C, H, W], got {s:?}"))),
    }
}

/// Mean SSIM over every full window position, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_masked(a, b, None)
}

/// SSIM restricted to `mask`: window moments use masked pixels only, and the
/// map is averaged over window positions whose centre pixel is masked.
pub fn ssim_masked(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (c, h, w) = planes(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    if mask.is_some_and(|m| m.len() != h * w) {
        return Err(Error::invalid("ssim mask size differs from the image"));
    }
    let (ow, r) = (w + 1 - SSIM_WINDOW, SSIM_WINDOW / 2);
    let mut total = 0.0;
    for ch in 0..c {
        let plane = h * w;
        let map = ssim_map(&a.data()[ch * plane..(ch + 1) * plane], &b.data()[ch * plane..(ch + 1) * plane], mask, h, w);
        let (mut s, mut n) = (0.0, 0usize);
        for (i, v) in map.iter().enumerate() {
            let centre = (i / ow + r) * w + i % ow + r;
            if mask.map_or(true, |m| m[centre]) {
                s += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("no valid SSIM window positions"));
        }
        total += s / n as f64;
    }
    Ok(total / c as f64)
}

/// `10·log10(1 / MSE)` for data range 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    psnr_masked(a, b, None)
}

pub fn psnr_masked(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let (_, h, w) = planes(a)?;
    let plane = h * w;
    if mask.is_some_and(|m| m.len() != plane) {
        return Err(Error::invalid("psnr mask size differs from the image"));
    }
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.map_or(true, |m| m[i % plane]) {
            se += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("no valid pixels for psnr"));
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Backward warp `right(x, y) = left(x + d(x, y), y)` with linear
/// interpolation along the row. Samples outside the frame are zero and
/// marked invalid; `valid_hint` further restricts the validity map.
pub fn warp_synthesize(left: &Tensor, disparity: &Tensor, valid_hint: Option<&[bool]>) -> Result<(Tensor, Vec<bool>)> {
    let (c, h, w) = planes(left)?;
    if disparity.shape() != [h, w] {
        return Err(Error::shape("warp_synthesize", left.shape(), disparity.shape()));
    }
    if valid_hint.is_some_and(|m| m.len() != h * w) {
        return Err(Error::invalid("valid hint size differs from the image"));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(left.shape());
    let mut valid = vec![false; plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let xs = x as f64 + disparity.data()[i];
            if !(xs >= 0.0 && xs <= (w - 1) as f64) {
                continue;
            }
            let x0 = (xs.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let f = xs - x0 as f64;
            for ch in 0..c {
                let row = &left.data()[ch * plane + y * w..ch * plane + (y + 1) * w];
                out.data_mut()[ch * plane + i] = if f == 0.0 { row[x0] } else { (1.0 - f) * row[x0] + f * row[x1] };
            }
            valid[i] = valid_hint.map_or(true, |m| m[i]);
        }
    }
    Ok((out, valid))
}

/// One row of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRow {
    pub frame: String,
    pub epe: f64,
    pub bad2: f64,
    pub bad3: f64,
    pub bad5: f64,
    pub depth_mae: Option<f64>,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub valid_px: usize,
}

impl FrameRow {
    pub fn new(frame: impl Into<String>, r: &MetricReport) -> Self {
        Self {
            frame: frame.into(),
            epe: r.epe_px,
            bad2: r.bad2_pct,
            bad3: r.bad3_pct,
            bad5: r.bad5_pct,
            depth_mae: r.depth_mae_mm,
            ssim: r.ssim,
            psnr: r.psnr_db,
            valid_px: r.valid_count,
        }
    }
}

/// Per-frame means over the rows (missing optional values are skipped).
pub fn aggregate_rows(rows: &[FrameRow]) -> Option<FrameRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&FrameRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let opt_mean = |f: &dyn Fn(&FrameRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(FrameRow {
        frame: "mean".into(),
        epe: mean(&|r| r.epe),
        bad2: mean(&|r| r.bad2),
        bad3: mean(&|r| r.bad3),
        bad5: mean(&|r| r.bad5),
        depth_mae: opt_mean(&|r| r.depth_mae),
        ssim: opt_mean(&|r| r.ssim),
        psnr: opt_mean(&|r| r.psnr),
        valid_px: rows.iter().map(|r| r.valid_px).sum(),
    })
}

/// Writes the per-frame rows followed by the aggregate row.
pub fn write_csv(path: &std::path::Path, rows: &[FrameRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let agg = aggregate_rows(rows);
    for r in rows.iter().chain(agg.iter()) {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Human-readable summary line of an aggregate row.
pub fn summary_line(r: &FrameRow, frames: usize, skipped: usize) -> String {
    let opt = |v: Option<f64>, digits: usize| v.map_or("n/a".to_string(), |v| format!("{v:.digits$}"));
    format!(
        "frames {frames} (skipped {skipped}) EPE {:.4} px  Bad2 {:.2}%  Bad3 {:.2}%  Bad5 {:.2}%  depth MAE {} mm  SSIM {}  PSNR {} dB  LPIPS n/a",
        r.epe,
        r.bad2,
        r.bad3,
        r.bad5,
        opt(r.depth_mae, 3),
        opt(r.ssim, 4),
        opt(r.psnr, 2),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib(f: f64, b: f64) -> Calib {
        Calib { focal_px: f, baseline_mm: b }
    }

    #[test]
    fn perfect_prediction() {
        let gt = Tensor::from_fn(&[4, 5], |i| 1.0 + i as f64);
        let r = disparity_metrics(&gt, &gt, &[true; 20], &Calib::default()).unwrap();
        assert_eq!((r.epe_px, r.bad2_pct, r.bad3_pct, r.bad5_pct), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.depth_mae_mm, Some(0.0));
    }

    #[test]
    fn threshold_semantics_and_depth() {
        let gt = Tensor::new(&[1, 2], vec![12.5, 3.0]).unwrap();
        let pred = Tensor::new(&[1, 2], vec![10.0, 100.0]).unwrap();
        let r = disparity_metrics(&pred, &gt, &[true, false], &calib(1000.0, 5.0)).unwrap();
        assert_eq!(r.epe_px, 2.5);
        assert_eq!((r.bad2_pct, r.bad3_pct, r.bad5_pct), (100.0, 0.0, 0.0));
        assert!((r.depth_mae_mm.unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(r.valid_count, 1);
        assert!(disparity_metrics(&pred, &gt, &[false, false], &Calib::default()).is_err());
    }

    #[test]
    fn near_zero_disparity_excluded_from_depth() {
        let gt = Tensor::new(&[1, 2], vec![0.4, 8.0]).unwrap();
        let pred = Tensor::new(&[1, 2], vec![3.0, 8.0]).unwrap();
        let r = disparity_metrics(&pred, &gt, &[true, true], &Calib::default()).unwrap();
        assert_eq!(r.depth_mae_mm, Some(0.0));
        let r = disparity_metrics(&pred, &gt, &[true, false], &Calib::default()).unwrap();
        assert_eq!(r.depth_mae_mm, None);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = Tensor::from_fn(&[3, 16, 20], |i| ((i * 31) % 17) as f64 / 17.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let z = Tensor::zeros(&[12, 12]);
        let o = Tensor::ones(&[12, 12]);
        let s = ssim(&z, &o).unwrap();
        assert!((s - C1 / (1.0 + C1)).abs() < 1e-9 && s < 0.01);
        assert!(ssim(&Tensor::zeros(&[10, 30]), &Tensor::zeros(&[10, 30])).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::from_fn(&[3, 4, 4], |i| i as f64 / 48.0);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-10);
    }

    #[test]
    fn warp_identity_and_shift() {
        let left = Tensor::from_fn(&[3, 4, 9], |i| i as f64);
        let (same, valid) = warp_synthesize(&left, &Tensor::zeros(&[4, 9]), None).unwrap();
        assert_eq!(same, left);
        assert!(valid.iter().all(|&v| v));
        let (shifted, valid) = warp_synthesize(&left, &Tensor::full(&[4, 9], 3.0), None).unwrap();
        for y in 0..4 {
            for x in 0..9 {
                assert_eq!(valid[y * 9 + x], x + 3 < 9);
                if x + 3 < 9 {
                    assert_eq!(shifted.at(&[2, y, x]), left.at(&[2, y, x + 3]));
                }
            }
        }
        let (half, _) = warp_synthesize(&left, &Tensor::full(&[4, 9], 0.5), None).unwrap();
        assert_eq!(half.at(&[0, 1, 2]), 0.5 * (left.at(&[0, 1, 2]) + left.at(&[0, 1, 3])));
    }

    #[test]
    fn csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let gt = Tensor::ones(&[2, 2]);
        let r = disparity_metrics(&gt, &gt, &[true; 4], &Calib::default()).unwrap();
        write_csv(&p, &[FrameRow::new("f0", &r)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("frame,epe,bad2,bad3,bad5,depth_mae,ssim,psnr,valid_px"));
        assert!(lines.next().unwrap().starts_with("f0,0.0,0.0,0.0,0.0,0.0,,,4"));
        assert!(lines.next().unwrap().starts_with("mean,"));
    }
}
