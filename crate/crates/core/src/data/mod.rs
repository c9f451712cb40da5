//! Stereo samples: file formats, the synthetic stereogram generator and
//! training-time augmentation.

pub mod formats;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{render_right, synth_stereogram, SynthParams};

/// Focal length and baseline, enough to turn disparity into depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calib {
    pub focal_px: f64,
    pub baseline_mm: f64,
}

impl Default for Calib {
    fn default() -> Self {
        Self {
            focal_px: 320.0,
            baseline_mm: 5.0,
        }
    }
}

/// A rectified pair with ground truth. Images are `[3, H, W]`; the disparity
/// map is `[H, W]` and `valid_mask` is row-major `H·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Tensor,
    pub right: Tensor,
    pub gt_disparity: Tensor,
    pub valid_mask: Vec<bool>,
    pub calib: Calib,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.gt_disparity.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.gt_disparity.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.gt_disparity.shape();
        if s.len() != 2 {
            return Err(Error::invalid(format!("disparity must be [H, W], got {s:?}")));
        }
        let img = [3, s[0], s[1]];
        if self.left.shape() != img || self.right.shape() != img {
            return Err(Error::shape("stereo sample", self.left.shape(), self.right.shape()));
        }
        if self.valid_mask.len() != s[0] * s[1] {
            return Err(Error::invalid("valid mask size differs from the disparity map"));
        }
        let bad = self
            .gt_disparity
            .data()
            .iter()
            .zip(&self.valid_mask)
            .any(|(&d, &m)| m && !(d >= 0.0));
        if bad {
            return Err(Error::invalid("negative or non-finite disparity under the valid mask"));
        }
        Ok(())
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_mask.iter().filter(|&&m| m).count() as f64 / self.valid_mask.len() as f64
    }
}

/// Per-channel image statistics used for normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Statistics over both views of every sample.
    pub fn measure(samples: &[StereoSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot measure statistics of an empty dataset"));
        }
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        for s in samples {
            for img in [&s.left, &s.right] {
                let plane = img.numel() / 3;
                for c in 0..3 {
                    for &v in &img.data()[c * plane..(c + 1) * plane] {
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
                n += plane;
            }
        }
        let mut out = Self::identity();
        for c in 0..3 {
            out.mean[c] = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - out.mean[c] * out.mean[c]).max(0.0);
            out.std[c] = var.sqrt().max(1e-6);
        }
        Ok(out)
    }

    pub fn normalize(&self, img: &Tensor) -> Tensor {
        let plane = img.numel() / 3;
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

fn crop_chw(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let lead = t.numel() / (h * w);
    let mut data = Vec::with_capacity(lead * ch * cw);
    for c in 0..lead {
        for y in y0..y0 + ch {
            let row = (c * h + y) * w;
            data.extend_from_slice(&t.data()[row + x0..row + x0 + cw]);
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = ch;
    shape[n - 1] = cw;
    Tensor::new(&shape, data).expect("crop stays in bounds")
}

/// Identical random crop of all four maps followed by per-channel
/// normalization. Disparity values are left untouched.
pub fn augment(sample: &StereoSample, crop_hw: (usize, usize), stats: &ChannelStats, rng: &mut impl Rng) -> Result<StereoSample> {
    sample.validate()?;
    let (ch, cw) = crop_hw;
    let (h, w) = (sample.height(), sample.width());
    if ch == 0 || cw == 0 || ch % 16 != 0 || cw % 16 != 0 {
        return Err(Error::invalid(format!("crop {ch}x{cw} must be positive multiples of 16")));
    }
    if ch > h || cw > w {
        return Err(Error::invalid(format!("crop {ch}x{cw} larger than image {h}x{w}")));
    }
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let mask: Vec<bool> = (y0..y0 + ch)
        .flat_map(|y| sample.valid_mask[y * w + x0..y * w + x0 + cw].iter().copied())
        .collect();
    Ok(StereoSample {
        left: stats.normalize(&crop_chw(&sample.left, y0, x0, ch, cw)),
        right: stats.normalize(&crop_chw(&sample.right, y0, x0, ch, cw)),
        gt_disparity: crop_chw(&sample.gt_disparity, y0, x0, ch, cw),
        valid_mask: mask,
        calib: sample.calib,
    })
}

fn stem_path(dir: &Path, stem: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{stem}.{suffix}"))
}

/// Writes `stem.left.ppm`, `stem.right.ppm`, `stem.disp.pfm`, `stem.mask.pgm`.
pub fn save_sample(dir: &Path, stem: &str, s: &StereoSample) -> Result<()> {
    s.validate()?;
    formats::write_ppm(stem_path(dir, stem, "left.ppm"), &s.left)?;
    formats::write_ppm(stem_path(dir, stem, "right.ppm"), &s.right)?;
    formats::write_pfm(stem_path(dir, stem, "disp.pfm"), &s.gt_disparity)?;
    formats::write_mask(stem_path(dir, stem, "mask.pgm"), &s.valid_mask, s.height(), s.width())
}

/// Reads one sample. A missing mask means every finite disparity is valid;
/// non-finite disparities are always masked out.
pub fn load_sample(dir: &Path, stem: &str, calib: Calib) -> Result<StereoSample> {
    let left = formats::read_ppm(stem_path(dir, stem, "left.ppm"))?;
    let right = formats::read_ppm(stem_path(dir, stem, "right.ppm"))?;
    let gt = formats::read_pfm(stem_path(dir, stem, "disp.pfm"))?;
    let mask_path = stem_path(dir, stem, "mask.pgm");
    let mut mask = if mask_path.exists() {
        let (h, w, m) = formats::read_mask(&mask_path)?;
        if [h, w] != gt.shape() {
            return Err(Error::shape("mask vs disparity", &[h, w], gt.shape()));
        }
        m
    } else {
        vec![true; gt.numel()]
    };
    for (m, d) in mask.iter_mut().zip(gt.data()) {
        *m &= d.is_finite() && *d >= 0.0;
    }
    let s = StereoSample {
        left,
        right,
        gt_disparity: gt,
        valid_mask: mask,
        calib,
    };
    s.validate()?;
    Ok(s)
}

/// Sorted stems of every `*.left.ppm` in `dir`.
pub fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        if let Some(stem) = name.to_string_lossy().strip_suffix(".left.ppm") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Calibration stored next to a dataset, or the default when absent.
pub fn load_calib(dir: &Path) -> Result<Calib> {
    let p = dir.join("calib.json");
    if !p.exists() {
        return Ok(Calib::default());
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_calib(dir: &Path, calib: &Calib) -> Result<()> {
    let p = dir.join("calib.json");
    std::fs::write(&p, serde_json::to_string_pretty(calib)?).map_err(|e| Error::io(&p, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(String, StereoSample)>> {
    let calib = load_calib(dir)?;
    list_stems(dir)?
        .into_iter()
        .map(|stem| {
            let s = load_sample(dir, &stem, calib)?;
            Ok((stem, s))
        })
        .collect()
}
