//! Disparity error metrics and diagnostic image exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outlier rule for the D1 rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum D1Rule {
    /// `|err| >= 3 px` or `|err| / gt >= 5%`.
    #[default]
    PaperOr,
    /// `|err| > 3 px` and `|err| / gt > 5%` (KITTI benchmark).
    KittiAnd,
}

pub const D1_ABS_PX: f64 = 3.0;
pub const D1_REL: f64 = 0.05;

impl D1Rule {
    pub fn is_outlier(self, pred: f64, gt: f64) -> bool {
        let err = (pred - gt).abs();
        let rel = if gt > 0.0 {
            err / gt
        } else if err > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        match self {
            D1Rule::PaperOr => err >= D1_ABS_PX || rel >= D1_REL,
            D1Rule::KittiAnd => err > D1_ABS_PX && rel > D1_REL,
        }
    }
}

fn check(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: &Tensor<f32>) -> Result<usize> {
    if pred.shape() != gt.shape() || valid.shape() != gt.shape() {
        return Err(Error::InvalidArgument(format!(
            "metric shapes differ: pred {}, gt {}, valid {}",
            pred.shape(),
            gt.shape(),
            valid.shape()
        )));
    }
    let n = valid.data().iter().filter(|&&m| m > 0.0).count();
    if n == 0 {
        return Err(Error::Data("no valid ground-truth pixels".into()));
    }
    Ok(n)
}

fn valid_pairs<'a>(
    pred: &'a Tensor<f32>,
    gt: &'a Tensor<f32>,
    valid: &'a Tensor<f32>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data()
        .iter()
        .zip(gt.data())
        .zip(valid.data())
        .filter(|(_, &m)| m > 0.0)
        .map(|((&p, &g), _)| (p as f64, g as f64))
}

/// Mean absolute error over valid pixels.
pub fn epe(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: &Tensor<f32>) -> Result<f64> {
    let n = check(pred, gt, valid)?;
    Ok(valid_pairs(pred, gt, valid).map(|(p, g)| (p - g).abs()).sum::<f64>() / n as f64)
}

/// Fraction of valid pixels that are outliers under `rule`.
pub fn d1_rate(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: &Tensor<f32>, rule: D1Rule) -> Result<f64> {
    let n = check(pred, gt, valid)?;
    let outliers = valid_pairs(pred, gt, valid).filter(|&(p, g)| rule.is_outlier(p, g)).count();
    Ok(outliers as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub epe: f64,
    pub d1_paper_or: f64,
    pub d1_kitti_and: f64,
    pub pixel_count: usize,
}

impl ImageMetrics {
    pub fn compute(name: impl Into<String>, pred: &Tensor<f32>, gt: &Tensor<f32>, valid: &Tensor<f32>) -> Result<Self> {
        Ok(ImageMetrics {
            name: name.into(),
            epe: epe(pred, gt, valid)?,
            d1_paper_or: d1_rate(pred, gt, valid, D1Rule::PaperOr)?,
            d1_kitti_and: d1_rate(pred, gt, valid, D1Rule::KittiAnd)?,
            pixel_count: check(pred, gt, valid)?,
        })
    }
}

/// Pixel-weighted aggregate over images. `d1_all` uses the default `or` rule;
/// the KITTI rule is reported alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub epe: f64,
    pub d1_all: f64,
    pub d1_kitti_and: f64,
    pub pixel_count: usize,
    pub per_image: Vec<ImageMetrics>,
}

impl EvalReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Result<Self> {
        let n: usize = per_image.iter().map(|m| m.pixel_count).sum();
        if n == 0 {
            return Err(Error::Data("evaluation set has no valid pixels".into()));
        }
        let weighted = |f: fn(&ImageMetrics) -> f64| {
            per_image.iter().map(|m| f(m) * m.pixel_count as f64).sum::<f64>() / n as f64
        };
        Ok(EvalReport {
            epe: weighted(|m| m.epe),
            d1_all: weighted(|m| m.d1_paper_or),
            d1_kitti_and: weighted(|m| m.d1_kitti_and),
            pixel_count: n,
            per_image,
        })
    }

    pub const CSV_HEADER: &'static str = "name,epe,d1_paper_or,d1_kitti_and,pixel_count";

    /// One row per image followed by an `ALL` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for m in &self.per_image {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{}",
                m.name, m.epe, m.d1_paper_or, m.d1_kitti_and, m.pixel_count
            );
        }
        let _ = writeln!(
            out,
            "ALL,{:.6},{:.6},{:.6},{}",
            self.epe, self.d1_all, self.d1_kitti_and, self.pixel_count
        );
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "images: {}\nvalid pixels: {}\nEPE: {:.4} px\nD1-all (>=3px or >=5%): {:.4}%\nD1-all (>3px and >5%, KITTI): {:.4}%",
            self.per_image.len(),
            self.pixel_count,
            self.epe,
            100.0 * self.d1_all,
            100.0 * self.d1_kitti_and
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExportOptions {
    /// Disparity mapped to white; `None` uses the largest value present.
    pub max_disparity: Option<f32>,
    /// Error at which the error map saturates.
    pub max_error: f32,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            max_disparity: None,
            max_error: 5.0,
        }
    }
}

fn gray_png(path: &Path, map: &Tensor<f32>, f: impl Fn(usize, f32) -> f32) -> Result<()> {
    let s = map.shape();
    let data = map.data();
    let buf = ImageBuffer::<Luma<u8>, _>::from_fn(s.width as u32, s.height as u32, |x, y| {
        let i = y as usize * s.width + x as usize;
        Luma([to_u8(f(i, data[i]))])
    });
    buf.save(path)?;
    Ok(())
}

fn color_png(path: &Path, map: &Tensor<f32>, f: impl Fn(usize, f32) -> f32) -> Result<()> {
    let s = map.shape();
    let data = map.data();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(s.width as u32, s.height as u32, |x, y| {
        let i = y as usize * s.width + x as usize;
        Rgb(colormap(f(i, data[i])))
    });
    buf.save(path)?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Piecewise-linear blue -> cyan -> yellow -> red ramp on `[0, 1]`.
pub fn colormap(v: f32) -> [u8; 3] {
    const STOPS: [(f32, [f32; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.3, 1.0]),
        (0.5, [0.0, 1.0, 1.0]),
        (0.75, [1.0, 1.0, 0.0]),
        (1.0, [1.0, 0.0, 0.0]),
    ];
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let i = STOPS.iter().rposition(|(t, _)| *t <= v).unwrap_or(0).min(STOPS.len() - 2);
    let ((t0, c0), (t1, c1)) = (STOPS[i], STOPS[i + 1]);
    let a = (v - t0) / (t1 - t0);
    [0, 1, 2].map(|k| to_u8(c0[k] + a * (c1[k] - c0[k])))
}

fn check_map(what: &str, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.batch != 1 || s.channels != 1 {
        return Err(Error::InvalidArgument(format!("{what} must be (1,1,H,W), got {s}")));
    }
    Ok(())
}

/// Writes `<name>_disp.png`, `<name>_disp_color.png` and, with ground truth,
/// `<name>_error.png` / `<name>_error_color.png`, plus one
/// `<name>_mask_s<s>.png` per occlusion mask (`masks[i]` at scale `2 - i`).
/// Returns the written paths in that order.
pub fn export_artifacts(
    out_dir: &Path,
    name: &str,
    pred: &Tensor<f32>,
    gt: Option<(&Tensor<f32>, &Tensor<f32>)>,
    masks: &[Tensor<f32>],
    opts: &ExportOptions,
) -> Result<Vec<PathBuf>> {
    check_map("prediction", pred)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let max_d = opts
        .max_disparity
        .unwrap_or_else(|| {
            let gt_max = gt.map_or(0.0, |(g, _)| g.data().iter().fold(0.0f32, |a, &b| a.max(b)));
            pred.data().iter().fold(gt_max, |a, &b| a.max(b))
        })
        .max(f32::MIN_POSITIVE);
    let p = out_dir.join(format!("{name}_disp.png"));
    gray_png(&p, pred, |_, d| d / max_d)?;
    written.push(p);
    let p = out_dir.join(format!("{name}_disp_color.png"));
    color_png(&p, pred, |_, d| d / max_d)?;
    written.push(p);
    if let Some((g, valid)) = gt {
        if g.shape() != pred.shape() || valid.shape() != pred.shape() {
            return Err(Error::InvalidArgument("ground truth shape differs from prediction".into()));
        }
        let max_e = opts.max_error.max(f32::MIN_POSITIVE);
        let (gd, vd) = (g.data(), valid.data());
        let err = |i: usize, d: f32| if vd[i] > 0.0 { (d - gd[i]).abs() / max_e } else { 0.0 };
        let p = out_dir.join(format!("{name}_error.png"));
        gray_png(&p, pred, err)?;
        written.push(p);
        let p = out_dir.join(format!("{name}_error_color.png"));
        color_png(&p, pred, err)?;
        written.push(p);
    }
    for (i, m) in masks.iter().enumerate() {
        check_map("occlusion mask", m)?;
        let p = out_dir.join(format!("{name}_mask_s{}.png", 2usize.saturating_sub(i)));
        gray_png(&p, m, |_, v| v)?;
        written.push(p);
    }
    Ok(written)
}
