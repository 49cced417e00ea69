//! Training objectives: the multi-scale smooth-L1 supervised loss and the
//! photometric + edge-aware smoothness pretraining loss.

use log::warn;

use crate::error::{Error, Result};
use crate::graph::{Graph, ResizeMode, Var};
use crate::tensor::{lit, Real, Tensor};

pub const NUM_SCALES: usize = 7;

/// SSIM stabilizers for unit-range images.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-scale weights of the supervised loss, one vector per training round.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SupervisedLossConfig {
    pub rounds: Vec<[f64; NUM_SCALES]>,
}

impl SupervisedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(Error::Config("loss.omega_rounds must not be empty".into()));
        }
        if self.rounds.iter().flatten().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("scale weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Weights for round `r`; rounds past the end reuse the last vector.
    pub fn omega(&self, round: usize) -> [f64; NUM_SCALES] {
        self.rounds[round.min(self.rounds.len() - 1)]
    }
}

impl Default for SupervisedLossConfig {
    /// Coarse scales dominate early rounds, the finest scale dominates late.
    fn default() -> Self {
        SupervisedLossConfig {
            rounds: vec![
                [0.25, 0.25, 0.5, 0.5, 1.0, 1.0, 1.0],
                [0.5, 0.5, 1.0, 1.0, 0.5, 0.5, 0.5],
                [1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.25],
                [1.0, 0.5, 0.25, 0.1, 0.05, 0.05, 0.05],
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnsupLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub num_scales: usize,
    /// Compare at input resolution (disparity upsampled) instead of at each
    /// scale against the downsampled left image.
    pub full_resolution: bool,
}

impl Default for UnsupLossConfig {
    fn default() -> Self {
        UnsupLossConfig {
            lambda1: 5.0,
            lambda2: 0.1,
            alpha: 0.85,
            num_scales: 4,
            full_resolution: false,
        }
    }
}

impl UnsupLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("loss.alpha {} not in [0, 1]", self.alpha)));
        }
        if self.num_scales == 0 || self.num_scales > NUM_SCALES {
            return Err(Error::Config(format!(
                "loss.num_scales {} must be in 1..={NUM_SCALES}",
                self.num_scales
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Scalar loss plus a flag raised when no pixel carried ground truth.
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub loss: Var,
    pub no_valid_pixels: bool,
}

/// Mean smooth-L1 over pixels where `valid` is 1. Invalid ground truth
/// values are never read.
pub fn smooth_l1<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>, valid: &Tensor<T>) -> Result<MaskedLoss> {
    let ps = g.shape(pred);
    if gt.shape() != ps || valid.shape() != ps {
        return Err(Error::shape(
            "smooth_l1",
            format!("pred {ps}, gt {}, valid {}", gt.shape(), valid.shape()),
        ));
    }
    let count = valid.data().iter().filter(|&&v| v > T::zero()).count();
    let clean = Tensor::from_vec(
        ps,
        gt.data()
            .iter()
            .zip(valid.data())
            .map(|(&d, &m)| if m > T::zero() { d } else { T::zero() })
            .collect(),
    )?;
    let gt_v = g.constant(clean)?;
    let mask_v = g.constant(valid.map(|m| if m > T::zero() { T::one() } else { T::zero() }))?;
    let diff = g.sub(pred, gt_v)?;
    let per_pixel = g.smooth_l1(diff)?;
    let masked = g.mul(per_pixel, mask_v)?;
    let total = g.sum(masked)?;
    if count == 0 {
        warn!("smooth_l1: no valid ground-truth pixels, loss defined as 0");
        let loss = g.mul_scalar(total, T::zero())?;
        return Ok(MaskedLoss {
            loss,
            no_valid_pixels: true,
        });
    }
    let loss = g.mul_scalar(total, T::one() / T::from_usize(count).unwrap())?;
    Ok(MaskedLoss {
        loss,
        no_valid_pixels: false,
    })
}

/// Valid-aware block average of a full-resolution disparity map down to
/// scale `s`, with values divided by `2^s`. A block is valid if any of its
/// pixels is.
pub fn downsample_ground_truth<T: Real>(gt: &Tensor<T>, valid: &Tensor<T>, s: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let sh = gt.shape();
    let f = 1usize << s;
    if !sh.height.is_multiple_of(f) || !sh.width.is_multiple_of(f) {
        return Err(Error::shape(
            "downsample_ground_truth",
            format!("{}x{} not divisible by {f}", sh.height, sh.width),
        ));
    }
    if valid.shape() != sh {
        return Err(Error::shape("downsample_ground_truth", "valid mask shape differs"));
    }
    if s == 0 {
        return Ok((gt.clone(), valid.clone()));
    }
    let out_shape = sh.with_spatial(sh.height / f, sh.width / f);
    let mut out = Tensor::zeros(out_shape);
    let mut out_valid = Tensor::zeros(out_shape);
    let scale = T::one() / T::from_usize(f).unwrap();
    for b in 0..sh.batch {
        for c in 0..sh.channels {
            for y in 0..out_shape.height {
                for x in 0..out_shape.width {
                    let mut acc = T::zero();
                    let mut n = 0usize;
                    for yy in y * f..(y + 1) * f {
                        for xx in x * f..(x + 1) * f {
                            if valid.at(b, c, yy, xx) > T::zero() {
                                acc += gt.at(b, c, yy, xx);
                                n += 1;
                            }
                        }
                    }
                    if n > 0 {
                        out.set(b, c, y, x, acc / T::from_usize(n).unwrap() * scale);
                        out_valid.set(b, c, y, x, T::one());
                    }
                }
            }
        }
    }
    Ok((out, out_valid))
}

/// `sum_s omega[s] * smooth_l1(pyramid[s], gt at scale s)`.
pub fn supervised_total<T: Real>(
    g: &mut Graph<T>,
    pyramid: &[Var],
    gt_full: &Tensor<T>,
    valid_full: &Tensor<T>,
    omega: &[f64; NUM_SCALES],
) -> Result<Var> {
    if pyramid.len() != NUM_SCALES {
        return Err(Error::InvalidArgument(format!(
            "supervised_total needs {NUM_SCALES} scales, got {}",
            pyramid.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (s, (&pred, &w)) in pyramid.iter().zip(omega).enumerate() {
        if w == 0.0 {
            continue;
        }
        let (gt, valid) = downsample_ground_truth(gt_full, valid_full, s)?;
        let l = smooth_l1(g, pred, &gt, &valid)?.loss;
        let weighted = g.mul_scalar(l, lit(w))?;
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.constant(Tensor::scalar(T::zero())),
    }
}

/// Per-pixel SSIM with 3x3 mean windows (reflection padded).
pub fn ssim<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::shape("ssim", format!("{sa} vs {sb}")));
    }
    for v in [a, b] {
        let t = g.value(v);
        if t.data().iter().any(|&x| x < -T::epsilon() || x > T::one() + T::epsilon()) {
            warn!("ssim: input outside [0, 1]");
            break;
        }
    }
    let mu_a = g.avg_pool3(a)?;
    let mu_b = g.avg_pool3(b)?;
    let aa = g.square(a)?;
    let bb = g.square(b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.avg_pool3(aa)?;
    let e_bb = g.avg_pool3(bb)?;
    let e_ab = g.avg_pool3(ab)?;
    let mu_a2 = g.square(mu_a)?;
    let mu_b2 = g.square(mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_a2)?;
    let var_b = g.sub(e_bb, mu_b2)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let two = lit::<T>(2.0);
    let n1 = g.mul_scalar(mu_ab, two)?;
    let n1 = g.add_scalar(n1, lit(SSIM_C1))?;
    let n2 = g.mul_scalar(cov, two)?;
    let n2 = g.add_scalar(n2, lit(SSIM_C2))?;
    let num = g.mul(n1, n2)?;
    let d1 = g.add(mu_a2, mu_b2)?;
    let d1 = g.add_scalar(d1, lit(SSIM_C1))?;
    let d2 = g.add(var_a, var_b)?;
    let d2 = g.add_scalar(d2, lit(SSIM_C2))?;
    let den = g.mul(d1, d2)?;
    g.div(num, den)
}

/// Repeated x2 bilinear halving; each halving equals 2x2 block averaging.
pub fn downsample_image<T: Real>(g: &mut Graph<T>, image: Var, s: usize) -> Result<Var> {
    let mut cur = image;
    for _ in 0..s {
        let sh = g.shape(cur);
        if !sh.height.is_multiple_of(2) || !sh.width.is_multiple_of(2) {
            return Err(Error::shape(
                "downsample_image",
                format!("cannot halve {}x{}", sh.height, sh.width),
            ));
        }
        cur = g.resize(cur, sh.height / 2, sh.width / 2, ResizeMode::Image)?;
    }
    Ok(cur)
}

/// `mean(alpha (1 - SSIM(warped, left)) / 2 + (1 - alpha) |warped - left|)`
/// where `warped` is the right image warped by the disparity.
pub fn photometric_error<T: Real>(g: &mut Graph<T>, left: Var, right: Var, disparity: Var, alpha: f64) -> Result<Var> {
    let warped = g.warp(right, disparity)?;
    let s = ssim(g, warped, left)?;
    let dssim = g.mul_scalar(s, lit(-0.5 * alpha))?;
    let dssim = g.add_scalar(dssim, lit(0.5 * alpha))?;
    let diff = g.sub(warped, left)?;
    let l1 = g.abs(diff)?;
    let l1 = g.mul_scalar(l1, lit(1.0 - alpha))?;
    let per_pixel = g.add(dssim, l1)?;
    g.mean(per_pixel)
}

/// Photometric reprojection loss of the scale-`s` disparity `disparity_s`
/// against full-resolution `left`/`right` images in `[0, 1]`.
pub fn photometric_loss<T: Real>(
    g: &mut Graph<T>,
    left: Var,
    right: Var,
    disparity_s: Var,
    scale_s: usize,
    cfg: &UnsupLossConfig,
) -> Result<Var> {
    if cfg.full_resolution {
        let s = g.shape(left);
        let d_full = g.resize(disparity_s, s.height, s.width, ResizeMode::Disparity)?;
        return photometric_error(g, left, right, d_full, cfg.alpha);
    }
    let l = downsample_image(g, left, scale_s)?;
    let r = downsample_image(g, right, scale_s)?;
    photometric_error(g, l, r, disparity_s, cfg.alpha)
}

/// Edge-aware smoothness of `disparity_s` guided by `left_s` (same size).
pub fn smoothness_loss<T: Real>(g: &mut Graph<T>, disparity_s: Var, left_s: Var) -> Result<Var> {
    let (sd, si) = (g.shape(disparity_s), g.shape(left_s));
    if sd.height != si.height || sd.width != si.width || sd.batch != si.batch {
        return Err(Error::shape("smoothness_loss", format!("disparity {sd} vs image {si}")));
    }
    let mut total: Option<Var> = None;
    for axis in 0..2 {
        let extent = if axis == 0 { sd.width } else { sd.height };
        if extent < 2 {
            continue;
        }
        let diff = |g: &mut Graph<T>, v: Var| if axis == 0 { g.diff_x(v) } else { g.diff_y(v) };
        let dd = diff(g, disparity_s)?;
        let dd = g.abs(dd)?;
        let di = diff(g, left_s)?;
        let di = g.abs(di)?;
        let di = g.mean_channels(di)?;
        let di = g.neg(di)?;
        let weight = g.exp(di)?;
        let term = g.mul(dd, weight)?;
        let term = g.mean(term)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.constant(Tensor::scalar(T::zero())),
    }
}

/// Loss value with its per-scale photometric and smoothness parts.
#[derive(Clone, Debug)]
pub struct UnsupervisedLoss {
    pub total: Var,
    pub photometric: Vec<Var>,
    pub smoothness: Vec<Var>,
}

/// `sum_{s < num_scales} lambda1 * L_pe^s + lambda2 * L_sm^s`.
pub fn unsupervised_total<T: Real>(
    g: &mut Graph<T>,
    pyramid: &[Var],
    left: Var,
    right: Var,
    cfg: &UnsupLossConfig,
) -> Result<UnsupervisedLoss> {
    cfg.validate()?;
    if pyramid.len() < cfg.num_scales {
        return Err(Error::InvalidArgument(format!(
            "pyramid has {} scales, loss needs {}",
            pyramid.len(),
            cfg.num_scales
        )));
    }
    let mut photometric = Vec::new();
    let mut smoothness = Vec::new();
    let mut total: Option<Var> = None;
    let mut left_s = left;
    for (s, &d) in pyramid.iter().take(cfg.num_scales).enumerate() {
        if s > 0 {
            left_s = downsample_image(g, left_s, 1)?;
        }
        let pe = photometric_loss(g, left, right, d, s, cfg)?;
        let sm = smoothness_loss(g, d, left_s)?;
        let a = g.mul_scalar(pe, lit(cfg.lambda1))?;
        let b = g.mul_scalar(sm, lit(cfg.lambda2))?;
        let ls = g.add(a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, ls)?,
            None => ls,
        });
        photometric.push(pe);
        smoothness.push(sm);
    }
    Ok(UnsupervisedLoss {
        total: total.expect("num_scales >= 1"),
        photometric,
        smoothness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn smooth_l1_fixed_points() {
        let mut g = Graph::<f64>::new();
        let ones = Tensor::ones([1, 1, 1, 1]);
        for (err, expect) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
            let p = g.constant(Tensor::scalar(err)).unwrap();
            let l = smooth_l1(&mut g, p, &Tensor::zeros([1, 1, 1, 1]), &ones).unwrap();
            assert!((scalar(&g, l.loss) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_l1_is_c1_at_one() {
        let mut g = Graph::<f64>::new();
        let mut vals = vec![];
        for x in [1.0 - 1e-9, 1.0, 1.0 + 1e-9] {
            let p = g.param(Tensor::scalar(x)).unwrap();
            vals.push((p, g.smooth_l1(p).unwrap()));
        }
        for &(_, y) in &vals {
            assert!((scalar(&g, y) - 0.5).abs() < 1e-8);
        }
        let parts: Vec<Var> = vals.iter().map(|v| v.1).collect();
        let cat = g.concat_channels(&parts).unwrap();
        let loss = g.sum(cat).unwrap();
        g.backward(loss).unwrap();
        for &(p, _) in &vals {
            assert!((g.grad(p).unwrap().item() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn smooth_l1_without_valid_pixels_is_zero_and_flagged() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full([1, 1, 2, 2], 3.0)).unwrap();
        let l = smooth_l1(&mut g, p, &Tensor::full([1, 1, 2, 2], f64::NAN), &Tensor::zeros([1, 1, 2, 2])).unwrap();
        assert!(l.no_valid_pixels);
        assert_eq!(scalar(&g, l.loss), 0.0);
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut g = Graph::<f64>::new();
        let img = Tensor::from_fn([1, 3, 5, 6], |_, c, y, x| ((c * 7 + y * 3 + x) % 5) as f64 / 5.0);
        let a = g.constant(img).unwrap();
        let s = ssim(&mut g, a, a).unwrap();
        assert!(g.value(s).data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_penalizes_offset() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full([1, 1, 4, 4], 0.5)).unwrap();
        let b = g.constant(Tensor::full([1, 1, 4, 4], 1.5)).unwrap();
        let s = ssim(&mut g, a, b).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn smoothness_behaviour() {
        let mut g = Graph::<f64>::new();
        let flat = g.constant(Tensor::full([1, 3, 4, 8], 0.5)).unwrap();
        let cst = g.constant(Tensor::full([1, 1, 4, 8], 3.0)).unwrap();
        let l0 = smoothness_loss(&mut g, cst, flat).unwrap();
        assert_eq!(scalar(&g, l0), 0.0);

        let step = g.constant(Tensor::from_fn([1, 1, 4, 8], |_, _, _, x| if x < 4 { 1.0 } else { 5.0 })).unwrap();
        let on_flat = smoothness_loss(&mut g, step, flat).unwrap();
        let edge_img = g
            .constant(Tensor::from_fn([1, 3, 4, 8], |_, _, _, x| if x < 4 { 0.0 } else { 1.0 }))
            .unwrap();
        let on_edge = smoothness_loss(&mut g, step, edge_img).unwrap();
        assert!(scalar(&g, on_flat) > 0.0);
        assert!(scalar(&g, on_edge) < scalar(&g, on_flat));
    }

    #[test]
    fn ground_truth_downsampling_ignores_invalid() {
        let gt = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![4.0, 8.0, 1e9, 6.0]).unwrap();
        let valid = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let (d, v) = downsample_ground_truth(&gt, &valid, 1).unwrap();
        assert!((d.item() - 3.0).abs() < 1e-12);
        assert_eq!(v.item(), 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = UnsupLossConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = UnsupLossConfig {
            num_scales: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SupervisedLossConfig { rounds: vec![] }.validate().is_err());
        let mut neg = SupervisedLossConfig::default();
        neg.rounds[0][3] = -1.0;
        assert!(neg.validate().is_err());
    }
}
