//! Stereo matching kernels: correlation cost volumes, horizontal disparity
//! warping, the feature matching module (FMM) and its occlusion-aware
//! variant (Mask-FMM).
//!
//! Disparity sign convention: a positive disparity `d` at left pixel `x`
//! means the corresponding right-view pixel sits at `x - d`. Correlation and
//! warping both use this convention, so a warp by the true disparity aligns
//! the right view with the left one.

use crate::error::{Error, Result};
use crate::graph::{Graph, ResizeMode, Var};
use crate::tensor::{lit, Real, Tensor};

/// Integer candidates `lo..=hi`.
pub fn offset_range(lo: i32, hi: i32) -> Vec<i32> {
    (lo..=hi).collect()
}

/// Residual search range used by the matching modules.
pub fn fmm_offsets() -> Vec<i32> {
    offset_range(-2, 2)
}

/// Matching scores over disparity candidates, `(B, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub scores: Var,
    pub offsets: Vec<i32>,
}

/// Soft occlusion mask in `[0, 1]`, `(B, 1, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionMask {
    pub theta: Var,
}

/// Feature substituted where the mask suppresses the warped view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffFeature {
    pub mu: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub focal_length_px: f64,
    pub baseline_m: f64,
}

impl CameraRig {
    pub fn new(focal_length_px: f64, baseline_m: f64) -> Result<Self> {
        if !(focal_length_px > 0.0 && focal_length_px.is_finite()) || !(baseline_m > 0.0 && baseline_m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "camera rig needs positive focal length and baseline, got f={focal_length_px}, b={baseline_m}"
            )));
        }
        Ok(CameraRig {
            focal_length_px,
            baseline_m,
        })
    }
}

/// `scores[b,i,y,x] = (1/C) sum_c f_l[b,c,y,x] * f_r[b,c,y,x - offsets[i]]`,
/// zero where the right sample falls outside the image.
pub fn correlate<T: Real>(g: &mut Graph<T>, f_l: Var, f_r: Var, offsets: &[i32]) -> Result<CostVolume> {
    let scores = g.correlate(f_l, f_r, offsets)?;
    Ok(CostVolume {
        scores,
        offsets: offsets.to_vec(),
    })
}

/// Right-view features resampled at `x - disparity(x, y)`.
pub fn warp_by_disparity<T: Real>(g: &mut Graph<T>, f_r: Var, disparity: Var) -> Result<Var> {
    g.warp(f_r, disparity)
}

/// Bilinear upsampling of a disparity map to `(h, w)`, rescaling values to
/// target-resolution pixels.
pub fn upsample_disparity<T: Real>(g: &mut Graph<T>, disparity: Var, h: usize, w: usize) -> Result<Var> {
    g.resize(disparity, h, w, ResizeMode::Disparity)
}

fn check_half_size<T: Real>(g: &Graph<T>, fine: Var, coarse: Var, op: &'static str) -> Result<()> {
    let f = g.shape(fine);
    let c = g.shape(coarse);
    if c.batch != f.batch || c.height * 2 != f.height || c.width * 2 != f.width {
        return Err(Error::shape(
            op,
            format!("coarse tensor {c} must be half the spatial size of {f}"),
        ));
    }
    Ok(())
}

/// Feature matching module: upsample the coarse disparity x2, warp the
/// right features by it, correlate with the left over a residual range.
pub fn fmm<T: Real>(g: &mut Graph<T>, f_l: Var, f_r: Var, d_coarse: Var, offsets: &[i32]) -> Result<CostVolume> {
    check_half_size(g, f_l, d_coarse, "fmm")?;
    if g.shape(d_coarse).channels != 1 {
        return Err(Error::shape("fmm", "coarse disparity must have one channel"));
    }
    let s = g.shape(f_l);
    let d_up = upsample_disparity(g, d_coarse, s.height, s.width)?;
    let warped = warp_by_disparity(g, f_r, d_up)?;
    correlate(g, f_l, warped, offsets)
}

/// A convolution's weight and bias handles.
#[derive(Clone, Copy, Debug)]
pub struct ConvWeights {
    pub weight: Var,
    pub bias: Var,
    pub padding: usize,
}

impl ConvWeights {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, Some(self.bias), 1, self.padding)
    }
}

/// Learned pieces of one Mask-FMM instance.
#[derive(Clone, Copy, Debug)]
pub struct MaskFmmWeights {
    /// 1x1 channel transform applied (shared) to both upsampled scale-2
    /// feature maps. Absent at scale 2.
    pub transform: Option<ConvWeights>,
    /// Context -> one-channel mask logits.
    pub theta: ConvWeights,
    /// Context -> trade-off feature.
    pub mu: ConvWeights,
}

/// Forces the mask and trade-off term to constants (diagnostics).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForcedMask {
    pub theta: f64,
    pub mu: f64,
}

#[derive(Clone, Debug)]
pub struct MaskFmmOutput {
    pub cost: CostVolume,
    pub mask: OcclusionMask,
    pub tradeoff: TradeoffFeature,
    pub modulated: Var,
    /// Left/right features after the scale transform.
    pub left: Var,
    pub right: Var,
}

/// Occlusion-aware matching module at `scale_s` in `{0, 1, 2}`.
///
/// `f_l_2`/`f_r_2` are the scale-2 features, `d_coarse` the scale-(s+1)
/// disparity and `ctx_coarse` the decoder feature at scale s+1. The warped
/// right feature is modulated as `warped * theta + mu` before correlation.
#[allow(clippy::too_many_arguments)]
pub fn mask_fmm<T: Real>(
    g: &mut Graph<T>,
    f_l_2: Var,
    f_r_2: Var,
    d_coarse: Var,
    ctx_coarse: Var,
    scale_s: usize,
    weights: &MaskFmmWeights,
    offsets: &[i32],
    forced: Option<ForcedMask>,
) -> Result<MaskFmmOutput> {
    if scale_s > 2 {
        return Err(Error::InvalidArgument(format!(
            "mask_fmm scale must be 0, 1 or 2, got {scale_s}"
        )));
    }
    let s2 = g.shape(f_l_2);
    if g.shape(f_r_2) != s2 {
        return Err(Error::shape(
            "mask_fmm",
            format!("left {s2} vs right {}", g.shape(f_r_2)),
        ));
    }
    let up = 1usize << (2 - scale_s);
    let (h, w) = (s2.height * up, s2.width * up);
    let (left, right) = match (scale_s, &weights.transform) {
        (2, _) => (f_l_2, f_r_2),
        (_, Some(t)) => {
            let lu = g.resize(f_l_2, h, w, ResizeMode::Image)?;
            let ru = g.resize(f_r_2, h, w, ResizeMode::Image)?;
            (t.apply(g, lu)?, t.apply(g, ru)?)
        }
        (_, None) => {
            return Err(Error::InvalidArgument(format!(
                "mask_fmm at scale {scale_s} needs a channel transform"
            )))
        }
    };
    check_half_size(g, left, d_coarse, "mask_fmm")?;
    check_half_size(g, left, ctx_coarse, "mask_fmm")?;
    let d_up = upsample_disparity(g, d_coarse, h, w)?;
    let warped = warp_by_disparity(g, right, d_up)?;
    let ws = g.shape(warped);
    let (theta, mu) = match forced {
        Some(f) => (
            g.constant(Tensor::full(ws.with_channels(1), lit::<T>(f.theta)))?,
            g.constant(Tensor::full(ws, lit::<T>(f.mu)))?,
        ),
        None => {
            let logits = weights.theta.apply(g, ctx_coarse)?;
            let theta_c = g.sigmoid(logits)?;
            let mu_c = weights.mu.apply(g, ctx_coarse)?;
            if g.shape(mu_c).channels != ws.channels {
                return Err(Error::shape(
                    "mask_fmm",
                    format!(
                        "trade-off head yields {} channels, warped feature has {}",
                        g.shape(mu_c).channels,
                        ws.channels
                    ),
                ));
            }
            (
                g.resize(theta_c, h, w, ResizeMode::Image)?,
                g.resize(mu_c, h, w, ResizeMode::Image)?,
            )
        }
    };
    let masked = g.mul(warped, theta)?;
    let modulated = g.add(masked, mu)?;
    let cost = correlate(g, left, modulated, offsets)?;
    Ok(MaskFmmOutput {
        cost,
        mask: OcclusionMask { theta },
        tradeoff: TradeoffFeature { mu },
        modulated,
        left,
        right,
    })
}

/// Depth value marking pixels whose disparity is too small to invert.
pub const INVALID_DEPTH: f64 = 0.0;

/// Minimum disparity (pixels) considered invertible.
pub const MIN_DISPARITY: f64 = 1e-3;

/// `z = f * b / d`; disparities at or below [`MIN_DISPARITY`] map to
/// [`INVALID_DEPTH`].
pub fn disparity_to_depth<T: Real>(disparity: &Tensor<T>, rig: CameraRig) -> Tensor<T> {
    let fb = rig.focal_length_px * rig.baseline_m;
    disparity.map(|d| {
        let d = d.to_f64().unwrap_or(0.0);
        if d <= MIN_DISPARITY {
            lit(INVALID_DEPTH)
        } else {
            lit(fb / d)
        }
    })
}

/// Inverse of [`disparity_to_depth`] on valid pixels; invalid depths map to 0.
pub fn depth_to_disparity<T: Real>(depth: &Tensor<T>, rig: CameraRig) -> Tensor<T> {
    let fb = rig.focal_length_px * rig.baseline_m;
    depth.map(|z| {
        let z = z.to_f64().unwrap_or(0.0);
        if z <= 0.0 {
            T::zero()
        } else {
            lit(fb / z)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_correlation_of_ones_is_one() {
        let mut g = Graph::<f32>::new();
        let f = g.constant(Tensor::ones([1, 4, 3, 5])).unwrap();
        let cv = correlate(&mut g, f, f, &[0]).unwrap();
        assert!(g.value(cv.scores).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn correlate_rejects_bad_inputs() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones([1, 4, 3, 5])).unwrap();
        let b = g.constant(Tensor::ones([1, 4, 3, 4])).unwrap();
        assert!(correlate(&mut g, a, b, &[0]).is_err());
        assert!(correlate(&mut g, a, a, &[]).is_err());
    }

    #[test]
    fn depth_from_disparity() {
        let rig = CameraRig::new(720.0, 0.54).unwrap();
        let d = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![38.88, 0.0]).unwrap();
        let z = disparity_to_depth(&d, rig);
        assert!((z.data()[0] - 10.0).abs() < 1e-9);
        assert_eq!(z.data()[1], INVALID_DEPTH);
        assert!(CameraRig::new(0.0, 1.0).is_err());
        assert!(CameraRig::new(1.0, -1.0).is_err());
    }

    #[test]
    fn mask_fmm_rejects_scale() {
        let mut g = Graph::<f32>::new();
        let f = g.constant(Tensor::ones([1, 2, 4, 4])).unwrap();
        let d = g.constant(Tensor::zeros([1, 1, 2, 2])).unwrap();
        let w = g.constant(Tensor::zeros([1, 2, 3, 3])).unwrap();
        let b = g.constant(Tensor::zeros([1, 1, 1, 1])).unwrap();
        let cw = ConvWeights {
            weight: w,
            bias: b,
            padding: 1,
        };
        let weights = MaskFmmWeights {
            transform: None,
            theta: cw,
            mu: cw,
        };
        assert!(mask_fmm(&mut g, f, f, d, d, 3, &weights, &fmm_offsets(), None).is_err());
    }
}
