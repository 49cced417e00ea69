//! Stereo samples, file formats, normalization, cropping and the synthetic
//! scene generator.

pub mod dataset;
pub mod image_io;
pub mod pfm;
pub mod synth;

pub use dataset::{load_dataset, write_dataset, Dataset, DatasetId};
pub use image_io::{read_image, read_kitti_disparity, write_image, write_kitti_disparity};
pub use pfm::{read_pfm, write_pfm};
pub use synth::{synth_generate, DisparityStyle, OccludedBand, SynthSpec};

use rand::Rng;

use crate::error::{Error, Result};
use crate::matching::CameraRig;
use crate::tensor::{Real, Shape, Tensor};

/// ImageNet channel means.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// ImageNet channel standard deviations.
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// A rectified pair with optional ground truth. Images are `(1, 3, H, W)`
/// with values in `[0, 1]`; disparity and mask are `(1, 1, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub gt_disparity: Option<Tensor<f32>>,
    pub valid_mask: Option<Tensor<f32>>,
    pub rig: Option<CameraRig>,
    pub source_tag: String,
    /// Known occluded regions (synthetic scenes only).
    pub occluded: Vec<OccludedBand>,
}

impl StereoSample {
    pub fn new(left: Tensor<f32>, right: Tensor<f32>, source_tag: impl Into<String>) -> Result<Self> {
        let s = StereoSample {
            left,
            right,
            gt_disparity: None,
            valid_mask: None,
            rig: None,
            source_tag: source_tag.into(),
            occluded: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Attaches ground truth; the mask defaults to `gt > 0` when absent.
    pub fn with_ground_truth(mut self, gt: Tensor<f32>, valid: Option<Tensor<f32>>) -> Result<Self> {
        let valid = valid.unwrap_or_else(|| gt.map(|d| if d > 0.0 { 1.0 } else { 0.0 }));
        self.gt_disparity = Some(gt);
        self.valid_mask = Some(valid);
        self.validate()?;
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.left.shape().height
    }

    pub fn width(&self) -> usize {
        self.left.shape().width
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.left.shape();
        if s.batch != 1 || s.channels != 3 {
            return Err(Error::Data(format!("{}: images must be (1,3,H,W), got {s}", self.source_tag)));
        }
        if self.right.shape() != s {
            return Err(Error::Data(format!(
                "{}: left {s} and right {} differ",
                self.source_tag,
                self.right.shape()
            )));
        }
        let want = s.with_channels(1);
        for (what, t) in [("disparity", &self.gt_disparity), ("valid mask", &self.valid_mask)] {
            if let Some(t) = t {
                if t.shape() != want {
                    return Err(Error::Data(format!(
                        "{}: {what} {} does not match image {s}",
                        self.source_tag,
                        t.shape()
                    )));
                }
            }
        }
        if let (Some(gt), Some(valid)) = (&self.gt_disparity, &self.valid_mask) {
            if gt.data().iter().zip(valid.data()).any(|(&d, &m)| m > 0.0 && !(d >= 0.0 && d.is_finite())) {
                return Err(Error::Data(format!(
                    "{}: valid pixels must carry finite non-negative disparity",
                    self.source_tag
                )));
            }
        }
        Ok(())
    }

    /// Copy with ground truth removed, for unsupervised training.
    pub fn without_ground_truth(&self) -> Self {
        StereoSample {
            gt_disparity: None,
            valid_mask: None,
            ..self.clone()
        }
    }

    /// The window `[y0, y0 + h) x [x0, x0 + w)` of every field.
    pub fn crop_window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let c = |t: &Tensor<f32>| t.crop(y0, x0, h, w);
        Ok(StereoSample {
            left: c(&self.left)?,
            right: c(&self.right)?,
            gt_disparity: self.gt_disparity.as_ref().map(c).transpose()?,
            valid_mask: self.valid_mask.as_ref().map(c).transpose()?,
            rig: self.rig,
            source_tag: self.source_tag.clone(),
            occluded: self
                .occluded
                .iter()
                .filter_map(|b| b.crop(y0, x0, h, w))
                .collect(),
        })
    }
}

/// `(image - mean) / std` per channel.
pub fn normalize<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    affine_per_channel(image, |c, v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
}

pub fn denormalize<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    affine_per_channel(image, |c, v| v * IMAGENET_STD[c] + IMAGENET_MEAN[c])
}

fn affine_per_channel<T: Real>(image: &Tensor<T>, f: impl Fn(usize, f64) -> f64) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.channels != 3 {
        return Err(Error::shape("normalize", format!("expected 3 channels, got {s}")));
    }
    let plane = s.plane();
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % 3;
        *v = T::from(f(c, v.to_f64().unwrap_or(0.0))).unwrap_or_else(T::zero);
    }
    Ok(out)
}

/// Crops every field of `sample` at the same random window.
pub fn random_crop<R: Rng + ?Sized>(sample: &StereoSample, crop_h: usize, crop_w: usize, rng: &mut R) -> Result<StereoSample> {
    let (h, w) = (sample.height(), sample.width());
    if crop_h > h || crop_w > w || crop_h == 0 || crop_w == 0 {
        return Err(Error::Data(format!(
            "{}: crop {crop_h}x{crop_w} does not fit image {h}x{w}",
            sample.source_tag
        )));
    }
    let y0 = rng.random_range(0..=h - crop_h);
    let x0 = rng.random_range(0..=w - crop_w);
    sample.crop_window(y0, x0, crop_h, crop_w)
}

/// Stacks samples into normalized network input batches.
pub fn batch_inputs(samples: &[&StereoSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let left: Vec<_> = samples.iter().map(|s| normalize(&s.left)).collect::<Result<_>>()?;
    let right: Vec<_> = samples.iter().map(|s| normalize(&s.right)).collect::<Result<_>>()?;
    Ok((Tensor::stack_batch(&left)?, Tensor::stack_batch(&right)?))
}

/// Stacked ground truth and masks; errors if any sample lacks them.
pub fn batch_ground_truth(samples: &[&StereoSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut gts = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        match (&s.gt_disparity, &s.valid_mask) {
            (Some(g), Some(m)) => {
                gts.push(g.clone());
                masks.push(m.clone());
            }
            _ => return Err(Error::Data(format!("{}: sample has no ground truth", s.source_tag))),
        }
    }
    Ok((Tensor::stack_batch(&gts)?, Tensor::stack_batch(&masks)?))
}

pub(crate) fn image_shape(h: usize, w: usize) -> Shape {
    Shape::new(1, 3, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> StereoSample {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Tensor::uniform(image_shape(h, w), 0.0, 1.0, &mut rng);
        let r = Tensor::uniform(image_shape(h, w), 0.0, 1.0, &mut rng);
        let gt = Tensor::from_fn([1, 1, h, w], |_, _, y, x| (x + y) as f32);
        StereoSample::new(l, r, "t").unwrap().with_ground_truth(gt, None).unwrap()
    }

    #[test]
    fn normalize_constants() {
        let mean = Tensor::<f64>::from_fn(image_shape(1, 1), |_, c, _, _| IMAGENET_MEAN[c]);
        assert!(normalize(&mean).unwrap().data().iter().all(|v| v.abs() < 1e-12));
        let white = normalize(&Tensor::<f64>::ones(image_shape(1, 1))).unwrap();
        let want = [2.2489, 2.4286, 2.64];
        for (v, w) in white.data().iter().zip(want) {
            assert!((v - w).abs() < 1e-3, "{v} vs {w}");
        }
    }

    #[test]
    fn crop_full_size_is_identity_and_deterministic() {
        let s = sample(8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&s, 8, 12, &mut rng).unwrap(), s);
        let a = random_crop(&s, 4, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&s, 4, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(random_crop(&s, 9, 12, &mut rng).is_err());
    }

    #[test]
    fn crop_keeps_disparity_values_and_alignment() {
        let mut s = sample(8, 12);
        // encodes the source position in each value
        let gt = Tensor::from_fn([1, 1, 8, 12], |_, _, y, x| (100 * y + x) as f32);
        s = s.with_ground_truth(gt, None).unwrap();
        let c = random_crop(&s, 4, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let gt = c.gt_disparity.as_ref().unwrap();
        let origin = gt.at(0, 0, 0, 0) as usize;
        let (y0, x0) = (origin / 100, origin % 100);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(gt.at(0, 0, y, x), (100 * (y0 + y) + x0 + x) as f32);
                for ch in 0..3 {
                    assert_eq!(c.left.at(0, ch, y, x), s.left.at(0, ch, y0 + y, x0 + x));
                    assert_eq!(c.right.at(0, ch, y, x), s.right.at(0, ch, y0 + y, x0 + x));
                }
            }
        }
    }

    #[test]
    fn validation_catches_mismatch() {
        let s = sample(4, 4);
        assert!(StereoSample::new(s.left.clone(), Tensor::zeros(image_shape(4, 5)), "x").is_err());
        let bad = Tensor::full([1, 1, 4, 4], -1.0f32);
        assert!(s.clone().with_ground_truth(bad, Some(Tensor::ones([1, 1, 4, 4]))).is_err());
    }
}
