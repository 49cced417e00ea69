//! Synthetic stereo pairs with exact ground truth.
//!
//! Textures are sums of random sinusoids, so the right view is evaluated
//! analytically at the corresponding left coordinate instead of being
//! resampled. A left pixel `x` with disparity `d` matches right pixel `x - d`.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::SIZE_MULTIPLE;
use crate::tensor::Tensor;

use super::{image_shape, StereoSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DisparityStyle {
    /// One constant disparity per pair.
    UniformShift,
    /// Background plane plus a nearer foreground rectangle.
    TwoLayerOcclusion,
    /// Disparity varying linearly in x and y.
    SmoothRamp,
}

impl DisparityStyle {
    pub const ALL: [DisparityStyle; 3] = [
        DisparityStyle::UniformShift,
        DisparityStyle::TwoLayerOcclusion,
        DisparityStyle::SmoothRamp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DisparityStyle::UniformShift => "uniform-shift",
            DisparityStyle::TwoLayerOcclusion => "two-layer-occlusion",
            DisparityStyle::SmoothRamp => "smooth-ramp",
        }
    }
}

impl fmt::Display for DisparityStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DisparityStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown disparity style {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub style: DisparityStyle,
    /// Disparities are drawn from `[lo, hi]`; with `lo == hi` the uniform
    /// style is exactly that shift.
    pub disparity_range: (f64, f64),
    /// Sinusoids per channel.
    pub components: usize,
    /// Highest horizontal / vertical frequency, cycles per pixel.
    pub max_frequency: f64,
}

impl SynthSpec {
    pub fn new(count: usize, height: usize, width: usize, style: DisparityStyle) -> Self {
        SynthSpec {
            count,
            height,
            width,
            style,
            disparity_range: (2.0, 12.0),
            components: 8,
            max_frequency: 0.2,
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.disparity_range = (lo, hi);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(SIZE_MULTIPLE) || !self.width.is_multiple_of(SIZE_MULTIPLE)
        {
            return Err(Error::Data(format!(
                "synthetic size {}x{} must be a positive multiple of {SIZE_MULTIPLE}",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.disparity_range;
        if !(lo >= 0.0 && hi >= lo && hi < self.width as f64 / 2.0) {
            return Err(Error::Data(format!(
                "disparity range [{lo}, {hi}] must satisfy 0 <= lo <= hi < width/2"
            )));
        }
        if self.style == DisparityStyle::TwoLayerOcclusion && hi.floor() - lo.ceil() < 1.0 {
            return Err(Error::Data(
                "two-layer scenes need at least two integer disparities in range".into(),
            ));
        }
        if self.components == 0 || !(self.max_frequency > 0.0 && self.max_frequency <= 0.5) {
            return Err(Error::Data("texture needs components >= 1 and 0 < max_frequency <= 0.5".into()));
        }
        Ok(())
    }
}

/// Left-image rectangle whose pixels are hidden in the right view,
/// half-open `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OccludedBand {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl OccludedBand {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Band in the coordinates of a crop window, if it intersects.
    pub(crate) fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Option<Self> {
        let b = OccludedBand {
            y0: self.y0.clamp(y0, y0 + h) - y0,
            y1: self.y1.clamp(y0, y0 + h) - y0,
            x0: self.x0.clamp(x0, x0 + w) - x0,
            x1: self.x1.clamp(x0, x0 + w) - x0,
        };
        (b.y1 > b.y0 && b.x1 > b.x0).then_some(b)
    }
}

#[derive(Clone, Debug)]
struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

/// Band-limited RGB texture defined on the continuous plane.
#[derive(Clone, Debug)]
struct Texture {
    channels: [Vec<Wave>; 3],
    base: [f64; 3],
}

impl Texture {
    fn random<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Self {
        let amp = 0.42 / spec.components as f64;
        let f = spec.max_frequency;
        let channels = [(); 3].map(|_| {
            (0..spec.components)
                .map(|_| Wave {
                    amp: amp * rng.random_range(0.5..1.0),
                    // keep horizontal structure present in every component
                    fx: rng.random_range(0.25 * f..f) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                    fy: rng.random_range(-f..f),
                    phase: rng.random_range(0.0..TAU),
                })
                .collect()
        });
        let base = [(); 3].map(|_| rng.random_range(0.45..0.55));
        Texture { channels, base }
    }

    fn eval(&self, c: usize, x: f64, y: f64) -> f32 {
        let v = self.channels[c]
            .iter()
            .fold(self.base[c], |acc, w| acc + w.amp * (TAU * (w.fx * x + w.fy * y) + w.phase).sin());
        v.clamp(0.0, 1.0) as f32
    }
}

/// Generates `spec.count` pairs; identical rng states give identical data.
pub fn synth_generate<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<StereoSample>> {
    spec.validate()?;
    (0..spec.count).map(|i| generate_one(spec, i, rng)).collect()
}

fn generate_one<R: Rng + ?Sized>(spec: &SynthSpec, index: usize, rng: &mut R) -> Result<StereoSample> {
    let (h, w) = (spec.height, spec.width);
    let (lo, hi) = spec.disparity_range;
    let shape = image_shape(h, w);
    let tag = format!("synthetic:{}#{index}", spec.style);
    let back = Texture::random(spec, rng);
    let (left, right, gt, occluded) = match spec.style {
        DisparityStyle::UniformShift => {
            let d = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let left = Tensor::from_fn(shape, |_, c, y, x| back.eval(c, x as f64, y as f64));
            let right = Tensor::from_fn(shape, |_, c, y, x| back.eval(c, x as f64 + d, y as f64));
            (left, right, Tensor::full([1, 1, h, w], d as f32), Vec::new())
        }
        DisparityStyle::SmoothRamp => {
            // d(x, y) = a + gx * x + gy * y, kept inside [lo, hi]
            let span = hi - lo;
            let gx = rng.random_range(-0.5..0.5) * span / w as f64;
            let gy = rng.random_range(-0.5..0.5) * span / h as f64;
            let min_lin = gx.min(0.0) * (w - 1) as f64 + gy.min(0.0) * (h - 1) as f64;
            let max_lin = gx.max(0.0) * (w - 1) as f64 + gy.max(0.0) * (h - 1) as f64;
            let a = lo - min_lin + rng.random::<f64>() * (span - (max_lin - min_lin)).max(0.0);
            let disp = |x: f64, y: f64| a + gx * x + gy * y;
            let left = Tensor::from_fn(shape, |_, c, y, x| back.eval(c, x as f64, y as f64));
            // right pixel x' sees left x with x - d(x, y) = x'
            let right = Tensor::from_fn(shape, |_, c, y, xr| {
                let y = y as f64;
                let x = (xr as f64 + a + gy * y) / (1.0 - gx);
                back.eval(c, x, y)
            });
            let gt = Tensor::from_fn([1, 1, h, w], |_, _, y, x| disp(x as f64, y as f64) as f32);
            (left, right, gt, Vec::new())
        }
        DisparityStyle::TwoLayerOcclusion => {
            let (ilo, ihi) = (lo.ceil() as i64, hi.floor() as i64);
            let db = rng.random_range(ilo..ihi);
            let df = rng.random_range(db + 1..=ihi);
            let fore = Texture::random(spec, rng);
            let rh = rng.random_range(h / 4..=h / 2);
            let rw = rng.random_range(w / 6..=w / 3);
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(df as usize + 1..=w - rw);
            let (y1, x1) = (y0 + rh, x0 + rw);
            let in_rect = |y: usize, x: f64| (y0..y1).contains(&y) && x >= x0 as f64 && x < x1 as f64;
            let left = Tensor::from_fn(shape, |_, c, y, x| {
                let tex = if in_rect(y, x as f64) { &fore } else { &back };
                tex.eval(c, x as f64, y as f64)
            });
            let right = Tensor::from_fn(shape, |_, c, y, xr| {
                let xf = xr as f64 + df as f64;
                if in_rect(y, xf) {
                    fore.eval(c, xf, y as f64)
                } else {
                    back.eval(c, xr as f64 + db as f64, y as f64)
                }
            });
            let gt = Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
                if in_rect(y, x as f64) {
                    df as f32
                } else {
                    db as f32
                }
            });
            let band = OccludedBand {
                y0,
                y1,
                x0: x0 - (df - db) as usize,
                x1: x0,
            };
            (left, right, gt, vec![band])
        }
    };
    let valid = Tensor::ones([1, 1, h, w]);
    let mut sample = StereoSample::new(left, right, tag)?.with_ground_truth(gt, Some(valid))?;
    sample.occluded = occluded;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen(spec: &SynthSpec, seed: u64) -> Vec<StereoSample> {
        synth_generate(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        for style in DisparityStyle::ALL {
            let spec = SynthSpec::new(2, 64, 64, style);
            assert_eq!(gen(&spec, 5), gen(&spec, 5));
            assert_ne!(gen(&spec, 5), gen(&spec, 6));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let spec = SynthSpec::new(1, 60, 128, DisparityStyle::UniformShift);
        assert!(synth_generate(&spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn uniform_integer_shift_is_exact_copy() {
        let spec = SynthSpec::new(1, 64, 64, DisparityStyle::UniformShift).with_range(4.0, 4.0);
        let s = &gen(&spec, 1)[0];
        for c in 0..3 {
            for y in 0..64 {
                for x in 4..64 {
                    assert_eq!(s.left.at(0, c, y, x), s.right.at(0, c, y, x - 4));
                }
            }
        }
    }

    #[test]
    fn occluded_band_width_is_disparity_gap() {
        let spec = SynthSpec::new(4, 64, 128, DisparityStyle::TwoLayerOcclusion);
        for s in gen(&spec, 2) {
            let gt = s.gt_disparity.as_ref().unwrap();
            let band = s.occluded[0];
            let fg = gt.at(0, 0, band.y0, band.x1);
            let bg = gt.at(0, 0, band.y0, band.x0);
            assert!(fg > bg);
            assert_eq!(band.width() as f32, fg - bg);
            // the right-view pixel an occluded left pixel would match shows foreground
            let x = band.x0;
            let xr = x - bg as usize;
            assert_eq!(s.right.at(0, 0, band.y0, xr), s.left.at(0, 0, band.y0, xr + fg as usize));
        }
    }

    #[test]
    fn ramp_stays_in_range() {
        let spec = SynthSpec::new(6, 64, 128, DisparityStyle::SmoothRamp).with_range(1.0, 9.0);
        for s in gen(&spec, 3) {
            let gt = s.gt_disparity.unwrap();
            assert!(gt.data().iter().all(|&d| (0.999..=9.001).contains(&d)));
        }
    }

    #[test]
    fn images_in_unit_range() {
        for style in DisparityStyle::ALL {
            for s in gen(&SynthSpec::new(2, 64, 64, style), 4) {
                assert!(s.left.data().iter().chain(s.right.data()).all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
