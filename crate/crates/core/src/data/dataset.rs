//! Dataset identifiers and loading.
//!
//! A dataset is either a directory with `left/`, `right/` and optionally
//! `disp/` subdirectories (matching file stems; disparities as `.pfm` or
//! KITTI 16-bit `.png`), or a synthetic identifier
//! `synthetic:<style>:<count>:<seed>:<H>x<W>[:<lo>-<hi>]`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::synth::{synth_generate, DisparityStyle, SynthSpec};
use super::{image_io, pfm, StereoSample};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetId {
    Directory(PathBuf),
    Synthetic { spec: SynthSpec, seed: u64 },
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("synthetic:") else {
            return Ok(DatasetId::Directory(PathBuf::from(s)));
        };
        let bad = || {
            Error::Config(format!(
                "bad synthetic dataset {s:?}, expected synthetic:<style>:<count>:<seed>:<H>x<W>[:<lo>-<hi>]"
            ))
        };
        let parts: Vec<&str> = rest.split(':').collect();
        if !(4..=5).contains(&parts.len()) {
            return Err(bad());
        }
        let style: DisparityStyle = parts[0].parse()?;
        let count: usize = parts[1].parse().map_err(|_| bad())?;
        let seed: u64 = parts[2].parse().map_err(|_| bad())?;
        let (h, w) = parts[3].split_once('x').ok_or_else(bad)?;
        let mut spec = SynthSpec::new(
            count,
            h.parse().map_err(|_| bad())?,
            w.parse().map_err(|_| bad())?,
            style,
        );
        if let Some(range) = parts.get(4) {
            let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
            spec = spec.with_range(lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
        }
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(DatasetId::Synthetic { spec, seed })
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetId::Directory(p) => write!(f, "{}", p.display()),
            DatasetId::Synthetic { spec, seed } => {
                write!(
                    f,
                    "synthetic:{}:{}:{seed}:{}x{}:{}-{}",
                    spec.style, spec.count, spec.height, spec.width, spec.disparity_range.0, spec.disparity_range.1
                )
            }
        }
    }
}

/// A loaded dataset, samples in a fixed order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: String,
    pub samples: Vec<StereoSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.gt_disparity.is_some())
    }

    /// Splits off the last `round(len * val_ratio)` samples for validation,
    /// keeping at least one training sample.
    pub fn split(&self, val_ratio: f64) -> (Vec<StereoSample>, Vec<StereoSample>) {
        let n = self.samples.len();
        let n_val = ((n as f64 * val_ratio).round() as usize).min(n.saturating_sub(1));
        let (train, val) = self.samples.split_at(n - n_val);
        (train.to_vec(), val.to_vec())
    }
}

pub fn load_dataset(id: &DatasetId) -> Result<Dataset> {
    match id {
        DatasetId::Synthetic { spec, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let samples = synth_generate(spec, &mut rng)?;
            Ok(Dataset {
                id: id.to_string(),
                samples,
            })
        }
        DatasetId::Directory(root) => load_directory(root),
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn load_directory(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset directory {} not found", root.display())));
    }
    let (left_dir, right_dir, disp_dir) = (root.join("left"), root.join("right"), root.join("disp"));
    let mut samples = Vec::new();
    for left in sorted_files(&left_dir)? {
        let name = left.file_name().expect("file").to_owned();
        let stem = left.file_stem().expect("file").to_string_lossy().into_owned();
        let right = right_dir.join(&name);
        if !right.is_file() {
            return Err(Error::Data(format!("missing right view {}", right.display())));
        }
        let tag = format!("{}/{stem}", root.display());
        let mut sample = StereoSample::new(image_io::read_image(&left)?, image_io::read_image(&right)?, tag)?;
        let pfm_path = disp_dir.join(format!("{stem}.pfm"));
        let png_path = disp_dir.join(format!("{stem}.png"));
        if pfm_path.is_file() {
            let d = pfm::read_pfm(&pfm_path)?;
            let valid = d.map(|v| if v.is_finite() && v >= 0.0 { 1.0 } else { 0.0 });
            let d = d.map(|v| if v.is_finite() && v >= 0.0 { v } else { 0.0 });
            sample = sample.with_ground_truth(d, Some(valid))?;
        } else if png_path.is_file() {
            let (d, valid) = image_io::read_kitti_disparity(&png_path)?;
            sample = sample.with_ground_truth(d, Some(valid))?;
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no images under {}", left_dir.display())));
    }
    Ok(Dataset {
        id: root.display().to_string(),
        samples,
    })
}

/// Writes samples in the directory layout read by [`load_dataset`]
/// (`.png` images, `.pfm` disparities).
pub fn write_dataset(root: &Path, samples: &[StereoSample]) -> Result<()> {
    for sub in ["left", "right", "disp"] {
        fs::create_dir_all(root.join(sub))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:06}");
        image_io::write_image(root.join("left").join(format!("{name}.png")), &s.left)?;
        image_io::write_image(root.join("right").join(format!("{name}.png")), &s.right)?;
        if let Some(gt) = &s.gt_disparity {
            pfm::write_pfm(root.join("disp").join(format!("{name}.pfm")), gt)?;
        }
    }
    Ok(())
}
