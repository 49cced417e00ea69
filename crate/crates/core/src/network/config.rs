use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::NUM_SCALES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// FMM cost volumes at scales 2, 1, 0.
    #[serde(rename = "esnet")]
    EsNet,
    /// Mask-FMM cost volumes at scales 2, 1, 0.
    #[serde(rename = "esnet-m")]
    EsNetM,
    /// Single base cost volume, no warping.
    BaselineNoFmm,
    /// Warped cost volumes at every scale 6..=2 and no base volume.
    PwcAllScales,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::EsNet, Variant::EsNetM, Variant::BaselineNoFmm, Variant::PwcAllScales];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EsNet => "esnet",
            Variant::EsNetM => "esnet-m",
            Variant::BaselineNoFmm => "baseline-no-fmm",
            Variant::PwcAllScales => "pwc-all-scales",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "esnet" => Ok(Variant::EsNet),
            "esnet-m" | "esnetm" => Ok(Variant::EsNetM),
            "baseline-no-fmm" | "baseline" => Ok(Variant::BaselineNoFmm),
            "pwc-all-scales" | "pwc" => Ok(Variant::PwcAllScales),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizePreset {
    Tiny,
    Small,
    PaperScale,
}

impl SizePreset {
    pub fn channels(self) -> [usize; NUM_SCALES] {
        match self {
            SizePreset::Tiny => [8, 16, 32, 64, 64, 64, 64],
            SizePreset::Small => [16, 32, 64, 128, 128, 128, 128],
            SizePreset::PaperScale => [32, 64, 128, 256, 512, 512, 1024],
        }
    }

    pub fn blocks_per_scale(self) -> usize {
        match self {
            SizePreset::Tiny | SizePreset::Small => 1,
            SizePreset::PaperScale => 2,
        }
    }
}

impl std::str::FromStr for SizePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(SizePreset::Tiny),
            "small" => Ok(SizePreset::Small),
            "paper-scale" | "paper" => Ok(SizePreset::PaperScale),
            other => Err(Error::Config(format!("unknown size preset {other:?}"))),
        }
    }
}

/// Architecture description. Defaults to the tiny ESNet preset.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub size_preset: SizePreset,
    /// Feature/decoder width at scales 0..=6.
    pub channel_schedule: Vec<usize>,
    /// Residual blocks after each downsampling stage.
    pub blocks_per_scale: usize,
    /// Number of candidates `0..d_max_base` of the base cost volume.
    pub d_max_base: usize,
    pub fmm_offsets: Vec<i32>,
}

impl NetworkConfig {
    pub fn new(variant: Variant, size_preset: SizePreset) -> Self {
        NetworkConfig {
            variant,
            size_preset,
            channel_schedule: size_preset.channels().to_vec(),
            blocks_per_scale: size_preset.blocks_per_scale(),
            d_max_base: 40,
            fmm_offsets: crate::matching::fmm_offsets(),
        }
    }

    pub fn tiny(variant: Variant) -> Self {
        Self::new(variant, SizePreset::Tiny)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.len() != NUM_SCALES {
            return Err(Error::Config(format!(
                "channel_schedule must list {NUM_SCALES} widths (scales 0..=6), got {}",
                self.channel_schedule.len()
            )));
        }
        if self.channel_schedule.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.d_max_base == 0 {
            return Err(Error::Config("d_max_base must be >= 1".into()));
        }
        if self.fmm_offsets.is_empty() {
            return Err(Error::Config("fmm_offsets must not be empty".into()));
        }
        Ok(())
    }

    pub fn width(&self, s: usize) -> usize {
        self.channel_schedule[s]
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::tiny(Variant::EsNet)
    }
}
