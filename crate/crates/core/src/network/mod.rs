//! ESNet, ESNet-M and two ablation topologies.
//!
//! Layout: a shared residual feature extractor (scales 0..=3, or 0..=6 for
//! the all-scales variant), a base correlation volume at scale 3, an encoder
//! continuing to scale 6 and a decoder back to full resolution with
//! concatenation skips. Every decoder scale ends in a 3x3 disparity head fed
//! by the decoder feature, the upsampled coarser disparity and, where the
//! variant provides one, a cost volume.

mod config;
mod layers;

pub use config::{NetworkConfig, SizePreset, Variant};
pub use layers::{Conv, ParamLayout, ResBlock, Stage};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::NUM_SCALES;
use crate::matching::{self, ForcedMask, MaskFmmWeights, OcclusionMask};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << (NUM_SCALES - 1);

/// Disparity maps `d^0..=d^6`, `d^s` shaped `(B, 1, H/2^s, W/2^s)` and
/// measured in pixels of its own resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityPyramid {
    pub maps: Vec<Var>,
}

impl DisparityPyramid {
    pub fn full_resolution(&self) -> Var {
        self.maps[0]
    }
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    pub pyramid: DisparityPyramid,
    /// Mask-FMM occlusion masks at scales 2, 1, 0 (ESNet-M only).
    pub masks: Vec<OcclusionMask>,
}

/// Left and right feature pyramids, `left[s]` at scale s.
#[derive(Clone, Debug)]
pub struct FeaturePyramids {
    pub left: Vec<Var>,
    pub right: Vec<Var>,
}

#[derive(Clone, Debug)]
struct MaskHeads {
    /// Shared 1x1 transforms for scales 1 and 0 (index = s).
    transform: [Option<Conv>; 3],
    theta: [Conv; 3],
    mu: [Conv; 3],
}

#[derive(Clone, Debug)]
struct DecoderScale {
    up: Conv,
    fuse: Conv,
    head: Conv,
}

/// A built architecture: configuration plus parameter handles.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    layout: ParamLayout,
    extractor: Vec<Stage>,
    encoder: Vec<Stage>,
    head6: Conv,
    /// Decoder scales 5..=0, stored at index s.
    decoder: Vec<Option<DecoderScale>>,
    mask: Option<MaskHeads>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let c = |s: usize| config.width(s);
        let blocks = config.blocks_per_scale;
        let mut layout = ParamLayout::default();

        let extractor_scales = if config.variant == Variant::PwcAllScales { NUM_SCALES } else { 4 };
        let mut extractor = Vec::new();
        for s in 0..extractor_scales {
            let (c_in, stride) = if s == 0 { (3, 1) } else { (c(s - 1), 2) };
            extractor.push(Stage::new(&mut layout, &format!("feat.s{s}"), c_in, c(s), stride, blocks));
        }

        let base_channels = match config.variant {
            Variant::PwcAllScales => 0,
            _ => config.d_max_base,
        };
        let mut encoder = vec![Stage::new(&mut layout, "enc.s3", base_channels + c(3), c(3), 1, blocks)];
        for s in 4..NUM_SCALES {
            encoder.push(Stage::new(&mut layout, &format!("enc.s{s}"), c(s - 1), c(s), 2, blocks));
        }

        let head6_in = c(6) + cost_channels(&config, 6);
        let head6 = layout.conv("head.s6", head6_in, 1, 3, 1);
        let mut decoder: Vec<Option<DecoderScale>> = vec![None; NUM_SCALES];
        for s in (0..NUM_SCALES - 1).rev() {
            let up = layout.up_conv(&format!("dec.s{s}.up"), c(s + 1), c(s));
            let fuse = layout.conv(&format!("dec.s{s}.fuse"), 2 * c(s), c(s), 3, 1);
            let head_in = c(s) + 1 + cost_channels(&config, s);
            let head = layout.conv(&format!("head.s{s}"), head_in, 1, 3, 1);
            decoder[s] = Some(DecoderScale { up, fuse, head });
        }

        let mask = (config.variant == Variant::EsNetM).then(|| {
            let transform = [0, 1, 2].map(|s| {
                (s < 2).then(|| layout.conv(&format!("mfmm.s{s}.transform"), c(2), c(s), 1, 1))
            });
            let theta = [0, 1, 2].map(|s| layout.conv(&format!("mfmm.s{s}.theta"), c(s + 1), 1, 3, 1));
            let mu = [0, 1, 2].map(|s| layout.conv(&format!("mfmm.s{s}.mu"), c(s + 1), c(s), 3, 1));
            MaskHeads { transform, theta, mu }
        });

        Ok(Network {
            config,
            layout,
            extractor,
            encoder,
            head6,
            decoder,
            mask,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.numel()
    }

    /// Fresh He-initialised parameters from a fixed seed.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.layout.init(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Rejects a parameter store that does not fit this architecture.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        if self.layout.matches(params) {
            return Ok(());
        }
        let expected: Vec<_> = self.layout.shapes().collect();
        for (i, (name, t)) in params.iter().enumerate() {
            match expected.get(i) {
                Some((en, es)) if *en == name && *es == t.shape() => {}
                Some((en, es)) => {
                    return Err(Error::Config(format!(
                        "parameter {i} is {name} {}, architecture expects {en} {es}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("unexpected parameter {name}"))),
            }
        }
        Err(Error::Config(format!(
            "checkpoint holds {} parameters, architecture expects {}",
            params.len(),
            expected.len()
        )))
    }

    /// Runs the shared extractor on both views.
    pub fn feature_extract<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        left: Var,
        right: Var,
    ) -> Result<FeaturePyramids> {
        check_input(g.shape(left), g.shape(right))?;
        let run = |g: &mut Graph<T>, x: Var| -> Result<Vec<Var>> {
            let mut out = Vec::with_capacity(self.extractor.len());
            let mut h = x;
            for stage in &self.extractor {
                h = stage.forward(g, p, h)?;
                out.push(h);
            }
            Ok(out)
        };
        Ok(FeaturePyramids {
            left: run(g, left)?,
            right: run(g, right)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, left: Var, right: Var) -> Result<NetOutput> {
        self.forward_with(g, p, left, right, None)
    }

    /// Forward pass; `forced` pins the Mask-FMM mask and trade-off terms to
    /// constants.
    pub fn forward_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        left: Var,
        right: Var,
        forced: Option<ForcedMask>,
    ) -> Result<NetOutput> {
        let variant = self.config.variant;
        let feats = self.feature_extract(g, p, left, right)?;
        let (fl, fr) = (&feats.left, &feats.right);

        let base = match variant {
            Variant::PwcAllScales => None,
            _ => {
                let offsets = matching::offset_range(0, self.config.d_max_base as i32 - 1);
                Some(matching::correlate(g, fl[3], fr[3], &offsets)?.scores)
            }
        };
        let enc_in = match base {
            Some(b) => g.concat_channels(&[b, fl[3]])?,
            None => fl[3],
        };
        let mut enc = Vec::with_capacity(4);
        let mut h = enc_in;
        for stage in &self.encoder {
            h = stage.forward(g, p, h)?;
            enc.push(h);
        }
        let enc_at = |s: usize| enc[s - 3];

        let mut head_in = vec![enc_at(6)];
        if variant == Variant::PwcAllScales {
            let offsets = matching::offset_range(0, (self.config.d_max_base / 8).max(1) as i32);
            head_in.push(matching::correlate(g, fl[6], fr[6], &offsets)?.scores);
        }
        let head_in = g.concat_channels(&head_in)?;
        let mut disp = vec![self.head6.forward(g, p, head_in)?];
        let mut masks = Vec::new();
        let mut prev_feat = enc_at(6);

        for s in (0..NUM_SCALES - 1).rev() {
            let dec = self.decoder[s].as_ref().expect("decoder scale");
            let d_coarse = *disp.last().expect("coarser disparity");
            let up = dec.up.forward_act(g, p, prev_feat)?;
            let skip = if s >= 3 { enc_at(s) } else { fl[s] };
            let cat = g.concat_channels(&[up, skip])?;
            let feat = dec.fuse.forward_act(g, p, cat)?;
            let sh = g.shape(feat);
            let d_up = matching::upsample_disparity(g, d_coarse, sh.height, sh.width)?;

            let cost = match (variant, s) {
                (Variant::PwcAllScales, 2..=5) => {
                    Some(matching::fmm(g, fl[s], fr[s], d_coarse, &self.config.fmm_offsets)?.scores)
                }
                (Variant::PwcAllScales, _) => None,
                (_, 3) => base,
                (Variant::EsNet, 0..=2) => {
                    Some(matching::fmm(g, fl[s], fr[s], d_coarse, &self.config.fmm_offsets)?.scores)
                }
                (Variant::EsNetM, 0..=2) => {
                    let heads = self.mask.as_ref().expect("mask heads");
                    let weights = MaskFmmWeights {
                        transform: heads.transform[s].map(|c| c.bind(p)),
                        theta: heads.theta[s].bind(p),
                        mu: heads.mu[s].bind(p),
                    };
                    let out = matching::mask_fmm(
                        g,
                        fl[2],
                        fr[2],
                        d_coarse,
                        prev_feat,
                        s,
                        &weights,
                        &self.config.fmm_offsets,
                        forced,
                    )?;
                    masks.push(out.mask);
                    Some(out.cost.scores)
                }
                _ => None,
            };
            let mut parts = vec![feat, d_up];
            parts.extend(cost);
            let cat = g.concat_channels(&parts)?;
            disp.push(dec.head.forward(g, p, cat)?);
            prev_feat = feat;
        }
        disp.reverse();
        Ok(NetOutput {
            pyramid: DisparityPyramid { maps: disp },
            masks,
        })
    }

    /// Inference on concrete tensors with frozen parameters, returning the
    /// pyramid values and masks.
    pub fn predict<T: Real>(
        &self,
        params: &ParamStore<T>,
        left: &Tensor<T>,
        right: &Tensor<T>,
    ) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g)?;
        let l = g.constant(left.clone())?;
        let r = g.constant(right.clone())?;
        let out = self.forward(&mut g, &p, l, r)?;
        Ok(Prediction {
            pyramid: out.pyramid.maps.iter().map(|&v| g.value(v).clone()).collect(),
            masks: out.masks.iter().map(|m| g.value(m.theta).clone()).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub pyramid: Vec<Tensor<T>>,
    pub masks: Vec<Tensor<T>>,
}

/// Width of the cost volume entering the head at scale s.
fn cost_channels(config: &NetworkConfig, s: usize) -> usize {
    let fmm = config.fmm_offsets.len();
    match (config.variant, s) {
        (Variant::PwcAllScales, 6) => (config.d_max_base / 8).max(1) + 1,
        (Variant::PwcAllScales, 2..=5) => fmm,
        (Variant::PwcAllScales, _) => 0,
        (_, 3) => config.d_max_base,
        (Variant::EsNet | Variant::EsNetM, 0..=2) => fmm,
        _ => 0,
    }
}

fn check_input(left: Shape, right: Shape) -> Result<()> {
    if left != right {
        return Err(Error::shape("network", format!("left {left} vs right {right}")));
    }
    if left.channels != 3 {
        return Err(Error::shape("network", format!("expected 3-channel images, got {left}")));
    }
    if !left.height.is_multiple_of(SIZE_MULTIPLE) || !left.width.is_multiple_of(SIZE_MULTIPLE) || left.height == 0 || left.width == 0
    {
        return Err(Error::shape(
            "network",
            format!(
                "input {}x{} is not a positive multiple of {SIZE_MULTIPLE}",
                left.height, left.width
            ),
        ));
    }
    Ok(())
}

/// ESNet forward; errors unless the network is the ESNet variant.
pub fn esnet_forward<T: Real>(
    net: &Network,
    g: &mut Graph<T>,
    p: &BoundParams,
    left: Var,
    right: Var,
) -> Result<DisparityPyramid> {
    if net.variant() != Variant::EsNet {
        return Err(Error::Config(format!("esnet_forward called on {:?}", net.variant())));
    }
    Ok(net.forward(g, p, left, right)?.pyramid)
}

/// ESNet-M forward returning the pyramid and the masks at scales 2, 1, 0.
pub fn esnetm_forward<T: Real>(
    net: &Network,
    g: &mut Graph<T>,
    p: &BoundParams,
    left: Var,
    right: Var,
) -> Result<(DisparityPyramid, Vec<OcclusionMask>)> {
    if net.variant() != Variant::EsNetM {
        return Err(Error::Config(format!("esnetm_forward called on {:?}", net.variant())));
    }
    let out = net.forward(g, p, left, right)?;
    Ok((out.pyramid, out.masks))
}
