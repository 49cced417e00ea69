//! Oracles and measurement harnesses shared by the integration tests and
//! the acceptance report.
#![allow(dead_code)]

use esnet::matching::{fmm, fmm_offsets, mask_fmm, ConvWeights, ForcedMask, MaskFmmWeights};
use esnet::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Triple loop over candidates, pixels and channels.
pub fn correlate_oracle(l: &Tensor<f64>, r: &Tensor<f64>, offsets: &[i32]) -> Tensor<f64> {
    let [b, c, h, w] = l.shape().dims();
    Tensor::from_fn([b, offsets.len(), h, w], |bi, i, y, x| {
        let xr = x as i64 - offsets[i] as i64;
        if xr < 0 || xr >= w as i64 {
            return 0.0;
        }
        let mut acc = 0.0;
        for ch in 0..c {
            acc += l.at(bi, ch, y, x) * r.at(bi, ch, y, xr as usize);
        }
        acc / c as f64
    })
}

pub fn correlate(l: &Tensor<f64>, r: &Tensor<f64>, offsets: &[i32]) -> Tensor<f64> {
    let mut g = Graph::new();
    let (lv, rv) = (g.constant(l.clone()).unwrap(), g.constant(r.clone()).unwrap());
    let out = esnet::matching::correlate(&mut g, lv, rv, offsets).unwrap();
    g.value(out.scores).clone()
}

/// Largest absolute difference between the kernel and the loop oracle over
/// `trials` random instances up to 2x8x16x16 with offsets drawn from 0..=7.
pub fn correlate_oracle_error(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let shape = [
            r.random_range(1..=2),
            r.random_range(1..=8),
            r.random_range(1..=16),
            r.random_range(1..=16),
        ];
        let l = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut r);
        let rt = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut r);
        let lo = r.random_range(0..=7);
        let hi = r.random_range(lo..=7);
        let offsets: Vec<i32> = (lo..=hi).collect();
        worst = worst.max(correlate(&l, &rt, &offsets).max_abs_diff(&correlate_oracle(&l, &rt, &offsets)));
    }
    worst
}

pub fn warp(f: &Tensor<f64>, d: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let (fv, dv) = (g.constant(f.clone()).unwrap(), g.constant(d.clone()).unwrap());
    let out = g.warp(fv, dv).unwrap();
    g.value(out).clone()
}

#[derive(Debug)]
pub struct WarpIdentities {
    pub zero_is_exact: bool,
    /// Max error of `warp(f, k)(x)` against `f(x - k)` for `x >= k`.
    pub integer_shift: f64,
    /// Max error of `warp(warp(f, a), b)` against `warp(f, a + b)` away from
    /// the left border.
    pub composition: f64,
}

pub fn warp_identities(seed: u64) -> WarpIdentities {
    let mut r = rng(seed);
    let f = Tensor::<f64>::uniform([2, 5, 9, 24], -1.0, 1.0, &mut r);
    let dshape = [2, 1, 9, 24];
    let zero_is_exact = warp(&f, &Tensor::zeros(dshape)) == f;
    let mut integer_shift = 0.0f64;
    let mut composition = 0.0f64;
    for k in 1..=6usize {
        let w = warp(&f, &Tensor::full(dshape, k as f64));
        for (b, c, y, x) in indices(f.shape().dims()) {
            if x >= k {
                integer_shift = integer_shift.max((w.at(b, c, y, x) - f.at(b, c, y, x - k)).abs());
            }
        }
        for j in 1..=4usize {
            let twice = warp(&w, &Tensor::full(dshape, j as f64));
            let once = warp(&f, &Tensor::full(dshape, (k + j) as f64));
            for (b, c, y, x) in indices(f.shape().dims()) {
                if x >= k + j {
                    composition = composition.max((twice.at(b, c, y, x) - once.at(b, c, y, x)).abs());
                }
            }
        }
    }
    WarpIdentities {
        zero_is_exact,
        integer_shift,
        composition,
    }
}

pub fn indices(dims: [usize; 4]) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    let [b, c, h, w] = dims;
    (0..b).flat_map(move |bi| {
        (0..c).flat_map(move |ci| (0..h).flat_map(move |y| (0..w).map(move |x| (bi, ci, y, x))))
    })
}

fn conv_weights(g: &mut Graph<f64>, c_in: usize, c_out: usize, k: usize, r: &mut ChaCha8Rng) -> ConvWeights {
    ConvWeights {
        weight: g.constant(Tensor::uniform([c_out, c_in, k, k], -0.5, 0.5, r)).unwrap(),
        bias: g.constant(Tensor::uniform([c_out, 1, 1, 1], -0.1, 0.1, r)).unwrap(),
        padding: k / 2,
    }
}

/// With the mask forced to 1 and the trade-off term to 0, Mask-FMM must
/// produce exactly the FMM cost volume of its (transformed) features, at
/// every scale. Returns the scales that matched bit for bit.
pub fn mask_fmm_reduction(seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let (c2, h2, w2) = (6usize, 4usize, 8usize);
    let mut matched = Vec::new();
    for s in [2usize, 1, 0] {
        let mut g = Graph::<f64>::new();
        let up = 1usize << (2 - s);
        let (h, w) = (h2 * up, w2 * up);
        let cs = if s == 2 { c2 } else { 4 };
        let fl = g.constant(Tensor::uniform([2, c2, h2, w2], -1.0, 1.0, &mut r)).unwrap();
        let fr = g.constant(Tensor::uniform([2, c2, h2, w2], -1.0, 1.0, &mut r)).unwrap();
        let dc = g.constant(Tensor::uniform([2, 1, h / 2, w / 2], 0.0, 3.0, &mut r)).unwrap();
        let ctx = g.constant(Tensor::uniform([2, 5, h / 2, w / 2], -1.0, 1.0, &mut r)).unwrap();
        let weights = MaskFmmWeights {
            transform: (s < 2).then(|| conv_weights(&mut g, c2, cs, 1, &mut r)),
            theta: conv_weights(&mut g, 5, 1, 3, &mut r),
            mu: conv_weights(&mut g, 5, cs, 3, &mut r),
        };
        let forced = ForcedMask { theta: 1.0, mu: 0.0 };
        let out = mask_fmm(&mut g, fl, fr, dc, ctx, s, &weights, &fmm_offsets(), Some(forced)).unwrap();
        let plain = fmm(&mut g, out.left, out.right, dc, &fmm_offsets()).unwrap();
        if g.value(out.cost.scores).data() == g.value(plain.scores).data() {
            matched.push(s);
        }
    }
    matched
}

/// Right features are the left ones displaced by `delta` px (right(x) =
/// left(x + delta)); the coarse estimate is `delta / 2` at half resolution.
/// Returns the fraction of interior pixels whose FMM argmax is offset 0.
pub fn fmm_compensation_fraction(seed: u64, delta: usize) -> f64 {
    let mut r = rng(seed);
    let (b, c, h, w) = (2usize, 32usize, 16usize, 48usize);
    let fl = Tensor::<f64>::randn([b, c, h, w], 1.0, &mut r);
    let noise = Tensor::<f64>::randn([b, c, h, w], 1.0, &mut r);
    let fr = Tensor::from_fn([b, c, h, w], |bi, ci, y, x| {
        if x + delta < w {
            fl.at(bi, ci, y, x + delta)
        } else {
            noise.at(bi, ci, y, x)
        }
    });
    let mut g = Graph::new();
    let (lv, rv) = (g.constant(fl).unwrap(), g.constant(fr).unwrap());
    let dc = g.constant(Tensor::full([b, 1, h / 2, w / 2], delta as f64 / 2.0)).unwrap();
    let offsets = fmm_offsets();
    let cost = fmm(&mut g, lv, rv, dc, &offsets).unwrap();
    let scores = g.value(cost.scores);
    let zero = offsets.iter().position(|&o| o == 0).unwrap();
    let margin = delta + 2;
    let (mut hits, mut total) = (0usize, 0usize);
    for bi in 0..b {
        for y in 0..h {
            for x in margin..w - margin {
                let best = (0..offsets.len())
                    .max_by(|&i, &j| scores.at(bi, i, y, x).total_cmp(&scores.at(bi, j, y, x)))
                    .unwrap();
                total += 1;
                hits += (best == zero) as usize;
            }
        }
    }
    hits as f64 / total as f64
}

/// Synthetic stand-ins for the three training datasets.
pub const STAND_INS: [(&str, &str); 3] = [
    ("SF", "synthetic:two-layer-occlusion:4:11:64x128"),
    ("DS", "synthetic:smooth-ramp:4:12:64x128"),
    ("K", "synthetic:uniform-shift:4:13:64x128"),
];

/// Tiny ESNet, batch 2, one 1-epoch round per supervised stage, 64x128
/// crops over 4-pair synthetic datasets (3 train / 1 validation).
pub fn tiny_schedule(order: &str) -> esnet::config::ExperimentConfig {
    use esnet::config::{ExperimentConfig, StagePolicy};
    use esnet::network::{SizePreset, Variant};
    use esnet::schedule::LrPolicy;

    let mut cfg = ExperimentConfig::default();
    cfg.model.variant = Variant::EsNet;
    cfg.model.size_preset = SizePreset::Tiny;
    cfg.schedule.order = order.to_string();
    cfg.schedule.seed = 5;
    cfg.schedule.batch_size = 2;
    cfg.schedule.val_ratio = 0.25;
    cfg.schedule.default_crop = [64, 128];
    cfg.schedule.unsupervised.epochs = 1;
    for (name, id) in STAND_INS {
        cfg.data.insert(name.to_string(), id.to_string());
        cfg.schedule.stages.insert(
            name.to_string(),
            StagePolicy {
                rounds: vec![1],
                lr: LrPolicy::constant(1e-3),
                crop: [64, 128],
            },
        );
    }
    cfg.validate().unwrap();
    cfg
}

/// Per-scale weights for the short desk-scale runs: scale 0 dominates.
pub const FINE_OMEGA: [f64; 7] = [1.0, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25];

pub fn synth_pairs(style: esnet::data::DisparityStyle, seed: u64) -> Vec<esnet::data::StereoSample> {
    let spec = esnet::data::SynthSpec::new(4, 64, 128, style);
    esnet::data::synth_generate(&spec, &mut rng(seed)).unwrap()
}

/// Alternating 2-pair batches over 4 samples.
pub fn batch(samples: &[esnet::data::StereoSample], step: usize) -> [&esnet::data::StereoSample; 2] {
    if step.is_multiple_of(2) {
        [&samples[0], &samples[1]]
    } else {
        [&samples[2], &samples[3]]
    }
}

#[derive(Debug)]
pub struct OverfitRun {
    /// Training EPE at the evaluation points, `(step, epe)`.
    pub curve: Vec<(usize, f64)>,
    pub reached_at: Option<usize>,
    pub seconds: f64,
    /// Mean scale-0 mask inside the occluded bands and elsewhere (ESNet-M).
    pub theta: Option<(f64, f64)>,
}

/// Supervised Adam training at lr 1e-3, batch 2, on 4 two-layer-occlusion
/// pairs; evaluates training EPE every 50 steps and stops once it drops
/// below `target`.
pub fn overfit(variant: esnet::network::Variant, max_steps: usize, target: f64) -> OverfitRun {
    use esnet::network::{Network, NetworkConfig};
    use esnet::train::Trainer;

    let samples = synth_pairs(esnet::data::DisparityStyle::TwoLayerOcclusion, 7);
    let net = Network::new(NetworkConfig::tiny(variant)).unwrap();
    let params = net.init_params(1);
    let mut tr = Trainer::new(net, params).unwrap();
    let t0 = std::time::Instant::now();
    let mut curve = Vec::new();
    let mut reached_at = None;
    for step in 1..=max_steps {
        tr.supervised_step(&batch(&samples, step - 1), &FINE_OMEGA, 1e-3).unwrap();
        if step % 50 == 0 {
            let epe = tr.evaluate(&samples).unwrap().epe;
            curve.push((step, epe));
            if epe < target {
                reached_at = Some(step);
                break;
            }
        }
    }
    let seconds = t0.elapsed().as_secs_f64();
    let theta = (variant == esnet::network::Variant::EsNetM).then(|| {
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for s in &samples {
            let pred = tr.predict(s).unwrap();
            let mask = pred.masks.last().unwrap();
            for y in 0..s.height() {
                for x in 0..s.width() {
                    let v = mask.at(0, 0, y, x) as f64;
                    if s.occluded.iter().any(|b| b.contains(y, x)) {
                        inside += v;
                        n_in += 1;
                    } else {
                        outside += v;
                        n_out += 1;
                    }
                }
            }
        }
        (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64)
    });
    OverfitRun {
        curve,
        reached_at,
        seconds,
        theta,
    }
}

#[derive(Debug)]
pub struct PretrainRun {
    pub seed: u64,
    /// Photometric + smoothness total on all 4 pairs before and after.
    pub unsup_before: f64,
    pub unsup_after: f64,
    pub all_finite: bool,
    /// Supervised loss on all 4 pairs every 25 steps.
    pub random_curve: Vec<f64>,
    pub pretrained_curve: Vec<f64>,
    pub seconds: f64,
}

impl PretrainRun {
    /// `L*`: the random-init loss after the full supervised budget.
    pub fn target(&self) -> f64 {
        *self.random_curve.last().unwrap()
    }

    /// First supervised step count at which the pretrained arm reaches `L*`.
    pub fn hit(&self) -> Option<usize> {
        let target = self.target();
        self.pretrained_curve.iter().position(|&l| l <= target).map(|i| (i + 1) * 25)
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.unsup_after / self.unsup_before
    }
}

/// Two arms from the same tiny-ESNet initialization on 4 two-layer pairs:
/// 300 supervised steps from scratch, and `pre_steps` unsupervised steps
/// (ground truth stripped) followed by an optimizer reset and the same 300
/// supervised steps.
pub fn pretrain_benefit(seed: u64, pre_steps: usize) -> PretrainRun {
    use esnet::data::StereoSample;
    use esnet::losses::UnsupLossConfig;
    use esnet::network::{Network, NetworkConfig, Variant};
    use esnet::train::Trainer;

    const SUPERVISED_STEPS: usize = 300;
    const LR: f64 = 1e-3;
    let t0 = std::time::Instant::now();
    let samples = synth_pairs(esnet::data::DisparityStyle::TwoLayerOcclusion, 100 + seed);
    let unlabeled: Vec<StereoSample> = samples.iter().map(StereoSample::without_ground_truth).collect();
    let all: Vec<&StereoSample> = samples.iter().collect();
    let all_unlabeled: Vec<&StereoSample> = unlabeled.iter().collect();
    let net = Network::new(NetworkConfig::tiny(Variant::EsNet)).unwrap();
    let init = net.init_params(seed);
    let cfg = UnsupLossConfig::default();

    let supervised = |tr: &mut Trainer| {
        let mut curve = Vec::new();
        for step in 0..SUPERVISED_STEPS {
            tr.supervised_step(&batch(&samples, step), &FINE_OMEGA, LR).unwrap();
            if step % 25 == 24 {
                curve.push(tr.supervised_loss(&all, &FINE_OMEGA).unwrap());
            }
        }
        curve
    };

    let mut random = Trainer::new(net.clone(), init.clone()).unwrap();
    let random_curve = supervised(&mut random);

    let mut pre = Trainer::new(net, init).unwrap();
    let unsup_before = pre.unsupervised_loss(&all_unlabeled, &cfg).unwrap();
    let mut all_finite = unsup_before.is_finite();
    for step in 0..pre_steps {
        match pre.unsupervised_step(&batch(&unlabeled, step), &cfg, LR) {
            Ok(l) => all_finite &= l.is_finite(),
            Err(_) => {
                all_finite = false;
                break;
            }
        }
    }
    let unsup_after = pre.unsupervised_loss(&all_unlabeled, &cfg).unwrap();
    all_finite &= unsup_after.is_finite();
    pre.reset_optimizer();
    let pretrained_curve = supervised(&mut pre);
    PretrainRun {
        seed,
        unsup_before,
        unsup_after,
        all_finite,
        random_curve,
        pretrained_curve,
        seconds: t0.elapsed().as_secs_f64(),
    }
}
