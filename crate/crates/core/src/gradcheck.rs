//! Central-difference gradient checking in 64-bit precision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matching::ConvWeights;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-3;

const PROJECTION_SEED: u64 = 0x9e37_79b9;

/// Reduces `out` to a scalar. Non-scalar outputs are contracted with a fixed
/// pseudo-random tensor so every output coordinate contributes.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let s = g.shape(out);
    if s.is_scalar() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let r = g.constant(Tensor::uniform(s, -1.0, 1.0, &mut rng))?;
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let out = f(&mut g, xv)?;
    let loss = project(&mut g, out)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Analytic gradient of the projected output of `f` w.r.t. `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor<f64>) -> Result<Tensor<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let out = f(&mut g, xv)?;
    let loss = project(&mut g, out)?;
    g.backward(loss)?;
    Ok(g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Maximum over coordinates of `|analytic - numeric| / max(|analytic|,
/// |numeric|, floor)`, where `floor` is `1e-3` times the largest analytic
/// gradient magnitude (so near-zero coordinates are judged against the
/// gradient's overall scale rather than their own).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, epsilon, &coords)
}

/// As [`grad_check`], restricted to the flat indices in `coords`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, epsilon: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    if !analytic.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &k in coords {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + epsilon;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[k] = orig - epsilon;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Maximum relative error accepted by the operator suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Step used by the suite; small enough that curvature of SSIM and the
/// sigmoid does not dominate the central-difference truncation error.
pub const SUITE_EPSILON: f64 = 1e-5;

/// Result of checking one operator with respect to one of its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub input: &'static str,
    pub coords: usize,
    pub max_rel_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= SUITE_TOLERANCE
    }
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

struct Case {
    op: &'static str,
    input: &'static str,
    x: Tensor<f64>,
    f: CaseFn,
}

fn case(
    op: &'static str,
    input: &'static str,
    x: Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static,
) -> Case {
    Case {
        op,
        input,
        x,
        f: Box::new(f),
    }
}

/// Disparity with fractional part in `[0.3, 0.7]` and strictly positive
/// x/y differences, so no interpolation tap, clamp or `|.|` kink lies within
/// `epsilon` of any sample.
fn smooth_disparity(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let [_, _, h, w] = shape;
    let sx = 0.2 / w.max(2) as f64;
    let sy = 0.15 / h.max(2) as f64;
    let jitter = Tensor::<f64>::uniform(shape, 0.0, 0.25 * sx.min(sy), rng);
    Tensor::from_fn(shape, |b, c, y, x| {
        2.3 + sx * x as f64 + sy * y as f64 + jitter.at(b, c, y, x)
    })
}

fn weights_for(
    g: &mut Graph<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    slot: Option<Var>,
    padding: usize,
) -> Result<ConvWeights> {
    let weight = match slot {
        Some(v) => v,
        None => g.constant(w.clone())?,
    };
    Ok(ConvWeights {
        weight,
        bias: g.constant(b.clone())?,
        padding,
    })
}

fn build_cases(seed: u64) -> Vec<Case> {
    use crate::losses::{
        photometric_loss, smooth_l1, smoothness_loss, supervised_total, unsupervised_total, UnsupLossConfig,
        NUM_SCALES,
    };
    use crate::graph::ResizeMode;
    use crate::matching::{fmm_offsets, mask_fmm, MaskFmmWeights};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: [usize; 4], lo: f64, hi: f64| Tensor::<f64>::uniform(shape, lo, hi, &mut rng);
    let mut cases = Vec::new();

    // Convolutions.
    let (cx, cw, cb) = (u([2, 3, 6, 7], -1.0, 1.0), u([4, 3, 3, 3], -0.5, 0.5), u([4, 1, 1, 1], -0.5, 0.5));
    for (input, stride) in [("input", 1), ("input/stride2", 2)] {
        let (w, b) = (cw.clone(), cb.clone());
        cases.push(case("conv2d", input, cx.clone(), move |g, x| {
            let w = g.constant(w.clone())?;
            let b = g.constant(b.clone())?;
            g.conv2d(x, w, Some(b), stride, 1)
        }));
    }
    {
        let (x0, b) = (cx.clone(), cb.clone());
        cases.push(case("conv2d", "weight", cw.clone(), move |g, w| {
            let x = g.constant(x0.clone())?;
            let b = g.constant(b.clone())?;
            g.conv2d(x, w, Some(b), 2, 1)
        }));
        let (x0, w) = (cx.clone(), cw.clone());
        cases.push(case("conv2d", "bias", cb.clone(), move |g, b| {
            let x = g.constant(x0.clone())?;
            let w = g.constant(w.clone())?;
            g.conv2d(x, w, Some(b), 1, 1)
        }));
    }
    let (tx, tw, tb) = (u([2, 3, 4, 5], -1.0, 1.0), u([3, 2, 4, 4], -0.5, 0.5), u([2, 1, 1, 1], -0.5, 0.5));
    {
        let (w, b) = (tw.clone(), tb.clone());
        cases.push(case("conv_transpose2d", "input", tx.clone(), move |g, x| {
            let w = g.constant(w.clone())?;
            let b = g.constant(b.clone())?;
            g.conv_transpose2d(x, w, Some(b), 2, 1)
        }));
        let (x0, b) = (tx.clone(), tb.clone());
        cases.push(case("conv_transpose2d", "weight", tw.clone(), move |g, w| {
            let x = g.constant(x0.clone())?;
            let b = g.constant(b.clone())?;
            g.conv_transpose2d(x, w, Some(b), 2, 1)
        }));
        let (x0, w) = (tx.clone(), tw.clone());
        cases.push(case("conv_transpose2d", "bias", tb.clone(), move |g, b| {
            let x = g.constant(x0.clone())?;
            let w = g.constant(w.clone())?;
            g.conv_transpose2d(x, w, Some(b), 2, 1)
        }));
    }

    // Resampling.
    let rx = u([2, 2, 5, 6], -1.0, 1.0);
    cases.push(case("bilinear_resize", "input/up", rx.clone(), |g, x| {
        g.resize(x, 9, 13, ResizeMode::Image)
    }));
    cases.push(case("bilinear_resize", "input/down", rx.clone(), |g, x| {
        g.resize(x, 3, 2, ResizeMode::Image)
    }));
    cases.push(case("bilinear_resize", "input/disparity", rx, |g, x| {
        g.resize(x, 10, 12, ResizeMode::Disparity)
    }));

    let wf = u([2, 3, 5, 8], -1.0, 1.0);
    let wd = smooth_disparity([2, 1, 5, 8], &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
    {
        let d = wd.clone();
        cases.push(case("warp_by_disparity", "features", wf.clone(), move |g, f| {
            let d = g.constant(d.clone())?;
            g.warp(f, d)
        }));
        let f0 = wf.clone();
        cases.push(case("warp_by_disparity", "disparity", wd.clone(), move |g, d| {
            let f = g.constant(f0.clone())?;
            g.warp(f, d)
        }));
    }

    // Correlation.
    let (cl, cr) = (u([2, 4, 5, 9], -1.0, 1.0), u([2, 4, 5, 9], -1.0, 1.0));
    {
        let r = cr.clone();
        cases.push(case("correlate", "left", cl.clone(), move |g, l| {
            let r = g.constant(r.clone())?;
            g.correlate(l, r, &[0, 1, 2, 3, 7])
        }));
        let l0 = cl.clone();
        cases.push(case("correlate", "right", cr, move |g, r| {
            let l = g.constant(l0.clone())?;
            g.correlate(l, r, &fmm_offsets())
        }));
    }

    // Mask-FMM at scale 1: scale-2 features 3x4, output 6x8, coarse 3x4.
    {
        let (c2, c1, cctx) = (3usize, 2usize, 4usize);
        let fl = u([1, c2, 3, 4], -1.0, 1.0);
        let fr = u([1, c2, 3, 4], -1.0, 1.0);
        let ctx = u([1, cctx, 3, 4], -1.0, 1.0);
        let dc = smooth_disparity([1, 1, 3, 4], &mut ChaCha8Rng::seed_from_u64(seed ^ 2)).map(|v| v * 0.5);
        let (t_w, t_b) = (u([c1, c2, 1, 1], -0.5, 0.5), u([c1, 1, 1, 1], -0.1, 0.1));
        let (th_w, th_b) = (u([1, cctx, 3, 3], -0.5, 0.5), u([1, 1, 1, 1], -0.1, 0.1));
        let (mu_w, mu_b) = (u([c1, cctx, 3, 3], -0.5, 0.5), u([c1, 1, 1, 1], -0.1, 0.1));
        let inputs = [fl, fr, dc, ctx, t_w, th_w, mu_w];
        let names = ["f_l", "f_r", "d_coarse", "context", "transform.weight", "theta.weight", "mu.weight"];
        for (slot, name) in names.iter().enumerate() {
            let all = inputs.clone();
            let biases = (t_b.clone(), th_b.clone(), mu_b.clone());
            cases.push(case("mask_fmm", name, inputs[slot].clone(), move |g, x| {
                let mut v = Vec::with_capacity(all.len());
                for (i, t) in all.iter().enumerate() {
                    v.push(if i == slot { x } else { g.constant(t.clone())? });
                }
                let weights = MaskFmmWeights {
                    transform: Some(weights_for(g, &all[4], &biases.0, Some(v[4]), 0)?),
                    theta: weights_for(g, &all[5], &biases.1, Some(v[5]), 1)?,
                    mu: weights_for(g, &all[6], &biases.2, Some(v[6]), 1)?,
                };
                let out = mask_fmm(g, v[0], v[1], v[2], v[3], 1, &weights, &fmm_offsets(), None)?;
                Ok(out.cost.scores)
            }));
        }
    }

    // Losses. Disparity errors stay inside (0.2, 0.6) px, clear of the
    // smooth-L1 transition at 1 px and of zero.
    {
        let gt = u([1, 1, 8, 6], 1.0, 5.0);
        let err = u([1, 1, 8, 6], 0.2, 0.6);
        let mut valid = Tensor::<f64>::ones([1, 1, 8, 6]);
        valid.data_mut()[5] = 0.0;
        let pred = Tensor::from_fn([1, 1, 8, 6], |b, c, y, x| gt.at(b, c, y, x) + err.at(b, c, y, x));
        let (gt1, v1) = (gt.clone(), valid.clone());
        cases.push(case("smooth_l1", "pred", pred, move |g, p| Ok(smooth_l1(g, p, &gt1, &v1)?.loss)));
    }
    {
        let (h, w) = (64, 64);
        let gt = u([1, 1, h, w], 4.0, 20.0);
        let err = u([1, 1, h, w], 0.2, 0.6);
        let valid = Tensor::<f64>::from_fn([1, 1, h, w], |_, _, y, x| if (x * 7 + y * 3) % 11 == 0 { 0.0 } else { 1.0 });
        let pred = Tensor::from_fn([1, 1, h, w], |b, c, y, x| gt.at(b, c, y, x) + err.at(b, c, y, x));
        let omega = [1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125];
        cases.push(case("supervised_total", "pred/scale0", pred, move |g, p| {
            let mut pyramid = vec![p];
            for s in 1..NUM_SCALES {
                pyramid.push(g.resize(p, h >> s, w >> s, ResizeMode::Disparity)?);
            }
            supervised_total(g, &pyramid, &gt, &valid, &omega)
        }));
    }

    // Photometric terms: left = right + 0.5 keeps `warped - left` negative.
    let (h, w) = (16, 16);
    let right = Tensor::<f64>::from_fn([1, 3, h, w], |_, c, y, x| {
        0.25 + 0.1 * ((0.7 * x as f64 + 0.3 * c as f64).sin() * (0.45 * y as f64).cos())
    });
    let left = right.map(|v| v + 0.5);
    let disp = smooth_disparity([1, 1, h, w], &mut ChaCha8Rng::seed_from_u64(seed ^ 3));
    let cfg = UnsupLossConfig::default();
    {
        let (l, r) = (left.clone(), right.clone());
        cases.push(case("photometric", "disparity", disp.clone(), move |g, d| {
            let lv = g.constant(l.clone())?;
            let rv = g.constant(r.clone())?;
            photometric_loss(g, lv, rv, d, 0, &cfg)
        }));
        let (l, d0) = (left.clone(), disp.clone());
        cases.push(case("photometric", "right", right.clone(), move |g, r| {
            let lv = g.constant(l.clone())?;
            let dv = g.constant(d0.clone())?;
            photometric_loss(g, lv, r, dv, 0, &cfg)
        }));
        let l = left.clone();
        cases.push(case("smoothness", "disparity", disp.clone(), move |g, d| {
            let lv = g.constant(l.clone())?;
            smoothness_loss(g, d, lv)
        }));
        let (l, r) = (left, right);
        cases.push(case("unsupervised_total", "disparity/scale0", disp, move |g, d| {
            let lv = g.constant(l.clone())?;
            let rv = g.constant(r.clone())?;
            let mut pyramid = vec![d];
            for s in 1..cfg.num_scales {
                pyramid.push(g.resize(d, h >> s, w >> s, ResizeMode::Disparity)?);
            }
            Ok(unsupervised_total(g, &pyramid, lv, rv, &cfg)?.total)
        }));
    }
    cases
}

/// Checks every differentiable operator and loss against central
/// differences in `f64`, one entry per (operator, input) pair.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    build_cases(seed)
        .into_iter()
        .map(|c| {
            let err = grad_check(&c.f, &c.x, SUITE_EPSILON)?;
            Ok(SuiteEntry {
                op: c.op,
                input: c.input,
                coords: c.x.len(),
                max_rel_error: err,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let err = grad_check(|_, v| Ok(v), &x, DEFAULT_EPSILON).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // Detaching the input hides the dependence from the tape.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform([1, 1, 2, 2], 0.5, 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let detached = g.constant(g.value(v).clone())?;
                g.square(detached)
            },
            &x,
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn catches_a_gradient_off_by_a_factor() {
        // d/dx of mean(x^2) is 2x/N; a loss that is mean(x^2) but whose
        // tape sees only half of it must fail even though gradients are tiny.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([1, 1, 16, 16], 0.5, 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let sq = g.square(v)?;
                let half = g.mul_scalar(sq, 0.5)?;
                let hidden = g.constant(g.value(half).clone())?;
                let total = g.add(half, hidden)?;
                g.mean(total)
            },
            &x,
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn operator_suite_passes() {
        let entries = run_suite(7).unwrap();
        assert!(entries.len() >= 20);
        for e in &entries {
            assert!(e.passed(), "{} wrt {}: {:e}", e.op, e.input, e.max_rel_error);
        }
    }
}
