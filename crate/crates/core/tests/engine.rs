//! Tensor engine oracles: direct loop implementations compared against the
//! optimized kernels, adjoint identities and finite-difference checks.

use esnet::gradcheck::{grad_check, SUITE_EPSILON};
use esnet::losses::{supervised_total, SupervisedLossConfig};
use esnet::network::{Network, NetworkConfig, Variant};
use esnet::{Graph, ResizeMode, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c_in, h, wd] = x.shape().dims();
    let [c_out, _, k, _] = w.shape().dims();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn([n, c_out, oh, ow], |bi, co, oy, ox| {
        let mut acc = b.at(co, 0, 0, 0);
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at(bi, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

fn run1(f: impl Fn(&mut Graph<f64>) -> esnet::Result<esnet::Var>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut r = rng(11);
    let x = Tensor::<f64>::uniform([2, 3, 8, 8], -1.0, 1.0, &mut r);
    let w = Tensor::<f64>::uniform([4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::uniform([4, 1, 1, 1], -1.0, 1.0, &mut r);
    for (stride, pad) in [(2, 1), (1, 1), (1, 0), (2, 0)] {
        let got = run1(|g| {
            let (xv, wv, bv) = (g.constant(x.clone())?, g.constant(w.clone())?, g.constant(b.clone())?);
            g.conv2d(xv, wv, Some(bv), stride, pad)
        });
        let want = conv_oracle(&x, &w, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) <= 1e-5, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv_transpose_of_ones() {
    // The adjoint of a 2x2 stride-2 convolution scatters each input value
    // over its own 2x2 block.
    let out = run1(|g| {
        let x = g.constant(Tensor::ones([1, 1, 2, 2]))?;
        let w = g.constant(Tensor::ones([1, 1, 2, 2]))?;
        g.conv_transpose2d(x, w, None, 2, 0)
    });
    assert_eq!(out.shape().dims(), [1, 1, 4, 4]);
    assert!(out.data().iter().all(|&v| v == 1.0));

    // Same thing through the gradient of conv2d applied to a ones input.
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros([1, 1, 4, 4])).unwrap();
    let w = g.constant(Tensor::ones([1, 1, 2, 2])).unwrap();
    let y = g.conv2d(x, w, None, 2, 0).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), out);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_transpose_is_adjoint_of_conv(seed in any::<u64>(), stride in 1usize..3, pad in 0usize..2, k in 1usize..4) {
        let mut r = rng(seed);
        // Sizes where the strided windows tile the padded input exactly, so
        // the transposed output has the input's shape.
        let (h, wd) = (stride * 4 + k - 2 * pad, stride * 5 + k - 2 * pad);
        let x = Tensor::<f64>::uniform([2, 3, h, wd], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::uniform([4, 3, k, k], -1.0, 1.0, &mut r);
        let y_shape = run1(|g| {
            let (xv, wv) = (g.constant(x.clone())?, g.constant(w.clone())?);
            g.conv2d(xv, wv, None, stride, pad)
        }).shape();
        let y = Tensor::<f64>::uniform(y_shape, -1.0, 1.0, &mut r);
        let ax = run1(|g| {
            let (xv, wv) = (g.constant(x.clone())?, g.constant(w.clone())?);
            g.conv2d(xv, wv, None, stride, pad)
        });
        // conv_transpose2d takes (C_in, C_out, k, k): the conv weight as is.
        let aty = run1(|g| {
            let (yv, wv) = (g.constant(y.clone())?, g.constant(w.clone())?);
            g.conv_transpose2d(yv, wv, None, stride, pad)
        });
        prop_assert_eq!(aty.shape(), x.shape());
        let lhs = ax.dot(&y);
        let rhs = x.dot(&aty);
        prop_assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn resize_matches_per_pixel_formula() {
    let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let out = run1(|g| {
        let v = g.constant(x.clone())?;
        g.resize(v, 4, 4, ResizeMode::Image)
    });
    let coord = |i: usize| ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
    for oy in 0..4 {
        for ox in 0..4 {
            let (sy, sx) = (coord(oy), coord(ox));
            let want = (1.0 - sy) * ((1.0 - sx) * 0.0 + sx * 1.0) + sy * ((1.0 - sx) * 2.0 + sx * 3.0);
            assert!((out.at(0, 0, oy, ox) - want).abs() <= 1e-6);
        }
    }
    let d = run1(|g| {
        let v = g.constant(x.clone())?;
        g.resize(v, 4, 4, ResizeMode::Disparity)
    });
    assert!(d.max_abs_diff(&out.map(|v| v * 2.0)) <= 1e-12);
}

#[test]
fn concat_backward_routes_slices() {
    let mut r = rng(5);
    let other = Tensor::<f64>::uniform([2, 3, 3, 4], -1.0, 1.0, &mut r);
    let x = Tensor::<f64>::uniform([2, 2, 3, 4], -1.0, 1.0, &mut r);
    let err = grad_check(
        move |g, v| {
            let o = g.constant(other.clone())?;
            let c = g.concat_channels(&[o, v, o])?;
            g.square(c)
        },
        &x,
        SUITE_EPSILON,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn network_parameter_gradients_match_finite_differences() {
    // One coordinate per parameter tensor of a tiny ESNet, full forward plus
    // supervised loss, in f64.
    let net = Network::new(NetworkConfig::tiny(Variant::EsNet)).unwrap();
    let mut params = net.init_params::<f64>(3);
    let mut r = rng(9);
    let left = Tensor::<f64>::uniform([1, 3, 64, 64], -1.0, 1.0, &mut r);
    let right = Tensor::<f64>::uniform([1, 3, 64, 64], -1.0, 1.0, &mut r);
    let gt = Tensor::<f64>::uniform([1, 1, 64, 64], 2.0, 10.0, &mut r);
    let valid = Tensor::<f64>::ones([1, 1, 64, 64]);
    let omega = SupervisedLossConfig::default().omega(0);

    let loss_of = |params: &esnet::ParamStore<f64>, trainable: bool| {
        let mut g = Graph::new();
        let p = if trainable { params.bind(&mut g) } else { params.bind_frozen(&mut g) }.unwrap();
        let (l, rv) = (g.constant(left.clone()).unwrap(), g.constant(right.clone()).unwrap());
        let out = net.forward(&mut g, &p, l, rv).unwrap();
        let loss = supervised_total(&mut g, &out.pyramid.maps, &gt, &valid, &omega).unwrap();
        let v = g.value(loss).item();
        let grads = trainable.then(|| {
            g.backward(loss).unwrap();
            params.gradients(&g, &p)
        });
        (v, grads)
    };

    let (_, grads) = loss_of(&params, true);
    let grads = grads.unwrap();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let eps = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (i, name) in names.iter().enumerate() {
        let id = params.id_of(name).unwrap();
        let len = params.get(id).len();
        // The coordinate with the largest analytic gradient is the best
        // conditioned one to compare.
        let k = (0..len)
            .max_by(|&a, &b| grads[i].data()[a].abs().total_cmp(&grads[i].data()[b].abs()))
            .unwrap();
        let a = grads[i].data()[k];
        if a.abs() < 1e-8 {
            continue;
        }
        let orig = params.get(id).data()[k];
        params.get_mut(id).data_mut()[k] = orig + eps;
        let plus = loss_of(&params, false).0;
        params.get_mut(id).data_mut()[k] = orig - eps;
        let minus = loss_of(&params, false).0;
        params.get_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs());
        checked += 1;
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    assert!(checked * 10 >= names.len() * 9, "only {checked} of {} tensors reached", names.len());
    assert!(worst.0 <= 1e-4, "worst {} at {}", worst.0, worst.1);
}
