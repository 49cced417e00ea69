//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every executed operation in order. Values are
//! immutable once pushed; [`Graph::backward`] walks the tape once in reverse,
//! accumulating gradients additively into every node reachable from the loss
//! that requires them. A graph is single-use: a second `backward` is an
//! error, which keeps stale gradients from being mixed with fresh ones.

use crate::error::{Error, Result};
use crate::kernels::{conv, sampling};
use crate::tensor::{lit, Real, Shape, Tensor};

/// Negative slope of [`Graph::leaky_relu`].
pub const LEAKY_SLOPE: f64 = 0.1;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Exp,
    Square,
    Sigmoid,
    LeakyRelu,
    /// `x^2/2` for `|x| < 1`, `|x| - 1/2` otherwise.
    SmoothL1,
}

/// How [`Graph::resize`] treats values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    /// Plain interpolation.
    Image,
    /// Values are horizontal pixel offsets and are rescaled by the width
    /// ratio so they stay in output-pixel units.
    Disparity,
}

/// Operation tag, used for topology inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    Resize,
    Binary,
    Scalar,
    Unary,
    Concat,
    Correlate,
    Warp,
    Sum,
    Mean,
    MeanChannels,
    DiffX,
    DiffY,
    AvgPool3,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Resize {
        input: Var,
        multiplier: T,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    AddScalar(Var),
    MulScalar(Var, T),
    Unary(UnaryKind, Var),
    Concat(Vec<Var>),
    Correlate {
        left: Var,
        right: Var,
        offsets: Vec<i32>,
    },
    Warp {
        features: Var,
        disparity: Var,
    },
    Sum(Var),
    Mean(Var),
    MeanChannels(Var),
    DiffX(Var),
    DiffY(Var),
    AvgPool3(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Resize { .. } => OpKind::Resize,
            Op::Binary { .. } => OpKind::Binary,
            Op::AddScalar(_) | Op::MulScalar(..) => OpKind::Scalar,
            Op::Unary(..) => OpKind::Unary,
            Op::Concat(_) => OpKind::Concat,
            Op::Correlate { .. } => OpKind::Correlate,
            Op::Warp { .. } => OpKind::Warp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanChannels(_) => OpKind::MeanChannels,
            Op::DiffX(_) => OpKind::DiffX,
            Op::DiffY(_) => OpKind::DiffY,
            Op::AvgPool3(_) => OpKind::AvgPool3,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::ConvTranspose2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Correlate { left, right, .. } => vec![*left, *right],
            Op::Warp {
                features,
                disparity,
            } => vec![*features, *disparity],
            Op::Concat(v) => v.clone(),
            Op::Resize { input, .. } => vec![*input],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Unary(_, a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanChannels(a)
            | Op::DiffX(a)
            | Op::DiffY(a)
            | Op::AvgPool3(a) => vec![*a],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of executed tensor operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations of the given kind.
    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, available after [`Graph::backward`].
    /// `None` if `v` does not require grad or is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            out,
            "conv2d",
        )
    }

    /// Transposed convolution; `weight` is `(C_in, C_out, k, k)`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv::conv_transpose2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        self.push(
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            out,
            "conv_transpose2d",
        )
    }

    /// Bilinear resize (half-pixel centres, border clamp).
    pub fn resize(&mut self, input: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "bilinear_resize target {out_h}x{out_w} must be at least 1x1"
            )));
        }
        let s = self.shape(input);
        if s.height == 0 || s.width == 0 {
            return Err(Error::shape("bilinear_resize", format!("empty input {s}")));
        }
        let multiplier = match mode {
            ResizeMode::Image => T::one(),
            ResizeMode::Disparity => lit::<T>(out_w as f64 / s.width as f64),
        };
        let out = sampling::resize_forward(self.value(input), out_h, out_w, multiplier);
        self.push(Op::Resize { input, multiplier }, out, "bilinear_resize")
    }

    /// Pointwise `a (op) b`. `b` may have one channel, in which case it is
    /// repeated along `a`'s channel axis.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let broadcast = sa != sb;
        if broadcast && (sb.channels != 1 || sb.with_channels(sa.channels) != sa) {
            return Err(Error::shape(
                "elementwise",
                format!("cannot broadcast {sb} against {sa}"),
            ));
        }
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let av = self.value(a);
        let bv = self.value(b);
        let out = if broadcast {
            let plane = sa.plane();
            let mut data = Vec::with_capacity(sa.numel());
            for bi in 0..sa.batch {
                let bp = bv.plane(bi, 0);
                for c in 0..sa.channels {
                    data.extend(av.plane(bi, c).iter().zip(bp).map(|(&x, &y)| f(x, y)));
                }
            }
            debug_assert_eq!(data.len(), plane * sa.batch * sa.channels);
            Tensor::from_vec(sa, data)?
        } else {
            Tensor::from_vec(
                sa,
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?
        };
        self.push(Op::Binary { kind, a, b }, out, "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        self.push(Op::AddScalar(a), out, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(Op::MulScalar(a, s), out, "mul_scalar")
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let slope = lit::<T>(LEAKY_SLOPE);
        let half = lit::<T>(0.5);
        let out = self.value(a).map(|x| match kind {
            UnaryKind::Neg => -x,
            UnaryKind::Abs => x.abs(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Square => x * x,
            UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
            UnaryKind::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * slope
                }
            }
            UnaryKind::SmoothL1 => {
                if x.abs() < T::one() {
                    x * x * half
                } else {
                    x.abs() - half
                }
            }
        });
        self.push(Op::Unary(kind, a), out, "elementwise")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::LeakyRelu, a)
    }

    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::SmoothL1, a)
    }

    /// Concatenates along the channel axis, preserving order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels of empty list".into()))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.batch != s0.batch || s.height != s0.height || s.width != s0.width {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{s} does not match batch/spatial size of {s0}"),
                ));
            }
            channels += s.channels;
        }
        let out_shape = s0.with_channels(channels);
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..s0.batch {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape().channels * t.shape().plane();
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::from_vec(out_shape, data)?;
        self.push(Op::Concat(inputs.to_vec()), out, "concat_channels")
    }

    /// Correlation cost volume over integer horizontal offsets.
    pub fn correlate(&mut self, left: Var, right: Var, offsets: &[i32]) -> Result<Var> {
        let sl = self.shape(left);
        let sr = self.shape(right);
        if sl != sr {
            return Err(Error::shape("correlate", format!("left {sl} vs right {sr}")));
        }
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("correlate needs at least one offset".into()));
        }
        if sl.channels == 0 {
            return Err(Error::shape("correlate", "features have zero channels"));
        }
        let out = sampling::correlate_forward(self.value(left), self.value(right), offsets);
        self.push(
            Op::Correlate {
                left,
                right,
                offsets: offsets.to_vec(),
            },
            out,
            "correlate",
        )
    }

    /// Samples `features` at `x - disparity(x, y)` with linear interpolation
    /// along rows, clamping the source coordinate to the border.
    pub fn warp(&mut self, features: Var, disparity: Var) -> Result<Var> {
        let sf = self.shape(features);
        let sd = self.shape(disparity);
        if sd != sf.with_channels(1) {
            return Err(Error::shape(
                "warp_by_disparity",
                format!("disparity {sd} must be (B, 1, H, W) matching features {sf}"),
            ));
        }
        if sf.width == 0 {
            return Err(Error::shape("warp_by_disparity", "zero-width features"));
        }
        let out = sampling::warp_forward(self.value(features), self.value(disparity));
        self.push(
            Op::Warp {
                features,
                disparity,
            },
            out,
            "warp_by_disparity",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "mean of empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        self.push(Op::Mean(a), out, "mean")
    }

    /// Mean over the channel axis, giving `(B, 1, H, W)`.
    pub fn mean_channels(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        let inv = T::one() / T::from_usize(s.channels).unwrap();
        let out = Tensor::from_fn(s.with_channels(1), |b, _, y, x| {
            (0..s.channels).map(|c| t.at(b, c, y, x)).sum::<T>() * inv
        });
        self.push(Op::MeanChannels(a), out, "mean_channels")
    }

    /// Forward difference along x: `out[.., x] = in[.., x+1] - in[.., x]`.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.width < 2 {
            return Err(Error::shape("diff_x", format!("width {} < 2", s.width)));
        }
        let out = Tensor::from_fn(s.with_spatial(s.height, s.width - 1), |b, c, y, x| {
            t.at(b, c, y, x + 1) - t.at(b, c, y, x)
        });
        self.push(Op::DiffX(a), out, "diff_x")
    }

    /// Forward difference along y.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.height < 2 {
            return Err(Error::shape("diff_y", format!("height {} < 2", s.height)));
        }
        let out = Tensor::from_fn(s.with_spatial(s.height - 1, s.width), |b, c, y, x| {
            t.at(b, c, y + 1, x) - t.at(b, c, y, x)
        });
        self.push(Op::DiffY(a), out, "diff_y")
    }

    /// Same-size 3x3 box filter with reflection padding.
    pub fn avg_pool3(&mut self, a: Var) -> Result<Var> {
        let out = sampling::avg_pool3_forward(self.value(a));
        self.push(Op::AvgPool3(a), out, "avg_pool3")
    }

    /// Populates gradients of every `requires_grad` node reachable from
    /// `loss`. Consumes the graph for further backward passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let s = self.shape(loss);
        if !s.is_scalar() {
            return Err(Error::NotScalar(s));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, gv) in contributions {
                if gv.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                let node = &mut self.nodes[v.0];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(gv),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each input requiring grad.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let grads = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *padding,
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                );
                self.collect_conv(&mut out, *input, *weight, *bias, grads);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let grads = conv::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *padding,
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                );
                self.collect_conv(&mut out, *input, *weight, *bias, grads);
            }
            Op::Resize { input, multiplier } => {
                let so = node.value.shape();
                out.push((
                    *input,
                    sampling::resize_backward(self.shape(*input), g, so.height, so.width, *multiplier),
                ));
            }
            Op::Binary { kind, a, b } => {
                let av = self.value(*a).data();
                let bvt = self.value(*b);
                let sa = self.shape(*a);
                let broadcast = bvt.shape() != sa;
                let plane = sa.plane();
                // b value aligned with a's flat index
                let b_at = |idx: usize| -> T {
                    if broadcast {
                        let bi = idx / (sa.channels * plane);
                        bvt.data()[bi * plane + idx % plane]
                    } else {
                        bvt.data()[idx]
                    }
                };
                if self.needs(*a) {
                    let ga: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(k, &gv)| gv * b_at(k)).collect(),
                        BinaryKind::Div => g.iter().enumerate().map(|(k, &gv)| gv / b_at(k)).collect(),
                    };
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); bvt.len()];
                    for (k, &gv) in g.iter().enumerate() {
                        let local = match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * av[k],
                            BinaryKind::Div => {
                                let bv = b_at(k);
                                -gv * av[k] / (bv * bv)
                            }
                        };
                        let dst = if broadcast {
                            let bi = k / (sa.channels * plane);
                            bi * plane + k % plane
                        } else {
                            k
                        };
                        gb[dst] += local;
                    }
                    out.push((*b, gb));
                }
            }
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::MulScalar(a, s) => out.push((*a, g.iter().map(|&v| v * *s).collect())),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let slope = lit::<T>(LEAKY_SLOPE);
                let two = lit::<T>(2.0);
                let ga = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| {
                        let d = match kind {
                            UnaryKind::Neg => -T::one(),
                            UnaryKind::Abs => {
                                if xv > T::zero() {
                                    T::one()
                                } else if xv < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::Exp => yv,
                            UnaryKind::Square => two * xv,
                            UnaryKind::Sigmoid => yv * (T::one() - yv),
                            UnaryKind::LeakyRelu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    slope
                                }
                            }
                            UnaryKind::SmoothL1 => xv.max(-T::one()).min(T::one()),
                        };
                        gv * d
                    })
                    .collect();
                out.push((*a, ga));
            }
            Op::Concat(inputs) => {
                let batch = node.value.shape().batch;
                let total_per = node.value.shape().channels * node.value.shape().plane();
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let per = s.channels * s.plane();
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(s.numel());
                        for b in 0..batch {
                            let start = b * total_per + offset;
                            gv.extend_from_slice(&g[start..start + per]);
                        }
                        out.push((v, gv));
                    }
                    offset += per;
                }
            }
            Op::Correlate {
                left,
                right,
                offsets,
            } => {
                let (gl, gr) =
                    sampling::correlate_backward(self.value(*left), self.value(*right), offsets, g);
                if self.needs(*left) {
                    out.push((*left, gl));
                }
                if self.needs(*right) {
                    out.push((*right, gr));
                }
            }
            Op::Warp {
                features,
                disparity,
            } => {
                let (gf, gd) = sampling::warp_backward(self.value(*features), self.value(*disparity), g);
                if self.needs(*features) {
                    out.push((*features, gf));
                }
                if self.needs(*disparity) {
                    out.push((*disparity, gd));
                }
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                out.push((*a, vec![g[0] / T::from_usize(n).unwrap(); n]));
            }
            Op::MeanChannels(a) => {
                let s = self.shape(*a);
                let inv = T::one() / T::from_usize(s.channels).unwrap();
                let plane = s.plane();
                let mut ga = Vec::with_capacity(s.numel());
                for b in 0..s.batch {
                    for _ in 0..s.channels {
                        ga.extend(g[b * plane..(b + 1) * plane].iter().map(|&v| v * inv));
                    }
                }
                out.push((*a, ga));
            }
            Op::DiffX(a) => {
                let s = self.shape(*a);
                let mut ga = vec![T::zero(); s.numel()];
                let wo = s.width - 1;
                for (row, grow) in g.chunks(wo).enumerate() {
                    let base = row * s.width;
                    for (x, &gv) in grow.iter().enumerate() {
                        ga[base + x + 1] += gv;
                        ga[base + x] -= gv;
                    }
                }
                out.push((*a, ga));
            }
            Op::DiffY(a) => {
                let s = self.shape(*a);
                let mut ga = vec![T::zero(); s.numel()];
                let ho = s.height - 1;
                let w = s.width;
                for (p, gp) in g.chunks(ho * w).enumerate() {
                    let base = p * s.plane();
                    for (k, &gv) in gp.iter().enumerate() {
                        ga[base + k + w] += gv;
                        ga[base + k] -= gv;
                    }
                }
                out.push((*a, ga));
            }
            Op::AvgPool3(a) => out.push((*a, sampling::avg_pool3_backward(self.shape(*a), g))),
        }
        out
    }

    fn collect_conv(
        &self,
        out: &mut Vec<(Var, Vec<T>)>,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        grads: conv::ConvGrads<T>,
    ) {
        if self.needs(input) {
            out.push((input, grads.input.into_data()));
        }
        if self.needs(weight) {
            out.push((weight, grads.weight.into_data()));
        }
        if let Some(b) = bias {
            if self.needs(b) {
                out.push((b, grads.bias));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([1, 2, 2, 3], |_, c, y, x| (c + y + x) as f64 - 1.5)).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut g = Graph::<f64>::new();
        let data = Tensor::from_fn([2, 1, 3, 2], |b, _, y, x| (b * 7 + y * 3 + x) as f64 * 0.37 - 2.0);
        let x = g.param(data.clone()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.mul_scalar(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().max_abs_diff(&data) < 1e-12);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones([1, 1, 1, 1])).unwrap();
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones([1, 1, 2, 1])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec([1, 1, 1, 2], vec![0.0, -2.0]).unwrap()).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let l = g.leaky_relu(x).unwrap();
        assert!((g.value(l).data()[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn ones_mask_broadcast_is_identity() {
        let mut g = Graph::<f32>::new();
        let f = Tensor::from_fn([2, 3, 2, 2], |b, c, y, x| (b * 100 + c * 10 + y * 2 + x) as f32);
        let fv = g.constant(f.clone()).unwrap();
        let m = g.constant(Tensor::ones([2, 1, 2, 2])).unwrap();
        let out = g.mul(fv, m).unwrap();
        assert_eq!(g.value(out), &f);
        let bad = g.constant(Tensor::ones([2, 2, 2, 2])).unwrap();
        assert!(g.mul(fv, bad).is_err());
    }

    #[test]
    fn concat_slices_match_inputs() {
        let mut g = Graph::<f32>::new();
        let a = Tensor::from_fn([2, 2, 2, 3], |b, c, y, x| (b * 1000 + c * 100 + y * 10 + x) as f32);
        let b = Tensor::from_fn([2, 3, 2, 3], |b, c, y, x| -((b * 1000 + c * 100 + y * 10 + x) as f32));
        let av = g.constant(a.clone()).unwrap();
        let bv = g.constant(b.clone()).unwrap();
        let single = g.concat_channels(&[av]).unwrap();
        assert_eq!(g.value(single), &a);
        let cat = g.concat_channels(&[av, bv]).unwrap();
        let t = g.value(cat);
        assert_eq!(t.shape(), Shape::new(2, 5, 2, 3));
        for bi in 0..2 {
            for c in 0..5 {
                for y in 0..2 {
                    for x in 0..3 {
                        let expect = if c < 2 { a.at(bi, c, y, x) } else { b.at(bi, c - 2, y, x) };
                        assert_eq!(t.at(bi, c, y, x), expect);
                    }
                }
            }
        }
        let odd = g.constant(Tensor::ones([2, 1, 3, 3])).unwrap();
        assert!(g.concat_channels(&[av, odd]).is_err());
    }

    #[test]
    fn reused_tensor_accumulates() {
        // y = x*x + 3x through two uses of x; dy/dx = 2x + 3.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec([1, 1, 1, 3], vec![1.0, -0.5, 2.0]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let lin = g.mul_scalar(x, 3.0).unwrap();
        let y = g.add(sq, lin).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0, 2.0, 7.0]);
    }

    #[test]
    fn non_finite_surfaces_as_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones([1, 1, 1, 1])).unwrap();
        let z = g.constant(Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(matches!(g.div(a, z), Err(Error::NonFinite { .. })));
    }
}
