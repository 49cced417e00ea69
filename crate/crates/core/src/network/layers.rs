use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::matching::ConvWeights;
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Zeros,
}

/// Parameter layout recorded while an architecture is assembled. Ids are
/// handed out in insertion order, matching [`ParamStore`] indices.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    entries: Vec<(String, Shape, Init)>,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Shape, init: Init) -> ParamId {
        self.entries.push((name, shape, init));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, s, _)| s.numel()).sum()
    }

    pub fn shapes(&self) -> impl Iterator<Item = (&str, Shape)> {
        self.entries.iter().map(|(n, s, _)| (n.as_str(), *s))
    }

    /// He-style fan-in scaled weights, zero biases.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        for (name, shape, init) in &self.entries {
            let t = match init {
                Init::He(fan_in) => Tensor::randn(*shape, (2.0 / *fan_in as f64).sqrt(), rng),
                Init::Zeros => Tensor::zeros(*shape),
            };
            store.insert(name.clone(), t).expect("layout names are unique");
        }
        store
    }

    /// Does `store` hold exactly this layout?
    pub fn matches<T: Real>(&self, store: &ParamStore<T>) -> bool {
        store.len() == self.entries.len()
            && store
                .iter()
                .zip(&self.entries)
                .all(|((n, t), (en, es, _))| n == en && t.shape() == *es)
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Conv {
        let weight = self.push(format!("{name}.weight"), Shape::new(c_out, c_in, k, k), Init::He(c_in * k * k));
        let bias = self.push(format!("{name}.bias"), Shape::new(c_out, 1, 1, 1), Init::Zeros);
        Conv {
            weight,
            bias,
            stride,
            padding: k / 2,
            transposed: false,
        }
    }

    /// 4x4 stride-2 transposed convolution doubling the spatial size.
    pub fn up_conv(&mut self, name: &str, c_in: usize, c_out: usize) -> Conv {
        let weight = self.push(format!("{name}.weight"), Shape::new(c_in, c_out, 4, 4), Init::He(c_in * 4));
        let bias = self.push(format!("{name}.bias"), Shape::new(c_out, 1, 1, 1), Init::Zeros);
        Conv {
            weight,
            bias,
            stride: 2,
            padding: 1,
            transposed: true,
        }
    }

    pub fn res_block(&mut self, name: &str, c: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, 1),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, 1),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl Conv {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), p.var(self.bias));
        if self.transposed {
            g.conv_transpose2d(x, w, Some(b), self.stride, self.padding)
        } else {
            g.conv2d(x, w, Some(b), self.stride, self.padding)
        }
    }

    pub fn forward_act<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        g.leaky_relu(y)
    }

    pub fn bind(&self, p: &BoundParams) -> ConvWeights {
        ConvWeights {
            weight: p.var(self.weight),
            bias: p.var(self.bias),
            padding: self.padding,
        }
    }
}

/// Two 3x3 convolutions with an identity shortcut.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.conv1.forward_act(g, p, x)?;
        let h = self.conv2.forward(g, p, h)?;
        let y = g.add(x, h)?;
        g.leaky_relu(y)
    }
}

/// Downsampling (or stem) convolution followed by residual blocks.
#[derive(Clone, Debug)]
pub struct Stage {
    pub entry: Conv,
    pub blocks: Vec<ResBlock>,
}

impl Stage {
    pub fn new(layout: &mut ParamLayout, name: &str, c_in: usize, c_out: usize, stride: usize, blocks: usize) -> Self {
        let entry = layout.conv(&format!("{name}.entry"), c_in, c_out, 3, stride);
        let blocks = (0..blocks)
            .map(|i| layout.res_block(&format!("{name}.res{i}"), c_out))
            .collect();
        Stage { entry, blocks }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let mut h = self.entry.forward_act(g, p, x)?;
        for b in &self.blocks {
            h = b.forward(g, p, h)?;
        }
        Ok(h)
    }
}
