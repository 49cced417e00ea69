//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().map(|t| vec![T::zero(); t.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Zeroes the moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(T::zero()));
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {} does not match parameter {name} {}", g.shape(), p.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let (one_b1, one_b2) = (lit::<T>(1.0 - c.beta1), lit::<T>(1.0 - c.beta2));
        let step_size = lit::<T>(lr / bc1);
        let inv_sqrt_bc2 = lit::<T>(1.0 / bc2.sqrt());
        let eps = lit::<T>(c.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_vec([1, 1, 1, values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros([1, 1, 1, 3])], 1e-2).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = store(&[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = Tensor::from_vec([1, 1, 1, 2], vec![3.0, -0.25]).unwrap();
        adam.step(&mut p, &[g], 1e-3).unwrap();
        let x = p.by_name("x").unwrap().data();
        assert!((x[0] + 1e-3).abs() < 1e-9, "{}", x[0]);
        assert!((x[1] - 1e-3).abs() < 1e-9, "{}", x[1]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = store(&[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::zeros([1, 1, 1, 3])], 1e-3).is_err());
        assert!(adam.step(&mut p, &[], 1e-3).is_err());
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // loss = sum((x - c)^2 * a) with per-coordinate curvature a
        let target = [1.0, -0.75, 0.5, 0.2];
        let curv = [1.0, 4.0, 0.5, 10.0];
        let mut p = store(&[0.0; 4]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..500 {
            let mut g = Graph::<f64>::new();
            let bound = p.bind(&mut g).unwrap();
            let x = bound.var(p.id_of("x").unwrap());
            let c = g.constant(Tensor::from_vec([1, 1, 1, 4], target.to_vec()).unwrap()).unwrap();
            let a = g.constant(Tensor::from_vec([1, 1, 1, 4], curv.to_vec()).unwrap()).unwrap();
            let d = g.sub(x, c).unwrap();
            let sq = g.square(d).unwrap();
            let w = g.mul(sq, a).unwrap();
            let loss = g.sum(w).unwrap();
            g.backward(loss).unwrap();
            let grads = p.gradients(&g, &bound);
            adam.step(&mut p, &grads, 1e-2).unwrap();
        }
        let x = p.by_name("x").unwrap().data();
        for (xi, ti) in x.iter().zip(target) {
            assert!((xi - ti).abs() < 1e-2, "{xi} vs {ti}");
        }
    }
}
