//! First-order optimizers over named parameter maps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Params = BTreeMap<String, Tensor>;

fn check(name: &str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "parameter {name} has shape {:?} but gradient {:?}",
            p.shape(),
            g.shape()
        )));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite(format!("gradient of parameter {name}")));
    }
    Ok(())
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            check(name, p, g)?;
            let v = self.velocity.entry(name.clone());
            let first = matches!(v, std::collections::btree_map::Entry::Vacant(_));
            let v = v.or_insert_with(|| vec![0.0; g.len()]);
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + self.weight_decay * *pi;
                *vi = if first || self.momentum == 0.0 { d } else { self.momentum * *vi + d };
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, AdamSlot>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, state: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            check(name, p, g)?;
            let s = self
                .state
                .entry(name.clone())
                .or_insert_with(|| AdamSlot { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
            s.t += 1;
            let c1 = 1.0 - self.beta1.powi(s.t);
            let c2 = 1.0 - self.beta2.powi(s.t);
            for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let d = gi + self.weight_decay * *pi;
                s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * d;
                s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * d * d;
                let mhat = s.m[i] / c1;
                let vhat = s.v[i] / c2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn build(&self) -> Optimizer {
        match *self {
            Self::Sgd { momentum, weight_decay } => Optimizer::Sgd(Sgd::new(momentum, weight_decay)),
            Self::Adam { beta1, beta2, eps, weight_decay } => Optimizer::Adam(Adam::new(beta1, beta2, eps, weight_decay)),
        }
    }
}

pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        match self {
            Self::Sgd(o) => o.step(params, grads, lr),
            Self::Adam(o) => o.step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> Params {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = one("w", 1.0);
        Sgd::new(0.0, 0.0).step(&mut p, &one("w", 2.0), 0.1).unwrap();
        assert!((p["w"].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = one("w", 0.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut p, &one("w", 1.0), 0.1).unwrap();
        opt.step(&mut p, &one("w", 1.0), 0.1).unwrap();
        assert!((p["w"].data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_only() {
        let mut p = one("w", 1.0);
        Sgd::new(0.0, 0.5).step(&mut p, &one("w", 0.0), 0.1).unwrap();
        assert!((p["w"].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one("w", 1.0);
        Adam::new(0.9, 0.999, 1e-8, 0.0).step(&mut p, &one("w", 3.0), 0.01).unwrap();
        assert!((p["w"].data()[0] - 0.99).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one("enc.w", 1.0);
        let err = Sgd::new(0.0, 0.0).step(&mut p, &one("enc.w", f64::INFINITY), 0.1).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }
}
