//! SGD with momentum and weight decay, Adam, and the poly schedule.
//!
//! Updates never mutate a tensor: each step returns a fresh leaf.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// `floor + (base - floor) * (1 - t/T)^power` with `floor = base * floor_ratio`;
/// `t >= T` gives the floor.
pub fn poly_lr(base: f64, t: usize, total: usize, power: f64, floor_ratio: f64) -> f64 {
    let floor = base * floor_ratio;
    if t >= total {
        return floor;
    }
    floor + (base - floor) * (1.0 - t as f64 / total as f64).powf(power)
}

fn num<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// `v <- momentum * v + (g + wd * p)`; `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Element> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Returns the updated parameter; parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, name: &str, p: &Tensor<T>, lr: f64) -> Result<Tensor<T>> {
        let Some(g) = p.grad() else {
            return Ok(p.clone());
        };
        let (mu, wd, lr) = (num::<T>(self.momentum), num::<T>(self.weight_decay), num::<T>(lr));
        let data = p.data();
        let buf = self.velocity.entry(name.to_string());
        let fresh = matches!(buf, std::collections::btree_map::Entry::Vacant(_));
        let v = buf.or_insert_with(|| vec![T::zero(); data.len()]);
        let mut out = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let d = g[i] + wd * data[i];
            v[i] = if fresh { d } else { mu * v[i] + d };
            out.push(data[i] - lr * v[i]);
        }
        Tensor::param(p.shape(), out)
    }
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimizer step,
    /// before updating the parameters of that step.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn step(&mut self, name: &str, p: &Tensor<T>, lr: f64) -> Result<Tensor<T>> {
        let Some(g) = p.grad() else {
            return Ok(p.clone());
        };
        let t = self.steps.max(1) as i32;
        let (b1, b2) = (num::<T>(self.beta1), num::<T>(self.beta2));
        let one = T::one();
        let c1 = num::<T>(1.0 - self.beta1.powi(t));
        let c2 = num::<T>(1.0 - self.beta2.powi(t));
        let (lr, eps) = (num::<T>(lr), num::<T>(self.eps));
        let data = p.data();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); data.len()]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); data.len()]);
        let mut out = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            out.push(data[i] - lr * mh / (vh.sqrt() + eps));
        }
        Tensor::param(p.shape(), out)
    }
}
