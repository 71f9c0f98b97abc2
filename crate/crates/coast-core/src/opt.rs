//! Optimizers. Segmentation parameters train with SGD + momentum under a poly
//! learning-rate schedule; discriminators use Adam. State is keyed by owner
//! and parameter name so interleaved steps over different owner subsets keep
//! their buffers.

use crate::autograd::Tape;
use crate::model::{ModelBundle, Owner, Staged};
use crate::Real;
use std::collections::BTreeMap;

fn grad_map(tape: &Tape, staged: &Staged) -> BTreeMap<String, Vec<Real>> {
    let mut map = BTreeMap::new();
    for (owner, name, id) in &staged.flat {
        if let Some(g) = tape.grad(*id) {
            map.insert(format!("{}/{}", owner.label(), name), g.to_vec());
        }
    }
    map
}

pub struct SgdMomentum {
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// Schedule horizon; 0 disables decay.
    pub total_iters: usize,
    velocity: BTreeMap<String, Vec<Real>>,
}

impl SgdMomentum {
    pub fn new(base_lr: f64, momentum: f64, poly_power: f64, total_iters: usize) -> Self {
        SgdMomentum { base_lr, momentum, poly_power, total_iters, velocity: BTreeMap::new() }
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.total_iters == 0 {
            return self.base_lr;
        }
        let frac = 1.0 - (iter.min(self.total_iters) as f64 / self.total_iters as f64);
        self.base_lr * frac.powf(self.poly_power)
    }

    /// Apply one step to every parameter whose owner passes the filter and
    /// which received a gradient on this tape.
    pub fn step(
        &mut self,
        bundle: &mut ModelBundle,
        staged: &Staged,
        tape: &Tape,
        include: impl Fn(Owner) -> bool,
        iter: usize,
    ) {
        let grads = grad_map(tape, staged);
        let lr = self.lr_at(iter) as Real;
        let momentum = self.momentum as Real;
        let velocity = &mut self.velocity;
        bundle.visit_params_mut(&mut |owner, name, t| {
            if !include(owner) {
                return;
            }
            let key = format!("{}/{}", owner.label(), name);
            if let Some(g) = grads.get(&key) {
                let v = velocity.entry(key).or_insert_with(|| vec![0.0; g.len()]);
                for i in 0..g.len() {
                    v[i] = momentum * v[i] + g[i];
                    t.values[i] -= lr * v[i];
                }
            }
        });
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<Real>>,
    v: BTreeMap<String, Vec<Real>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(
        &mut self,
        bundle: &mut ModelBundle,
        staged: &Staged,
        tape: &Tape,
        include: impl Fn(Owner) -> bool,
    ) {
        let grads = grad_map(tape, staged);
        self.t += 1;
        let b1 = self.beta1 as Real;
        let b2 = self.beta2 as Real;
        let bc1 = 1.0 - (self.beta1.powi(self.t as i32)) as Real;
        let bc2 = 1.0 - (self.beta2.powi(self.t as i32)) as Real;
        let lr = self.lr as Real;
        let eps = self.eps as Real;
        let (ms, vs) = (&mut self.m, &mut self.v);
        bundle.visit_params_mut(&mut |owner, name, t| {
            if !include(owner) {
                return;
            }
            let key = format!("{}/{}", owner.label(), name);
            if let Some(g) = grads.get(&key) {
                let m = ms.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
                let v = vs.entry(key).or_insert_with(|| vec![0.0; g.len()]);
                for i in 0..g.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    t.values[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        });
    }
}
