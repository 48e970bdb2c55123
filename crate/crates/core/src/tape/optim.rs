//! First-order optimizers over [`ParamSet`] gradients.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::{Grads, ParamSet};

/// A stateful update rule applied to every parameter that received a
/// gradient. Parameters without gradients are left untouched.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamSet, grads: &Grads);
    /// Serializes moment buffers into `out` under `prefix` so training can
    /// resume mid-run from a checkpoint.
    fn export_state(&self, out: &mut ParamSet, prefix: &str);
    fn import_state(&mut self, src: &ParamSet, prefix: &str);
}

/// Stochastic gradient descent with classical momentum.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Array2<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.of_param(&name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *v = &*v * self.momentum + g;
            let p = params.get_mut(&name).unwrap();
            *p -= &(&*v * self.lr);
        }
    }

    fn export_state(&self, out: &mut ParamSet, prefix: &str) {
        for (name, v) in &self.velocity {
            out.insert(&format!("{prefix}.v.{name}"), v.clone());
        }
    }

    fn import_state(&mut self, src: &ParamSet, prefix: &str) {
        let lead = format!("{prefix}.v.");
        self.velocity.clear();
        for (name, arr) in src.iter() {
            if let Some(stripped) = name.strip_prefix(&lead) {
                self.velocity.insert(stripped.to_string(), arr.clone());
            }
        }
    }
}

/// Adam with bias-corrected first and second moments.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.of_param(&name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *v = &*v * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            let p = params.get_mut(&name).unwrap();
            *p -= &(m_hat / (v_hat.mapv(f64::sqrt) + self.eps) * self.lr);
        }
    }

    fn export_state(&self, out: &mut ParamSet, prefix: &str) {
        out.insert(&format!("{prefix}.t"), Array2::from_elem((1, 1), self.t as f64));
        for (name, arr) in &self.m {
            out.insert(&format!("{prefix}.m.{name}"), arr.clone());
        }
        for (name, arr) in &self.v {
            out.insert(&format!("{prefix}.v.{name}"), arr.clone());
        }
    }

    fn import_state(&mut self, src: &ParamSet, prefix: &str) {
        self.t = src
            .get(&format!("{prefix}.t"))
            .map(|a| a[(0, 0)] as u64)
            .unwrap_or(0);
        self.m.clear();
        self.v.clear();
        let m_lead = format!("{prefix}.m.");
        let v_lead = format!("{prefix}.v.");
        for (name, arr) in src.iter() {
            if let Some(stripped) = name.strip_prefix(&m_lead) {
                self.m.insert(stripped.to_string(), arr.clone());
            } else if let Some(stripped) = name.strip_prefix(&v_lead) {
                self.v.insert(stripped.to_string(), arr.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    /// Quadratic bowl: loss = mean((x - target)^2). Any sane optimizer should
    /// shrink it monotonically at small learning rates.
    fn quadratic_loss(params: &ParamSet, target: &Array2<f64>) -> (Tape, crate::tape::Var) {
        let mut tape = Tape::new();
        let x = tape.param(params, "x");
        let t = tape.leaf(target.clone());
        let d = tape.sub(x, t);
        let sq = tape.mul(d, d);
        let loss = tape.mean_all(sq);
        (tape, loss)
    }

    fn run(opt: &mut dyn Optimizer, steps: usize) -> Vec<f64> {
        let target = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let mut params = ParamSet::new();
        params.init_const("x", 2, 3, 1.7);
        let mut history = Vec::new();
        for _ in 0..steps {
            let (tape, loss) = quadratic_loss(&params, &target);
            history.push(tape.value(loss)[(0, 0)]);
            let grads = tape.backward(loss);
            opt.step(&mut params, &grads);
        }
        history
    }

    #[test]
    fn sgd_descends_quadratic() {
        let hist = run(&mut Sgd::new(0.1, 0.9), 60);
        assert!(hist.last().unwrap() < &(hist[0] * 1e-3), "history {hist:?}");
    }

    #[test]
    fn adam_descends_quadratic() {
        let hist = run(&mut Adam::new(0.05), 200);
        assert!(hist.last().unwrap() < &(hist[0] * 1e-3));
    }

    #[test]
    fn optimizer_state_round_trips_through_export() {
        let target = Array2::from_elem((1, 2), 0.0);
        let mut params = ParamSet::new();
        params.init_const("x", 1, 2, 1.0);
        let mut opt = Adam::new(0.05);
        for _ in 0..5 {
            let (tape, loss) = quadratic_loss(&params, &target);
            let grads = tape.backward(loss);
            opt.step(&mut params, &grads);
        }
        let mut state = ParamSet::new();
        opt.export_state(&mut state, "adam");

        // Continue two ways: original optimizer vs restored one.
        let mut restored = Adam::new(0.05);
        restored.import_state(&state, "adam");
        let mut params_a = params.clone();
        let mut params_b = params.clone();
        for _ in 0..5 {
            let (tape, loss) = quadratic_loss(&params_a, &target);
            let grads = tape.backward(loss);
            opt.step(&mut params_a, &grads);
            let (tape, loss) = quadratic_loss(&params_b, &target);
            let grads = tape.backward(loss);
            restored.step(&mut params_b, &grads);
        }
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn untouched_params_stay_fixed() {
        // A parameter that never enters the loss must not move.
        let mut params = ParamSet::new();
        params.init_const("x", 1, 1, 2.0);
        params.init_const("unused", 1, 1, 42.0);
        let mut tape = Tape::new();
        let x = tape.param(&params, "x");
        let sq = tape.mul(x, x);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let mut opt = Adam::new(0.1);
        opt.step(&mut params, &grads);
        assert_eq!(params.get("unused").unwrap()[(0, 0)], 42.0);
        assert_ne!(params.get("x").unwrap()[(0, 0)], 2.0);
    }
}
