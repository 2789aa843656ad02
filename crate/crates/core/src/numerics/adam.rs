//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, ParamStore};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            first: zeros(params),
            second: zeros(params),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.second
    }

    /// One update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(dim_err!(
                "adam over {} params with {} gradients and {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            ));
        }
        for ((_, name, p), g) in params.iter().zip(grads.iter()) {
            if !p.same_shape(g) {
                return Err(dim_err!(
                    "gradient for {name} is {}x{}, parameter is {}x{}",
                    g.rows(),
                    g.cols(),
                    p.rows(),
                    p.cols()
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads.iter())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{glorot_uniform_init, Rng, Tape};

    #[test]
    fn first_step_moves_by_learning_rate() {
        // f = θ², θ = 1 ⇒ g = 2; bias correction makes m̂/√v̂ = sign(g).
        let mut store = ParamStore::new();
        let id = store.add("theta", Matrix::scalar(1.0)).unwrap();
        let mut t = Tape::new();
        let th = t.param(&store, id);
        let sq = t.mul(th, th).unwrap();
        let grads = t.backward(sq, &store).unwrap();
        assert_eq!(grads.get(id).item().unwrap(), 2.0);

        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store, &grads).unwrap();
        assert!((store.get(id).item().unwrap() - 0.999).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        store.add("a", glorot_uniform_init(3, 4, &mut rng).unwrap()).unwrap();
        store.add("b", glorot_uniform_init(1, 4, &mut rng).unwrap()).unwrap();
        let before = store.clone();
        let zeros = store.zero_grads();
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for _ in 0..5 {
            adam.step(&mut store, &zeros).unwrap();
        }
        assert_eq!(store, before);
        assert!(adam.first_moments().iter().all(|m| m.max_abs() == 0.0));
        assert!(adam.second_moments().iter().all(|m| m.max_abs() == 0.0));
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros(2, 2)).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Matrix::zeros(3, 2)).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        assert!(adam.step(&mut store, &other.zero_grads()).is_err());
    }

    fn run(seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", glorot_uniform_init(3, 2, &mut rng).unwrap()).unwrap();
        let x = glorot_uniform_init(4, 3, &mut rng).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for _ in 0..10 {
            let mut t = Tape::new();
            let xn = t.constant(x.clone());
            let wn = t.param(&store, w);
            let h = t.matmul(xn, wn).unwrap();
            let h = t.tanh(h).unwrap();
            let l = t.mean(h).unwrap();
            let g = t.backward(l, &store).unwrap();
            adam.step(&mut store, &g).unwrap();
        }
        store
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let a = run(11);
        let b = run(11);
        for ((_, _, x), (_, _, y)) in a.iter().zip(b.iter()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
