use std::collections::BTreeMap;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every tensor in `store` and clears its gradients.
    /// Every tensor must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(name) = store.names().find(|n| store.grad(n).is_none()) {
            return Err(Error::Invariant(format!(
                "optimizer step without a gradient for {name}"
            )));
        }
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / correct1);
        let inv_sqrt_c2 = T::lit(1.0 / correct2.sqrt());
        let eps = T::lit(eps);

        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for name in names {
            let grad = store.take_grad(&name).expect("checked above");
            let value = store.get_mut(&name).expect("name from store");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            let v = self
                .second
                .entry(name)
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                *p -= step_size * *mi / (vi.sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>`, for persistence.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let firsts = self.first.iter().map(|(k, t)| (format!("m.{k}"), t));
        let seconds = self.second.iter().map(|(k, t)| (format!("v.{k}"), t));
        firsts.chain(seconds).collect()
    }

    pub fn restore(
        config: AdamConfig,
        steps: u64,
        tensors: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<Self> {
        let mut adam = Adam::new(config);
        adam.steps = steps;
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix("m.") {
                adam.first.insert(name.to_owned(), t);
            } else if let Some(name) = key.strip_prefix("v.") {
                adam.second.insert(name.to_owned(), t);
            } else {
                return Err(Error::Input(format!("unknown optimizer state entry {key}")));
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn quadratic_step(store: &mut ParamStore<f64>, adam: &mut Adam<f64>, target: f64) {
        let g = Graph::new();
        let p = store.bind(&g);
        let x = p.get("x").unwrap();
        let loss = x.add_scalar(-target).square().sum();
        let grads = g.backward(loss).unwrap();
        store.accumulate_grads(&p, &grads);
        adam.step(store).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::full([3], 0.5));
        let g = Graph::new();
        let p = store.bind(&g);
        let loss = p.get("x").unwrap().scale(0.0).sum();
        let grads = g.backward(loss).unwrap();
        store.accumulate_grads(&p, &grads);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.get("x").unwrap().data(), &[0.5; 3]);
        assert!(store.grad("x").is_none(), "grads cleared");
    }

    #[test]
    fn one_step_descends() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::full([1], 1.0));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        quadratic_step(&mut store, &mut adam, 0.0);
        let x = store.get("x").unwrap().item();
        assert!(x < 1.0 && x > 0.0, "{x}");
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::zeros([1]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            quadratic_step(&mut store, &mut adam, 3.0);
        }
        let x = store.get("x").unwrap().item();
        assert!((x - 3.0).abs() < 1e-2, "{x}");
    }

    #[test]
    fn missing_gradient_is_an_invariant_violation() {
        let mut store = ParamStore::<f32>::new();
        store.insert("x", Tensor::zeros([1]));
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut store), Err(Error::Invariant(_))));
    }
}
