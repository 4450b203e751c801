//! AdamW with decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::math;
use crate::nn::{GradMap, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    moments: BTreeMap<String, (Tensor, Tensor, u64)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, moments: BTreeMap::new() }
    }

    /// Updates every tensor of `params` that has an entry in `grads`, with
    /// the step size chosen per name by `lr_for`.
    pub fn step<P: Parameters + ?Sized>(
        &mut self,
        params: &mut P,
        prefix: &str,
        grads: &GradMap,
        lr_for: &dyn Fn(&str) -> f64,
    ) {
        let cfg = self.cfg.clone();
        let moments = &mut self.moments;
        params.visit_mut(prefix, &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let lr = lr_for(name);
            let entry = moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape()), 0));
            entry.2 += 1;
            let t = entry.2 as i32;
            let bc1 = 1.0 - math::powi(cfg.beta1, t);
            let bc2 = 1.0 - math::powi(cfg.beta2, t);
            let (m, v) = (entry.0.data_mut(), entry.1.data_mut());
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * cfg.weight_decay * *w;
                *w -= lr * mhat / (math::sqrt(vhat) + cfg.eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut x = Tensor::new(&[1, 2], alloc::vec![3.0, -2.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let mut g = GradMap::new();
            g.insert(String::new(), x.map(|v| 2.0 * v));
            opt.step(&mut x, "", &g, &|_| 0.01);
        }
        assert!(x.max_abs() < 1e-2, "{:?}", x);
    }

    #[test]
    fn untouched_without_gradient() {
        let mut x = Tensor::filled(&[1, 2], 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut x, "", &GradMap::new(), &|_| 0.1);
        assert_eq!(x, Tensor::filled(&[1, 2], 1.0));
    }
}
