use ndarray::Array2;

use super::config::{Algorithm, OptimConfig, Schedule};
use super::model::GradList;
use crate::nn::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Learning rate at `step` of `total_steps`.
pub fn learning_rate(cfg: &OptimConfig, step: usize, total_steps: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = step as f64 / total_steps.max(1) as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// SGD with momentum or Adam, both with L2 weight decay folded into the
/// gradient.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: OptimConfig,
    first: Vec<Option<Array2<T>>>,
    second: Vec<Option<Array2<T>>>,
    steps: usize,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &OptimConfig, num_params: usize) -> Self {
        Optimizer {
            cfg: cfg.clone(),
            first: vec![None; num_params],
            second: vec![None; num_params],
            steps: 0,
        }
    }

    /// Global L2 norm of a gradient list.
    pub fn grad_norm(grads: &GradList<T>) -> f64 {
        grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update with base learning rate `lr`. Frozen parameters are
    /// never touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, mut grads: GradList<T>, lr: f64) {
        self.steps += 1;
        if self.cfg.grad_clip > 0.0 {
            let norm = Self::grad_norm(&grads);
            if norm > self.cfg.grad_clip {
                let f = T::lit(self.cfg.grad_clip / norm);
                for g in grads.iter_mut().flatten() {
                    g.mapv_inplace(|v| v * f);
                }
            }
        }
        let ids: Vec<_> = store.trainable_ids();
        for id in ids {
            let Some(mut g) = grads[id.index()].take() else {
                continue;
            };
            let group_lr = match store.get(id).group {
                ParamGroup::Head => lr,
                ParamGroup::Backbone => lr * self.cfg.backbone_lr_scale,
            };
            let wd = T::lit(self.cfg.weight_decay);
            if self.cfg.weight_decay != 0.0 {
                g.zip_mut_with(store.value(id), |g, &p| *g += wd * p);
            }
            let i = id.index();
            let update = match self.cfg.algorithm {
                Algorithm::Sgd => {
                    let mu = T::lit(self.cfg.momentum);
                    let buf = match self.first[i].take() {
                        Some(mut b) => {
                            b.zip_mut_with(&g, |b, &g| *b = mu * *b + g);
                            b
                        }
                        None => g,
                    };
                    let u = buf.mapv(|v| v * T::lit(group_lr));
                    self.first[i] = Some(buf);
                    u
                }
                Algorithm::Adam => {
                    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
                    let m = self.first[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (T::one() - b1) * g);
                    let v = self.second[i].get_or_insert_with(|| Array2::zeros(g.dim()));
                    v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
                    let c1 = T::lit(1.0 - ADAM_BETA1.powi(self.steps as i32));
                    let c2 = T::lit(1.0 - ADAM_BETA2.powi(self.steps as i32));
                    let lr = T::lit(group_lr);
                    let eps = T::lit(ADAM_EPS);
                    let mut u = m.clone();
                    u.zip_mut_with(v, |m, &v| *m = lr * (*m / c1) / ((v / c2).sqrt() + eps));
                    u
                }
            };
            store.value_mut(id).zip_mut_with(&update, |p, &u| *p -= u);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimConfig::default();
        assert_eq!(learning_rate(&cfg, 0, 100), 0.1);
        assert!((learning_rate(&cfg, 50, 100) - 0.05).abs() < 1e-12);
        assert!(learning_rate(&cfg, 100, 100).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_matches_hand_update() {
        let cfg = OptimConfig::default();
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", array![[1.0]], true, ParamGroup::Head);
        let frozen = store.add("q", array![[1.0]], false, ParamGroup::Head);
        let mut opt = Optimizer::new(&cfg, 2);
        opt.step(&mut store, vec![Some(array![[2.0]]), Some(array![[5.0]])], 0.1);
        assert!((store.value(id)[[0, 0]] - 0.8).abs() < 1e-15);
        opt.step(&mut store, vec![Some(array![[2.0]]), None], 0.1);
        // buffer = 0.9 * 2 + 2 = 3.8
        assert!((store.value(id)[[0, 0]] - 0.42).abs() < 1e-15);
        assert_eq!(store.value(frozen)[[0, 0]], 1.0);
    }

    #[test]
    fn backbone_group_uses_scaled_rate() {
        let cfg = OptimConfig {
            momentum: 0.0,
            ..OptimConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let id = store.add("b", array![[0.0]], true, ParamGroup::Backbone);
        let mut opt = Optimizer::new(&cfg, 1);
        opt.step(&mut store, vec![Some(array![[1.0]])], 1.0);
        assert!((store.value(id)[[0, 0]] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = OptimConfig {
            algorithm: Algorithm::Adam,
            ..OptimConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", array![[0.0, 0.0]], true, ParamGroup::Head);
        let mut opt = Optimizer::new(&cfg, 1);
        opt.step(&mut store, vec![Some(array![[3.0, -0.5]])], 0.01);
        let v = store.value(id);
        assert!((v[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((v[[0, 1]] - 0.01).abs() < 1e-9);
    }
}
