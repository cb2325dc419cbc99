//! Central finite-difference checks of reverse-mode gradients.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::nn::{ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::seeds::rng_for;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Directional derivative along one random direction over all parameters.
    pub total: ParamCheck,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|c| c.rel_err)
            .fold(self.total.rel_err, f64::max)
    }

    pub fn worst(&self) -> &ParamCheck {
        self.per_param
            .iter()
            .chain(std::iter::once(&self.total))
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("total is always present")
    }
}

/// Relative error with an absolute floor so that exact zeros compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares, for every trainable parameter, the analytic directional
/// derivative along a random direction with a central difference of step `eps`.
pub fn check_params<T, F>(store: &ParamStore<T>, eps: f64, seed: u64, f: F) -> GradCheckReport
where
    T: Scalar,
    F: Fn(&mut Session<'_, T>) -> Var,
{
    let mut rng = rng_for(seed, &[0x6763]);
    let ids = store.trainable_ids();
    let directions: Vec<Array2<T>> = ids
        .iter()
        .map(|&id| {
            store
                .value(id)
                .mapv(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
        })
        .collect();

    let mut s = Session::new(store);
    let out = f(&mut s);
    let grads = s.backward(out);
    let analytic: Vec<f64> = {
        let by_id: std::collections::HashMap<ParamId, Array2<T>> = s.param_grads(&grads).into_iter().collect();
        ids.iter()
            .zip(&directions)
            .map(|(id, dir)| match by_id.get(id) {
                Some(g) => g.iter().zip(dir.iter()).map(|(a, b)| (*a * *b).as_f64()).sum(),
                None => 0.0,
            })
            .collect()
    };

    let eval_shifted = |which: Option<usize>, sign: f64| -> f64 {
        let mut shifted = store.clone();
        for (i, (&id, dir)) in ids.iter().zip(&directions).enumerate() {
            if which.is_none_or(|w| w == i) {
                let step = T::lit(sign * eps);
                shifted.value_mut(id).zip_mut_with(dir, |p, &d| *p += step * d);
            }
        }
        let mut s = Session::new(&shifted);
        let out = f(&mut s);
        s.scalar(out).as_f64()
    };
    let numeric_for = |which: Option<usize>| (eval_shifted(which, 1.0) - eval_shifted(which, -1.0)) / (2.0 * eps);

    let per_param = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let numeric = numeric_for(Some(i));
            ParamCheck {
                name: store.get(id).name.clone(),
                analytic: analytic[i],
                numeric,
                rel_err: rel_err(analytic[i], numeric),
            }
        })
        .collect();
    let total_analytic: f64 = analytic.iter().sum();
    let total_numeric = numeric_for(None);
    GradCheckReport {
        total: ParamCheck {
            name: "all".into(),
            analytic: total_analytic,
            numeric: total_numeric,
            rel_err: rel_err(total_analytic, total_numeric),
        },
        per_param,
    }
}
