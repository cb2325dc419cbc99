//! Component clusterer: slot attention with Gaussian slot initialisation and
//! Gumbel-softmax keep/drop selection.

use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{normal, Activation, GruCell, LayerNorm, Linear, Mlp, ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::seeds::{rng_for, stream};

const ATTN_EPS: f64 = 1e-8;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    /// Gumbel-softmax sample with straight-through gradients.
    Stochastic,
    /// Argmax of the keep/drop logits, ties kept.
    Hard,
    /// Every slot kept; disables adaptive selection.
    KeepAll,
}

impl FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(SelectionMode::Stochastic),
            "hard" => Ok(SelectionMode::Hard),
            "keep-all" => Ok(SelectionMode::KeepAll),
            other => Err(Error::Config(format!("unknown selection mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionMode::Stochastic => "stochastic",
            SelectionMode::Hard => "hard",
            SelectionMode::KeepAll => "keep-all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClustererConfig {
    pub k_max: usize,
    pub d_slot: usize,
    pub iterations: usize,
    pub gumbel_temperature: f64,
    /// Mode used during training; evaluation always uses hard selection
    /// unless this is `KeepAll`.
    pub selection_mode: SelectionMode,
    pub sparsity_weight: f64,
    /// Epochs over which the sparsity weight ramps up linearly from zero.
    pub sparsity_warmup: usize,
    pub mlp_hidden: usize,
    pub scorer_hidden: usize,
}

impl Default for ClustererConfig {
    fn default() -> Self {
        ClustererConfig {
            k_max: 50,
            d_slot: 64,
            iterations: 3,
            gumbel_temperature: 1.0,
            selection_mode: SelectionMode::Stochastic,
            sparsity_weight: 0.0,
            sparsity_warmup: 0,
            mlp_hidden: 128,
            scorer_hidden: 64,
        }
    }
}

impl ClustererConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clusterer.k_max", self.k_max),
            ("clusterer.d_slot", self.d_slot),
            ("clusterer.iterations", self.iterations),
            ("clusterer.mlp_hidden", self.mlp_hidden),
            ("clusterer.scorer_hidden", self.scorer_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::Config(format!(
                "gumbel temperature must be positive, got {}",
                self.gumbel_temperature
            )));
        }
        if !(self.sparsity_weight >= 0.0) {
            return Err(Error::Config("clusterer.sparsity_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Sparsity weight in effect during 1-based `epoch`.
    pub fn sparsity_at(&self, epoch: usize) -> f64 {
        if self.sparsity_warmup == 0 {
            return self.sparsity_weight;
        }
        let ramp = (epoch.saturating_sub(1) as f64 / self.sparsity_warmup as f64).min(1.0);
        self.sparsity_weight * ramp
    }

    /// Selection mode for evaluation passes.
    pub fn eval_mode(&self) -> SelectionMode {
        match self.selection_mode {
            SelectionMode::KeepAll => SelectionMode::KeepAll,
            _ => SelectionMode::Hard,
        }
    }
}

/// Plain-value result of a clusterer pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState<T> {
    /// K x D_slot.
    pub slots: Array2<T>,
    /// K x N, each column sums to one.
    pub attention: Array2<T>,
    pub keep_prob: Array1<T>,
    pub keep_mask: Vec<bool>,
}

impl<T: Scalar> SlotState<T> {
    pub fn num_kept(&self) -> usize {
        self.keep_mask.iter().filter(|&&k| k).count()
    }
}

/// Graph handles for a clusterer pass.
#[derive(Clone, Debug)]
pub struct SlotVars {
    pub slots: Var,
    pub attention: Var,
    pub selection: SelectionVars,
}

#[derive(Clone, Debug)]
pub struct SelectionVars {
    /// K x 2 scorer output (keep, drop).
    pub logits: Var,
    /// K x 1 keep-class probability.
    pub keep_prob: Var,
    /// K x 1 mask whose value is the hard 0/1 decision. In stochastic mode its
    /// gradient is that of the relaxed sample.
    pub mask: Var,
    pub hard: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Clusterer {
    pub cfg: ClustererConfig,
    pub feat_dim: usize,
    mu: ParamId,
    log_sigma: ParamId,
    norm_input: LayerNorm,
    project_k: Linear,
    project_v: Linear,
    project_q: Linear,
    norm_slots: LayerNorm,
    gru: GruCell,
    norm_mlp: LayerNorm,
    mlp: Mlp,
    scorer: Mlp,
}

impl Clusterer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &ClustererConfig,
        feat_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Head;
        let d = cfg.d_slot;
        let bound = (6.0 / (2 * d) as f64).sqrt();
        let mu = store.add("clusterer.slots_mu", normal(rng, (1, d), 1.0), true, g);
        let log_sigma = store.add(
            "clusterer.slots_log_sigma",
            crate::nn::uniform(rng, (1, d), bound).mapv(|v: T| v - T::lit(1.0)),
            true,
            g,
        );
        Ok(Clusterer {
            cfg: cfg.clone(),
            feat_dim,
            mu,
            log_sigma,
            norm_input: LayerNorm::new(store, "clusterer.norm_input", feat_dim, LN_EPS, g),
            project_k: Linear::new(store, rng, "clusterer.project_k", feat_dim, d, g),
            project_v: Linear::new(store, rng, "clusterer.project_v", feat_dim, d, g),
            project_q: Linear::new(store, rng, "clusterer.project_q", d, d, g),
            norm_slots: LayerNorm::new(store, "clusterer.norm_slots", d, LN_EPS, g),
            gru: GruCell::new(store, rng, "clusterer.gru", d, d, g),
            norm_mlp: LayerNorm::new(store, "clusterer.norm_mlp", d, LN_EPS, g),
            mlp: Mlp::new(store, rng, "clusterer.mlp", &[d, cfg.mlp_hidden, d], Activation::Relu, g),
            scorer: Mlp::new(
                store,
                rng,
                "clusterer.scorer",
                &[d, cfg.scorer_hidden, 2],
                Activation::Relu,
                g,
            ),
        })
    }

    pub fn mu_id(&self) -> ParamId {
        self.mu
    }

    pub fn log_sigma_id(&self) -> ParamId {
        self.log_sigma
    }

    /// Standard normal noise for one sample's initial slots.
    pub fn slot_noise<T: Scalar>(&self, seed: u64) -> Array2<T> {
        let mut rng = rng_for(seed, &[stream::SLOT_INIT]);
        Array2::from_shape_fn((self.cfg.k_max, self.cfg.d_slot), |_| {
            T::lit(StandardNormal.sample(&mut rng))
        })
    }

    /// `mu + exp(log_sigma) * noise`, row-wise over the K slots.
    pub fn init_slots_var<T: Scalar>(&self, s: &mut Session<'_, T>, noise: Array2<T>) -> Var {
        let eps = s.constant(noise);
        let log_sigma = s.param(self.log_sigma);
        let sigma = s.exp(log_sigma);
        let scaled = s.mul_row(eps, sigma);
        let mu = s.param(self.mu);
        s.add_row(scaled, mu)
    }

    /// Initial slots for `batch_size` samples; sample `b` draws from `(seed, b)`.
    pub fn init_slots<T: Scalar>(&self, store: &ParamStore<T>, batch_size: usize, seed: u64) -> Vec<Array2<T>> {
        (0..batch_size)
            .map(|b| {
                let mut s = Session::new(store);
                let v = self.init_slots_var(&mut s, self.slot_noise(sample_seed(seed, b)));
                s.value(v).clone()
            })
            .collect()
    }

    /// Runs the attention iterations. `features` is N x D_feat; returns the
    /// final slots (K x D_slot) and final attention (K x N).
    pub fn attend<T: Scalar>(&self, s: &mut Session<'_, T>, init: Var, features: Var) -> Result<(Var, Var)> {
        let (n, d_in) = s.shape(features);
        if n == 0 {
            return Err(Error::InvalidInput("feature map has no positions".into()));
        }
        if d_in != self.feat_dim {
            return Err(Error::Shape(format!(
                "clusterer expects width {}, got {d_in}",
                self.feat_dim
            )));
        }
        let scale = T::lit(1.0 / (self.cfg.d_slot as f64).sqrt());
        let inputs = self.norm_input.forward(s, features);
        let k = self.project_k.forward(s, inputs);
        let v = self.project_v.forward(s, inputs);
        let mut slots = init;
        let mut attn = None;
        for _ in 0..self.cfg.iterations {
            let prev = slots;
            let sn = self.norm_slots.forward(s, slots);
            let q = self.project_q.forward(s, sn);
            let qt = s.transpose(q);
            let logits = s.matmul(k, qt);
            let logits = s.scale(logits, scale);
            // N x K: softmax over slots
            let a = s.softmax_rows(logits);
            attn = Some(a);
            let a_eps = s.add_scalar(a, T::lit(ATTN_EPS));
            let mass = s.sum_cols(a_eps);
            let inv = s.recip(mass);
            let weights = s.mul_row(a_eps, inv);
            let wt = s.transpose(weights);
            let updates = s.matmul(wt, v);
            slots = self.gru.forward(s, updates, prev);
            let m = self.norm_mlp.forward(s, slots);
            let m = self.mlp.forward(s, m);
            slots = s.add(slots, m);
        }
        let attn = attn.expect("at least one iteration");
        let attention = s.transpose(attn);
        Ok((slots, attention))
    }

    /// Scores each slot and draws the keep mask.
    pub fn select<T: Scalar, R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_, T>,
        slots: Var,
        mode: SelectionMode,
        rng: &mut R,
    ) -> SelectionVars {
        let logits = self.scorer.forward(s, slots);
        select_from_logits(s, logits, mode, self.cfg.gumbel_temperature, rng)
    }

    /// init -> attend -> select, with the init and selection streams derived
    /// from `seed`.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        features: Var,
        seed: u64,
        mode: SelectionMode,
    ) -> Result<SlotVars> {
        let init = self.init_slots_var(s, self.slot_noise(seed));
        let (slots, attention) = self.attend(s, init, features)?;
        let mut rng = rng_for(seed, &[stream::SLOT_SELECT]);
        let selection = self.select(s, slots, mode, &mut rng);
        Ok(SlotVars {
            slots,
            attention,
            selection,
        })
    }

    /// Value-level forward pass.
    pub fn run<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Array2<T>,
        seed: u64,
        mode: SelectionMode,
    ) -> Result<SlotState<T>> {
        let mut s = Session::new(store);
        let f = s.constant(features.clone());
        let out = self.forward(&mut s, f, seed, mode)?;
        Ok(slot_state(&s, &out))
    }
}

/// Seed for element `index` of a batch drawn under `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    crate::seeds::derive_seed(seed, &[index as u64])
}

pub fn slot_state<T: Scalar>(s: &Session<'_, T>, v: &SlotVars) -> SlotState<T> {
    SlotState {
        slots: s.value(v.slots).clone(),
        attention: s.value(v.attention).clone(),
        keep_prob: s.value(v.selection.keep_prob).column(0).to_owned(),
        keep_mask: v.selection.hard.clone(),
    }
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u in (0, 1]
    let u: f64 = 1.0 - rng.random::<f64>();
    -(-u.ln()).ln()
}

/// K x 2 matrix of standard Gumbel draws.
pub fn gumbel_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, k: usize) -> Array2<T> {
    Array2::from_shape_fn((k, 2), |_| T::lit(gumbel(rng)))
}

/// Selection from K x 2 (keep, drop) logits.
pub fn select_from_logits<T: Scalar, R: Rng + ?Sized>(
    s: &mut Session<'_, T>,
    logits: Var,
    mode: SelectionMode,
    temperature: f64,
    rng: &mut R,
) -> SelectionVars {
    let noise = match mode {
        SelectionMode::Stochastic => Some(gumbel_noise(rng, s.shape(logits).0)),
        _ => None,
    };
    select_with_noise(s, logits, mode, temperature, noise)
}

/// As [`select_from_logits`] with the Gumbel perturbation supplied by the
/// caller. `noise` is only read in stochastic mode.
pub fn select_with_noise<T: Scalar>(
    s: &mut Session<'_, T>,
    logits: Var,
    mode: SelectionMode,
    temperature: f64,
    noise: Option<Array2<T>>,
) -> SelectionVars {
    let k = s.shape(logits).0;
    let probs = s.softmax_rows(logits);
    let keep_prob = s.slice_cols(probs, 0, 1);
    let lv = s.value(logits).clone();
    let (mut hard, soft) = match mode {
        SelectionMode::KeepAll => (vec![true; k], None),
        SelectionMode::Hard => ((0..k).map(|i| lv[[i, 0]] >= lv[[i, 1]]).collect(), None),
        SelectionMode::Stochastic => {
            let noise = noise.expect("stochastic selection needs gumbel noise");
            let noise = s.constant(noise);
            let perturbed = s.add(logits, noise);
            let perturbed = s.scale(perturbed, T::lit(1.0 / temperature));
            let y = s.softmax_rows(perturbed);
            let yv = s.value(y);
            let hard = (0..k).map(|i| yv[[i, 0]] >= yv[[i, 1]]).collect();
            (hard, Some(s.slice_cols(y, 0, 1)))
        }
    };
    if !hard.iter().any(|&h| h) {
        let kp = s.value(keep_prob);
        let best = (0..k)
            .max_by(|&a, &b| kp[[a, 0]].partial_cmp(&kp[[b, 0]]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
            .expect("at least one slot");
        hard[best] = true;
    }
    let hard_arr = Array2::from_shape_fn((k, 1), |(i, _)| if hard[i] { T::one() } else { T::zero() });
    let mask = match soft {
        Some(soft) => {
            let offset = &hard_arr - s.value(soft);
            let offset = s.constant(offset);
            s.add(soft, offset)
        }
        None => s.constant(hard_arr),
    };
    SelectionVars {
        logits,
        keep_prob,
        mask,
        hard,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use ndarray::{array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sparsity_ramp() {
        let mut cfg = ClustererConfig {
            sparsity_weight: 0.2,
            ..ClustererConfig::default()
        };
        assert_eq!(cfg.sparsity_at(1), 0.2);
        cfg.sparsity_warmup = 4;
        let w: Vec<f64> = (1..=6).map(|e| cfg.sparsity_at(e)).collect();
        assert_eq!(w, vec![0.0, 0.05, 0.1, 0.15000000000000002, 0.2, 0.2]);
    }

    fn tiny(k: usize, d_feat: usize) -> (ParamStore<f64>, Clusterer) {
        let cfg = ClustererConfig {
            k_max: k,
            d_slot: 6,
            mlp_hidden: 8,
            scorer_hidden: 4,
            ..ClustererConfig::default()
        };
        let mut store = ParamStore::new();
        let c = Clusterer::new(&mut store, &mut ChaCha8Rng::seed_from_u64(3), &cfg, d_feat).unwrap();
        (store, c)
    }

    fn features(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal(&mut rng, (n, d), 1.0)
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let (store, c) = tiny(4, 5);
        for seed in 0..10 {
            let st = c.run(&store, &features(9, 5, seed), seed, SelectionMode::Stochastic).unwrap();
            for col in st.attention.columns() {
                assert!((col.sum() - 1.0).abs() < 1e-6);
            }
            assert!(st.num_kept() >= 1);
            for (k, &m) in st.keep_mask.iter().enumerate() {
                assert!(!m || st.keep_prob[k] > 0.0);
            }
        }
    }

    #[test]
    fn single_slot_takes_all_attention() {
        let (store, c) = tiny(1, 5);
        let st = c.run(&store, &features(7, 5, 1), 0, SelectionMode::Hard).unwrap();
        assert!(st.attention.iter().all(|&a| (a - 1.0).abs() < 1e-12));
        assert_eq!(st.keep_mask, vec![true]);
    }

    #[test]
    fn identical_positions_share_attention() {
        let (store, c) = tiny(3, 5);
        let mut f = features(6, 5, 2);
        let row = f.row(1).to_owned();
        f.row_mut(4).assign(&row);
        let st = c.run(&store, &f, 9, SelectionMode::Hard).unwrap();
        assert_eq!(st.attention.column(1), st.attention.column(4));
    }

    #[test]
    fn empty_feature_map_is_rejected() {
        let (store, c) = tiny(3, 5);
        let err = c.run(&store, &Array2::zeros((0, 5)), 0, SelectionMode::Hard);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_sigma_gives_mu() {
        let (mut store, c) = tiny(4, 5);
        store.set_value(c.log_sigma, Array2::from_elem((1, 6), -80.0)).unwrap();
        let init = c.init_slots(&store, 2, 11);
        let mu = store.value(c.mu).row(0).to_owned();
        for slots in &init {
            for row in slots.rows() {
                assert!((&row - &mu).iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn batch_elements_draw_distinct_slots() {
        let (store, c) = tiny(4, 5);
        let init = c.init_slots(&store, 2, 11);
        assert_ne!(init[0], init[1]);
        assert_eq!(init, c.init_slots(&store, 2, 11));
    }

    #[test]
    fn slot_init_mean_matches_mu() {
        let (store, c) = tiny(1, 5);
        let n = 100_000;
        let draws = c.init_slots(&store, n, 5);
        let mut mean = Array1::<f64>::zeros(6);
        for d in &draws {
            mean += &d.row(0);
        }
        mean /= n as f64;
        let mu = store.value(c.mu).row(0);
        let sigma = store.value(c.log_sigma).row(0).mapv(f64::exp);
        for j in 0..6 {
            assert!((mean[j] - mu[j]).abs() < 3.0 * sigma[j] / (n as f64).sqrt());
        }
    }

    #[test]
    fn forward_matches_composed_operations() {
        let (store, c) = tiny(4, 5);
        let f = features(9, 5, 4);
        let seed = 77;
        let whole = c.run(&store, &f, seed, SelectionMode::Stochastic).unwrap();

        let mut s = Session::new(&store);
        let init = c.init_slots_var(&mut s, c.slot_noise(seed));
        let fv = s.constant(f.clone());
        let (slots, attention) = c.attend(&mut s, init, fv).unwrap();
        let sel = c.select(&mut s, slots, SelectionMode::Stochastic, &mut rng_for(seed, &[stream::SLOT_SELECT]));
        let parts = slot_state(&s, &SlotVars { slots, attention, selection: sel });
        assert_eq!(whole, parts);
    }

    #[test]
    fn slot_permutation_is_equivariant() {
        let (store, c) = tiny(4, 5);
        let f = features(8, 5, 6);
        let init = c.init_slots(&store, 1, 3).remove(0);
        let perm = [2, 0, 3, 1];
        let permuted = init.select(Axis(0), &perm);
        let run = |init: Array2<f64>| {
            let mut s = Session::new(&store);
            let i = s.constant(init);
            let fv = s.constant(f.clone());
            let (sl, at) = c.attend(&mut s, i, fv).unwrap();
            (s.value(sl).clone(), s.value(at).clone())
        };
        let (s1, a1) = run(init);
        let (s2, a2) = run(permuted);
        let s1p = s1.select(Axis(0), &perm);
        let a1p = a1.select(Axis(0), &perm);
        assert!((&s1p - &s2).iter().all(|v| v.abs() < 1e-5));
        assert!((&a1p - &a2).iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn attend_gradient_matches_finite_differences() {
        let (mut store, c) = tiny(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let init = store.add("test.init", normal(&mut rng, (3, 6), 1.0), true, ParamGroup::Head);
        let feats = store.add("test.features", normal(&mut rng, (8, 4), 1.0), true, ParamGroup::Head);
        let w_s = normal::<f64, _>(&mut rng, (3, 6), 1.0);
        let w_a = normal::<f64, _>(&mut rng, (3, 8), 1.0);
        let report = check_params(&store, 1e-5, 1, |s| {
            let i = s.param(init);
            let f = s.param(feats);
            let (sl, at) = c.attend(s, i, f).unwrap();
            let ws = s.constant(w_s.clone());
            let wa = s.constant(w_a.clone());
            let a = s.mul(sl, ws);
            let b = s.mul(at, wa);
            let a = s.sum_all(a);
            let b = s.sum_all(b);
            s.add(a, b)
        });
        let worst = report.worst();
        assert!(worst.rel_err < 1e-4, "{worst:?}");
    }

    #[test]
    fn saturated_logits_keep() {
        let store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let mut s = Session::new(&store);
            let l = s.constant(array![[20.0, -20.0]]);
            let sel = select_from_logits(&mut s, l, SelectionMode::Stochastic, 1.0, &mut rng);
            assert_eq!(sel.hard, vec![true]);
        }
    }

    #[test]
    fn hard_mode_ties_keep_and_all_dropped_forces_one() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store);
        let l = s.constant(array![[0.5, 0.5], [-1.0, 2.0]]);
        let sel = select_from_logits(&mut s, l, SelectionMode::Hard, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(sel.hard, vec![true, false]);

        let l = s.constant(array![[-3.0, 1.0], [-1.0, 2.0], [-5.0, 0.0]]);
        let sel = select_from_logits(&mut s, l, SelectionMode::Hard, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(sel.hard, vec![false, true, false]);
        assert_eq!(s.value(sel.mask).column(0).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_positive_temperature_is_config_error() {
        for t in [0.0, -1.0, f64::NAN] {
            let cfg = ClustererConfig {
                gumbel_temperature: t,
                ..ClustererConfig::default()
            };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn gumbel_keep_frequency_matches_probability() {
        let store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // the second slot is always kept so force-keep never fires
        for keep_logit in [-1.5, 0.0, 0.7] {
            let draws = 10_000;
            let mut kept = 0;
            let mut p = 0.0;
            for _ in 0..draws {
                let mut s = Session::new(&store);
                let l = s.constant(array![[keep_logit, 0.0], [30.0, -30.0]]);
                let sel = select_from_logits(&mut s, l, SelectionMode::Stochastic, 1.0, &mut rng);
                kept += usize::from(sel.hard[0]);
                p = s.value(sel.keep_prob)[[0, 0]];
            }
            let freq = kept as f64 / draws as f64;
            assert!((freq - p).abs() < 0.02, "logit {keep_logit}: {freq} vs {p}");
        }
    }

    #[test]
    fn straight_through_gradient_matches_relaxed_expectation() {
        // Downstream scalar linear in the mask: f = 2 m0 - 3 m1. The
        // straight-through gradient then equals the gradient of E[f(soft)].
        let store = ParamStore::<f64>::new();
        let base = array![[0.4, -0.2], [-0.3, 0.5]];
        let coef = array![[2.0], [-3.0]];
        let draws = 100_000;
        let noise: Vec<Array2<f64>> = {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            (0..draws).map(|_| Array2::from_shape_fn((2, 2), |_| gumbel(&mut rng))).collect()
        };
        let relaxed = |logits: &Array2<f64>| -> f64 {
            noise
                .iter()
                .map(|g| {
                    let y = crate::autodiff::softmax_rows((logits + g).view());
                    2.0 * y[[0, 0]] - 3.0 * y[[1, 0]]
                })
                .sum::<f64>()
                / draws as f64
        };
        let mut grad = Array2::<f64>::zeros((2, 2));
        for g in &noise {
            let mut s = Session::new(&store);
            let l = s.leaf(base.clone(), true);
            let sel = select_with_noise(&mut s, l, SelectionMode::Stochastic, 1.0, Some(g.clone()));
            let c = s.constant(coef.clone());
            let f = s.mul(sel.mask, c);
            let f = s.sum_all(f);
            grad += s.backward(f).get(l).unwrap();
        }
        grad /= draws as f64;
        let eps = 1e-5;
        for i in 0..2 {
            for j in 0..2 {
                let mut plus = base.clone();
                plus[[i, j]] += eps;
                let mut minus = base.clone();
                minus[[i, j]] -= eps;
                let fd = (relaxed(&plus) - relaxed(&minus)) / (2.0 * eps);
                assert!(grad[[i, j]].abs() > 1e-3);
                assert!(crate::gradcheck::rel_err(grad[[i, j]], fd) < 0.05, "{i},{j}: {} vs {fd}", grad[[i, j]]);
            }
        }
    }
}
