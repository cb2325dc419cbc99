//! Slot pooling, fusion into the unified vector, projection head and the
//! contrastive objectives.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autodiff::Var;
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp, ParamGroup, ParamStore, Session};
use crate::scalar::Scalar;

/// Additive logit that removes self-similarity from the softmax.
const SELF_MASK: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub lambda_rec: f64,
    pub temperature_u: f64,
    pub temperature_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_u: 0.6,
            lambda_s: 0.3,
            lambda_rec: 0.1,
            temperature_u: 0.07,
            temperature_s: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_u, self.lambda_s, self.lambda_rec];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.temperature_u > 0.0 && self.temperature_s > 0.0) {
            return Err(Error::Config("contrastive temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// `lambda_rec * l_rec + lambda_s * l_sup + lambda_u * l_unsup`.
pub fn overall_loss(l_rec: f64, l_sup: f64, l_unsup: f64, w: &LossWeights) -> f64 {
    w.lambda_rec * l_rec + w.lambda_s * l_sup + w.lambda_u * l_unsup
}

/// Graph form of [`overall_loss`].
pub fn overall_loss_var<T: Scalar>(s: &mut Session<'_, T>, l_rec: Var, l_sup: Var, l_unsup: Var, w: &LossWeights) -> Var {
    let a = s.scale(l_rec, T::lit(w.lambda_rec));
    let b = s.scale(l_sup, T::lit(w.lambda_s));
    let c = s.scale(l_unsup, T::lit(w.lambda_u));
    let ab = s.add(a, b);
    s.add(ab, c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub hidden: usize,
    pub out_dim: usize,
    pub layers: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            hidden: 2048,
            out_dim: 256,
            layers: 3,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out_dim == 0 || self.layers == 0 {
            return Err(Error::Config("projection head sizes must be positive".into()));
        }
        Ok(())
    }
}

/// The three blocks of `g_all`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedVector<T> {
    pub g_all: Array1<T>,
    pub feat_dim: usize,
}

impl<T: Scalar> UnifiedVector<T> {
    pub fn g_dino(&self) -> ndarray::ArrayView1<'_, T> {
        self.g_all.slice(ndarray::s![..self.feat_dim])
    }

    pub fn pooled_mean_proj(&self) -> ndarray::ArrayView1<'_, T> {
        self.g_all.slice(ndarray::s![self.feat_dim..2 * self.feat_dim])
    }

    pub fn pooled_max_proj(&self) -> ndarray::ArrayView1<'_, T> {
        self.g_all.slice(ndarray::s![2 * self.feat_dim..])
    }
}

#[derive(Clone, Debug)]
pub struct Representation {
    pub feat_dim: usize,
    pub d_slot: usize,
    mean_proj: Linear,
    max_proj: Linear,
    head: Mlp,
}

impl Representation {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &ProjectionConfig,
        d_slot: usize,
        feat_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Head;
        let mut dims = vec![3 * feat_dim];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers - 1));
        dims.push(cfg.out_dim);
        Ok(Representation {
            feat_dim,
            d_slot,
            mean_proj: Linear::new(store, rng, "fuse.mean_proj", d_slot, feat_dim, g),
            max_proj: Linear::new(store, rng, "fuse.max_proj", d_slot, feat_dim, g),
            head: Mlp::new(store, rng, "projection", &dims, Activation::Gelu, g),
        })
    }

    pub fn mean_proj(&self) -> &Linear {
        &self.mean_proj
    }

    pub fn max_proj(&self) -> &Linear {
        &self.max_proj
    }

    /// Concatenates `g_dino` (1 x D) with the projected mean and max pools.
    pub fn fuse<T: Scalar>(&self, s: &mut Session<'_, T>, g_dino: Var, mean: Var, max: Var) -> Result<Var> {
        if s.shape(g_dino) != (1, self.feat_dim) {
            return Err(Error::Shape(format!(
                "global feature {:?}, expected 1x{}",
                s.shape(g_dino),
                self.feat_dim
            )));
        }
        for v in [mean, max] {
            if s.shape(v) != (1, self.d_slot) {
                return Err(Error::Shape(format!("pooled slots {:?}, expected 1x{}", s.shape(v), self.d_slot)));
            }
        }
        let m = self.mean_proj.forward(s, mean);
        let x = self.max_proj.forward(s, max);
        Ok(s.concat_cols(&[g_dino, m, x]))
    }

    /// Projection head followed by row-wise unit normalisation.
    pub fn project<T: Scalar>(&self, s: &mut Session<'_, T>, g_all: Var) -> Result<Var> {
        let h = self.head.forward(s, g_all);
        if let Some(row) = s
            .value(h)
            .rows()
            .into_iter()
            .position(|r| r.iter().all(|v| *v == T::zero()))
        {
            return Err(Error::numeric("projection head", format!("row {row} has zero norm")));
        }
        Ok(s.l2_normalize_rows(h))
    }
}

/// Mean and coordinatewise max (each 1 x D_slot) over the kept slots. The
/// mean is weighted by `mask`, so it carries the mask's gradient.
pub fn pool_slots<T: Scalar>(s: &mut Session<'_, T>, slots: Var, mask: Var, kept: &[bool]) -> Result<(Var, Var)> {
    let index: Vec<usize> = kept.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
    if index.is_empty() {
        return Err(Error::Contract("pooling needs at least one kept slot".into()));
    }
    let mt = s.transpose(mask);
    let weighted = s.matmul(mt, slots);
    let count = s.sum_all(mask);
    let inv = s.recip(count);
    let mean = s.mul_col(weighted, inv);
    let rows = s.gather_rows(slots, &index);
    let max = s.max_cols(rows);
    Ok((mean, max))
}

/// Value-level pooling over kept rows.
pub fn pool_values<T: Scalar>(slots: &Array2<T>, kept: &[bool]) -> Result<(Array1<T>, Array1<T>)> {
    let store = ParamStore::new();
    let mut s = Session::new(&store);
    let sv = s.constant(slots.clone());
    let m = s.constant(Array2::from_shape_fn((kept.len(), 1), |(i, _)| {
        if kept[i] {
            T::one()
        } else {
            T::zero()
        }
    }));
    let (mean, max) = pool_slots(&mut s, sv, m, kept)?;
    Ok((s.value(mean).row(0).to_owned(), s.value(max).row(0).to_owned()))
}

fn similarity_logits<T: Scalar>(s: &mut Session<'_, T>, z: Var, temperature: f64) -> Var {
    let n = s.shape(z).0;
    let zt = s.transpose(z);
    let sim = s.matmul(z, zt);
    let sim = s.scale(sim, T::lit(1.0 / temperature));
    let diag = s.constant(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            T::lit(SELF_MASK)
        } else {
            T::zero()
        }
    }));
    s.add(sim, diag)
}

/// Mean over anchors of `-sum_p w[i,p] log softmax_i(p)`; rows of `weights`
/// that are all zero are skipped.
fn weighted_nll<T: Scalar>(s: &mut Session<'_, T>, logits: Var, weights: Array2<T>, anchors: usize) -> Var {
    let logp = s.log_softmax_rows(logits);
    let w = s.constant(weights);
    let picked = s.mul(logp, w);
    let total = s.sum_all(picked);
    s.scale(total, T::lit(-1.0 / anchors as f64))
}

/// Symmetric InfoNCE over the doubled batch: the positive of `z1[i]` is
/// `z2[i]` and vice versa, every other embedding is a negative.
pub fn unsup_contrastive<T: Scalar>(s: &mut Session<'_, T>, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    let (b, p) = s.shape(z1);
    if s.shape(z2) != (b, p) {
        return Err(Error::Shape(format!("view embeddings {:?} vs {:?}", s.shape(z1), s.shape(z2))));
    }
    if b < 2 {
        return Err(Error::InvalidInput(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let z = s.concat_rows(&[z1, z2]);
    let logits = similarity_logits(s, z, temperature);
    let n = 2 * b;
    let weights = Array2::from_shape_fn((n, n), |(i, j)| if j == (i + b) % n { T::one() } else { T::zero() });
    Ok(weighted_nll(s, logits, weights, n))
}

/// Supervised contrastive loss. Anchors without a positive are skipped.
pub fn sup_contrastive<T: Scalar>(s: &mut Session<'_, T>, z: Var, labels: &[ClassId], temperature: f64) -> Result<Var> {
    let n = s.shape(z).0;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let mut weights = Array2::zeros((n, n));
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let w = T::lit(1.0 / pos.len() as f64);
        for j in pos {
            weights[[i, j]] = w;
        }
    }
    if anchors == 0 {
        return Err(Error::InvalidInput("no labeled anchor has a positive".into()));
    }
    let logits = similarity_logits(s, z, temperature);
    Ok(weighted_nll(s, logits, weights, anchors))
}

pub fn unsup_contrastive_value<T: Scalar>(z1: &Array2<T>, z2: &Array2<T>, temperature: f64) -> Result<T> {
    let store = ParamStore::new();
    let mut s = Session::new(&store);
    let a = s.constant(z1.clone());
    let b = s.constant(z2.clone());
    let l = unsup_contrastive(&mut s, a, b, temperature)?;
    Ok(s.scalar(l))
}

pub fn sup_contrastive_value<T: Scalar>(z: &Array2<T>, labels: &[ClassId], temperature: f64) -> Result<T> {
    let store = ParamStore::new();
    let mut s = Session::new(&store);
    let zv = s.constant(z.clone());
    let l = sup_contrastive(&mut s, zv, labels, temperature)?;
    Ok(s.scalar(l))
}
