//! Masked spatial-broadcast slot decoder and the feature reconstruction loss.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{normal, Activation, Mlp, ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub pos_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 4,
            hidden: 128,
            pos_std: 0.02,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("decoder needs at least one layer of positive width".into()));
        }
        if !(self.pos_std >= 0.0) {
            return Err(Error::Config("decoder.pos_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Decoded features plus one alpha logit.
    pub fn out_dim(feat_dim: usize) -> usize {
        feat_dim + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction<T> {
    /// N x D_feat.
    pub recon: Array2<T>,
    /// K x N, columns sum to one over kept slots.
    pub alpha: Array2<T>,
    /// K x N x D_feat.
    pub per_slot: Array3<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReconVars {
    pub recon: Var,
    pub alpha: Var,
    /// (K*N) x D_feat, slot-major.
    pub per_slot: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub feat_dim: usize,
    pub num_positions: usize,
    pos: ParamId,
    mlp: Mlp,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &DecoderConfig,
        d_slot: usize,
        feat_dim: usize,
        num_positions: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Head;
        let pos = store.add(
            "decoder.pos_embed",
            normal(rng, (num_positions, d_slot), cfg.pos_std),
            true,
            g,
        );
        let mut dims = vec![d_slot];
        dims.extend(std::iter::repeat_n(cfg.hidden, cfg.layers - 1));
        dims.push(DecoderConfig::out_dim(feat_dim));
        let mlp = Mlp::new(store, rng, "decoder.mlp", &dims, Activation::Relu, g);
        Ok(Decoder {
            feat_dim,
            num_positions,
            pos,
            mlp,
        })
    }

    /// Final MLP layer; its last output column produces the alpha logits.
    pub fn output_layer(&self) -> &crate::nn::Linear {
        self.mlp.layers.last().expect("decoder has layers")
    }

    /// Decodes `slots` (K x D_slot) over `n` positions. `mask` is K x 1; slots
    /// with mask 0 get zero alpha and the rest are renormalised, which equals a
    /// softmax over the kept slots only.
    pub fn decode<T: Scalar>(&self, s: &mut Session<'_, T>, slots: Var, mask: Var, n: usize) -> Result<ReconVars> {
        if n != self.num_positions {
            return Err(Error::Config(format!(
                "positional table covers {} positions, feature map has {n}",
                self.num_positions
            )));
        }
        let k = s.shape(slots).0;
        if s.shape(mask) != (k, 1) {
            return Err(Error::Shape(format!("mask shape {:?} for {k} slots", s.shape(mask))));
        }
        let d = self.feat_dim;
        let slot_index: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let pos_index: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
        let broadcast = s.gather_rows(slots, &slot_index);
        let pos = s.param(self.pos);
        let pos = s.gather_rows(pos, &pos_index);
        let x = s.add(broadcast, pos);
        let out = self.mlp.forward(s, x);
        let per_slot = s.slice_cols(out, 0, d);
        let logits = s.slice_cols(out, d, 1);
        let logits = s.reshape(logits, k, n);
        let logits = s.transpose(logits);
        let soft = s.softmax_rows(logits);
        let mask_row = s.transpose(mask);
        let masked = s.mul_row(soft, mask_row);
        let total = s.sum_rows(masked);
        let total = s.add_scalar(total, T::min_positive_value());
        let inv = s.recip(total);
        let alpha_nk = s.mul_col(masked, inv);
        let alpha = s.transpose(alpha_nk);
        let alpha_flat = s.reshape(alpha, k * n, 1);
        let weighted = s.mul_col(per_slot, alpha_flat);
        let weighted = s.reshape(weighted, k, n * d);
        let summed = s.sum_cols(weighted);
        let recon = s.reshape(summed, n, d);
        Ok(ReconVars {
            recon,
            alpha,
            per_slot,
        })
    }

    /// Value-level decode.
    pub fn run<T: Scalar>(&self, store: &ParamStore<T>, slots: &Array2<T>, mask: &[bool]) -> Result<Reconstruction<T>> {
        let mut s = Session::new(store);
        let sv = s.constant(slots.clone());
        let m = Array2::from_shape_fn((mask.len(), 1), |(i, _)| if mask[i] { T::one() } else { T::zero() });
        let mv = s.constant(m);
        let r = self.decode(&mut s, sv, mv, self.num_positions)?;
        Ok(reconstruction(&s, &r))
    }
}

pub fn reconstruction<T: Scalar>(s: &Session<'_, T>, r: &ReconVars) -> Reconstruction<T> {
    let alpha = s.value(r.alpha).clone();
    let (k, n) = alpha.dim();
    let per_slot = s.value(r.per_slot).clone();
    let d = per_slot.ncols();
    Reconstruction {
        recon: s.value(r.recon).clone(),
        alpha,
        per_slot: per_slot
            .into_shape_with_order((k, n, d))
            .expect("per-slot rows are slot-major"),
    }
}

/// Mean squared error between the feature map and its reconstruction. The
/// target is treated as a constant.
pub fn reconstruction_loss<T: Scalar>(s: &mut Session<'_, T>, target: Var, recon: Var) -> Result<Var> {
    if s.shape(target) != s.shape(recon) {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            s.shape(recon),
            s.shape(target)
        )));
    }
    let t = s.value(target).clone();
    let t = s.constant(t);
    let diff = s.sub(recon, t);
    let sq = s.mul(diff, diff);
    Ok(s.mean_all(sq))
}

/// Value-level reconstruction loss.
pub fn mse<T: Scalar>(h: &Array2<T>, recon: &Array2<T>) -> Result<T> {
    if h.dim() != recon.dim() {
        return Err(Error::Shape(format!("reconstruction {:?} vs target {:?}", recon.dim(), h.dim())));
    }
    let n = T::from_usize(h.len()).expect("length fits");
    Ok(h.iter().zip(recon.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n)
}
