//! Full model: backbone, clusterer, decoder and representation head, plus
//! the batch objective and its gradients.

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use super::config::PipelineConfig;
use crate::autodiff::Var;
use crate::backbone::Backbone;
use crate::clusterer::{slot_state, Clusterer, ClustererConfig, SelectionMode, SlotState, SlotVars};
use crate::data::{ClassId, Sample};
use crate::decoder::{reconstruction_loss, Decoder, DecoderConfig, ReconVars};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::representation::{
    overall_loss, pool_slots, sup_contrastive, unsup_contrastive, LossWeights, ProjectionConfig, Representation,
};
use crate::scalar::Scalar;
use crate::seeds::{derive_seed, rng_for, stream};

/// Everything after the backbone.
#[derive(Clone, Debug)]
pub struct Head {
    pub clusterer: Clusterer,
    pub decoder: Decoder,
    pub representation: Representation,
}

/// Per-sample graph outputs.
#[derive(Clone, Debug)]
pub struct SampleVars {
    pub slots: SlotVars,
    pub recon: ReconVars,
    pub rec_loss: Var,
    /// 1 x 3D.
    pub g_all: Var,
}

impl Head {
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        clusterer: &ClustererConfig,
        decoder: &DecoderConfig,
        projection: &ProjectionConfig,
        feat_dim: usize,
        num_positions: usize,
    ) -> Result<Self> {
        let c = Clusterer::new(store, rng, clusterer, feat_dim)?;
        let d = Decoder::new(store, rng, decoder, clusterer.d_slot, feat_dim, num_positions)?;
        let r = Representation::new(store, rng, projection, clusterer.d_slot, feat_dim)?;
        Ok(Head {
            clusterer: c,
            decoder: d,
            representation: r,
        })
    }

    /// Clusters, decodes and fuses one feature map (`local` N x D, `global` 1 x D).
    pub fn encode<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        local: Var,
        global: Var,
        seed: u64,
        mode: SelectionMode,
    ) -> Result<SampleVars> {
        let n = s.shape(local).0;
        let slots = self.clusterer.forward(s, local, seed, mode)?;
        let sel = &slots.selection;
        let recon = self.decoder.decode(s, slots.slots, sel.mask, n)?;
        let rec_loss = reconstruction_loss(s, local, recon.recon)?;
        let (mean, max) = pool_slots(s, slots.slots, sel.mask, &sel.hard)?;
        let g_all = self.representation.fuse(s, global, mean, max)?;
        Ok(SampleVars {
            slots,
            recon,
            rec_loss,
            g_all,
        })
    }
}

/// Contrastive part of the objective on stacked view embeddings.
#[derive(Clone, Copy, Debug)]
pub struct HeadLosses {
    pub sup: Option<Var>,
    pub unsup: Var,
    /// `lambda_s * sup + lambda_u * unsup`.
    pub weighted: Var,
}

/// `g1`, `g2` are B x 3D (row i of each is a view of sample i).
pub fn head_losses<T: Scalar>(
    s: &mut Session<'_, T>,
    rep: &Representation,
    g1: Var,
    g2: Var,
    labels: &[Option<ClassId>],
    w: &LossWeights,
) -> Result<HeadLosses> {
    let z1 = rep.project(s, g1)?;
    let z2 = rep.project(s, g2)?;
    let unsup = unsup_contrastive(s, z1, z2, w.temperature_u)?;
    let labeled: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.is_some()).map(|(i, _)| i).collect();
    let sup = if labeled.is_empty() {
        None
    } else {
        let a = s.gather_rows(z1, &labeled);
        let b = s.gather_rows(z2, &labeled);
        let z = s.concat_rows(&[a, b]);
        let y: Vec<ClassId> = labeled
            .iter()
            .chain(&labeled)
            .map(|&i| labels[i].expect("filtered to labeled"))
            .collect();
        Some(sup_contrastive(s, z, &y, w.temperature_s)?)
    };
    let u = s.scale(unsup, T::lit(w.lambda_u));
    let weighted = match sup {
        Some(l) => {
            let l = s.scale(l, T::lit(w.lambda_s));
            s.add(u, l)
        }
        None => u,
    };
    Ok(HeadLosses { sup, unsup, weighted })
}

/// Loss components of one step, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub rec: f64,
    pub sup: f64,
    pub unsup: f64,
    pub overall: f64,
    /// Mean keep probability; enters the objective with the sparsity weight.
    pub sparsity: f64,
    /// Mean number of kept slots per view.
    pub kept: f64,
}

impl LossValues {
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("reconstruction", self.rec),
            ("supervised contrastive", self.sup),
            ("unsupervised contrastive", self.unsup),
            ("sparsity", self.sparsity),
        ] {
            if !v.is_finite() {
                return Err(Error::numeric("training loss", format!("{name} loss is {v}")));
            }
        }
        Ok(())
    }
}

/// One training example: two views and an optional label.
#[derive(Clone, Debug)]
pub struct BatchItem<T> {
    pub view1: Sample<T>,
    pub view2: Sample<T>,
    pub label: Option<ClassId>,
}

/// Flat per-parameter gradient list, indexed like the store.
pub type GradList<T> = Vec<Option<Array2<T>>>;

fn accumulate<T: Scalar>(acc: &mut GradList<T>, grads: Vec<(crate::nn::ParamId, Array2<T>)>) {
    for (id, g) in grads {
        match &mut acc[id.index()] {
            Some(a) => *a += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: PipelineConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone<T>,
    pub head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(cfg.seed, &[stream::PARAMS]);
        let backbone = Backbone::build(&cfg.backbone, &mut store, &mut rng)?;
        let n = cfg.backbone.num_positions();
        let head = Head::new(
            &mut store,
            &mut rng,
            &cfg.clusterer,
            &cfg.decoder,
            &cfg.projection,
            cfg.backbone.feat_dim,
            n,
        )?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            backbone,
            head,
        })
    }

    pub fn embed_dim(&self) -> usize {
        3 * self.cfg.backbone.feat_dim
    }

    fn encode_sample<'s>(
        &'s self,
        sample: &Sample<T>,
        seed: u64,
        mode: SelectionMode,
    ) -> Result<(Session<'s, T>, SampleVars)> {
        let mut s = Session::new(&self.store);
        let fv = self.backbone.forward(&mut s, sample)?;
        let sv = self.head.encode(&mut s, fv.local, fv.global, seed, mode)?;
        Ok((s, sv))
    }

    /// Unified vector and slot state of one sample under evaluation settings.
    pub fn embed(&self, sample: &Sample<T>, seed: u64) -> Result<(Array2<T>, SlotState<T>)> {
        let (s, sv) = self.encode_sample(sample, seed, self.cfg.clusterer.eval_mode())?;
        Ok((s.value(sv.g_all).clone(), slot_state(&s, &sv.slots)))
    }

    /// Loss values and summed gradients of the batch objective. Samples are
    /// encoded in parallel, the contrastive head runs once on the stacked
    /// embeddings, and its gradient is pushed back into each sample graph.
    /// The result does not depend on the number of threads.
    pub fn batch_gradients(
        &self,
        batch: &[BatchItem<T>],
        step_seed: u64,
        mode: SelectionMode,
        sparsity_weight: f64,
    ) -> Result<(LossValues, GradList<T>)> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::InvalidInput(format!("batch of {b} has no negatives")));
        }
        let w = &self.cfg.loss;
        let k = self.cfg.clusterer.k_max;
        let views: Vec<(usize, usize)> = (0..2).flat_map(|v| (0..b).map(move |i| (v, i))).collect();
        let mut encoded: Vec<(Session<'_, T>, SampleVars)> = views
            .par_iter()
            .map(|&(v, i)| {
                let sample = if v == 0 { &batch[i].view1 } else { &batch[i].view2 };
                self.encode_sample(sample, derive_seed(step_seed, &[i as u64, v as u64]), mode)
            })
            .collect::<Result<_>>()?;

        let g_rows: Vec<Array2<T>> = encoded.iter().map(|(s, sv)| s.value(sv.g_all).clone()).collect();
        let stack = |rows: &[Array2<T>]| {
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        };
        let labels: Vec<Option<ClassId>> = batch.iter().map(|it| it.label).collect();
        let mut head = Session::new(&self.store);
        let g1 = head.leaf(stack(&g_rows[..b]), true);
        let g2 = head.leaf(stack(&g_rows[b..]), true);
        let hl = head_losses(&mut head, &self.head.representation, g1, g2, &labels, w)?;
        let head_grads = head.backward(hl.weighted);
        let dg1 = head_grads.get_or_zeros(g1, head.shape(g1));
        let dg2 = head_grads.get_or_zeros(g2, head.shape(g2));
        let sup = hl.sup.map(|v| head.scalar(v).as_f64()).unwrap_or(0.0);
        let unsup = head.scalar(hl.unsup).as_f64();

        let rec_scale = T::lit(w.lambda_rec / (2 * b) as f64);
        let sparsity_scale = T::lit(sparsity_weight / (2 * b * k) as f64);
        let per_sample: Vec<(f64, f64, usize, Vec<_>)> = encoded
            .par_iter_mut()
            .enumerate()
            .map(|(j, (s, sv))| {
                let (v, i) = views[j];
                let dg = if v == 0 { &dg1 } else { &dg2 };
                let upstream = s.constant(dg.row(i).insert_axis(Axis(0)).to_owned());
                let through_g = s.mul(sv.g_all, upstream);
                let through_g = s.sum_all(through_g);
                let rec = s.scale(sv.rec_loss, rec_scale);
                let kp = s.sum_all(sv.slots.selection.keep_prob);
                let sp = s.scale(kp, sparsity_scale);
                let obj = s.add(through_g, rec);
                let obj = s.add(obj, sp);
                let grads = s.backward(obj);
                let kept = sv.slots.selection.hard.iter().filter(|&&h| h).count();
                (
                    s.scalar(sv.rec_loss).as_f64(),
                    s.scalar(kp).as_f64(),
                    kept,
                    s.param_grads(&grads),
                )
            })
            .collect();
        drop(encoded);

        let mut acc: GradList<T> = vec![None; self.store.len()];
        accumulate(&mut acc, head.param_grads(&head_grads));
        let mut rec = 0.0;
        let mut keep_prob = 0.0;
        let mut kept = 0usize;
        for (r, kp, kc, g) in per_sample {
            rec += r;
            keep_prob += kp;
            kept += kc;
            accumulate(&mut acc, g);
        }
        let n_views = (2 * b) as f64;
        let rec = rec / n_views;
        let values = LossValues {
            rec,
            sup,
            unsup,
            overall: overall_loss(rec, sup, unsup, w),
            sparsity: keep_prob / (n_views * k as f64),
            kept: kept as f64 / n_views,
        };
        values.check_finite()?;
        Ok((values, acc))
    }
}

/// The batch objective as one graph over precomputed feature maps. `inputs`
/// holds `(local, global)` per view: the first `B` entries are view 1.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<T: Scalar>(
    s: &mut Session<'_, T>,
    head: &Head,
    inputs: &[(Var, Var)],
    labels: &[Option<ClassId>],
    step_seed: u64,
    mode: SelectionMode,
    w: &LossWeights,
    sparsity_weight: f64,
) -> Result<Var> {
    let b = labels.len();
    if inputs.len() != 2 * b {
        return Err(Error::Shape(format!("{} feature maps for {b} two-view samples", inputs.len())));
    }
    let mut g = Vec::with_capacity(2 * b);
    let mut recs = Vec::with_capacity(2 * b);
    let mut keep = Vec::with_capacity(2 * b);
    for (j, &(local, global)) in inputs.iter().enumerate() {
        let (v, i) = (j / b, j % b);
        let sv = head.encode(s, local, global, derive_seed(step_seed, &[i as u64, v as u64]), mode)?;
        g.push(sv.g_all);
        recs.push(sv.rec_loss);
        keep.push(sv.slots.selection.keep_prob);
    }
    let g1 = s.concat_rows(&g[..b]);
    let g2 = s.concat_rows(&g[b..]);
    let hl = head_losses(s, &head.representation, g1, g2, labels, w)?;
    let rec_all = s.concat_rows(&recs);
    let rec = s.mean_all(rec_all);
    let rec = s.scale(rec, T::lit(w.lambda_rec));
    let keep_all = s.concat_rows(&keep);
    let sparsity = s.mean_all(keep_all);
    let sparsity = s.scale(sparsity, T::lit(sparsity_weight));
    let total = s.add(hl.weighted, rec);
    Ok(s.add(total, sparsity))
}
