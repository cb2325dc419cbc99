//! Training loop, dataset loading and model evaluation.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{DataKind, PipelineConfig};
use super::model::{BatchItem, LossValues, Model};
use super::optim::{learning_rate, Optimizer};
use crate::data::{
    build_split, dataset_from_dir, make_views, read_index_csv, synthetic_dataset, ClassId, Dataset, Instance,
    InstanceId, Partition, Sample, SplitSpec, SyntheticDatasetConfig,
};
use crate::error::{Error, Result};
use crate::eval::{cluster_and_score, ClusterReport};
use crate::scalar::Scalar;
use crate::seeds::{derive_seed, hash_str, rng_for, stream};

/// Mean loss components over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub rec: f64,
    pub sup: f64,
    pub unsup: f64,
    pub overall: f64,
    pub sparsity: f64,
    pub kept: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub values: LossValues,
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub dataset: Dataset,
    pub split: SplitSpec,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub report: ClusterReport,
}

/// Builds or reads the dataset described by `cfg.data`.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match d.kind {
        DataKind::Synthetic => synthetic_dataset(&SyntheticDatasetConfig {
            n_classes: d.n_classes,
            parts_min: d.parts_min,
            parts_max: d.parts_max,
            instances_per_class: d.instances_per_class,
            grid: cfg.backbone.grid(),
            palette_size: cfg.backbone.palette_size,
            seed: d.seed,
        }),
        DataKind::Index => read_index_csv(data_path(cfg)?),
        DataKind::Directory => dataset_from_dir(data_path(cfg)?),
    }
}

fn data_path(cfg: &PipelineConfig) -> Result<&Path> {
    cfg.data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("data.path is not set".into()))
}

/// Reads `data.split_path` when set, otherwise builds the split.
pub fn load_split(cfg: &PipelineConfig, dataset: &Dataset) -> Result<SplitSpec> {
    match &cfg.data.split_path {
        Some(p) => SplitSpec::read(p),
        None => build_split(&dataset.index(), &cfg.data.known, cfg.data.labeled_fraction, cfg.data.seed),
    }
}

/// Un-augmented input of an instance. Synthetic noise is fixed per instance.
pub fn base_sample<T: Scalar>(cfg: &PipelineConfig, inst: &Instance) -> Result<Sample<T>> {
    let noise = derive_seed(cfg.data.seed, &[stream::NOISE, hash_str(&inst.id)]);
    inst.load_sample(cfg.backbone.input_size, noise)
}

/// Instances of `dataset` in split order, paired with their split entry.
fn split_instances<'d>(dataset: &'d Dataset, split: &SplitSpec) -> Result<Vec<(&'d Instance, Partition)>> {
    let pos = dataset.position_map();
    split
        .entries
        .iter()
        .map(|e| {
            let &i = pos
                .get(e.instance_id.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("split instance {} is not in the dataset", e.instance_id)))?;
            let inst = &dataset.instances[i];
            if inst.class_id != e.class_id {
                return Err(Error::InvalidInput(format!(
                    "instance {} has class {} in the dataset but {} in the split",
                    e.instance_id, inst.class_id, e.class_id
                )));
            }
            Ok((inst, e.partition))
        })
        .collect()
}

/// Evaluation-mode unified vectors of every instance in `split`, in split order.
pub fn embed_split<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    split: &SplitSpec,
) -> Result<(Vec<InstanceId>, Array2<f64>)> {
    let items = split_instances(dataset, split)?;
    let dim = model.embed_dim();
    let rows: Vec<Vec<f64>> = items
        .par_iter()
        .map(|(inst, _)| {
            let sample = base_sample::<T>(&model.cfg, inst)?;
            let seed = derive_seed(model.cfg.seed, &[stream::EVAL, hash_str(&inst.id)]);
            let (g, _) = model.embed(&sample, seed)?;
            Ok(g.iter().map(|v| v.as_f64()).collect())
        })
        .collect::<Result<_>>()?;
    let mut x = Array2::zeros((rows.len(), dim));
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            x[[r, c]] = *v;
        }
    }
    Ok((items.iter().map(|(i, _)| i.id.clone()).collect(), x))
}

/// Cluster count used when none is given: `data.eval_k`, else the class count.
pub fn default_k(cfg: &PipelineConfig, split: &SplitSpec) -> usize {
    if cfg.data.eval_k > 0 {
        cfg.data.eval_k
    } else {
        split.all_classes().len()
    }
}

/// Embeds all split instances with hard selection, clusters them and scores
/// the unlabeled part.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    split: &SplitSpec,
    k: usize,
) -> Result<ClusterReport> {
    if split.entries.is_empty() {
        return Err(Error::InvalidInput("empty split".into()));
    }
    let (ids, x) = embed_split(model, dataset, split)?;
    cluster_and_score(&ids, &x, split, k, model.cfg.seed)
}

fn epoch_record(epoch: usize, steps: &[StepRecord]) -> EpochRecord {
    let n = steps.len().max(1) as f64;
    let mean = |f: fn(&LossValues) -> f64| steps.iter().map(|s| f(&s.values)).sum::<f64>() / n;
    EpochRecord {
        epoch,
        steps: steps.len(),
        rec: mean(|v| v.rec),
        sup: mean(|v| v.sup),
        unsup: mean(|v| v.unsup),
        overall: mean(|v| v.overall),
        sparsity: mean(|v| v.sparsity),
        kept: mean(|v| v.kept),
        lr: steps.last().map_or(0.0, |s| s.lr),
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains a model on `cfg`, evaluates it, and returns everything produced.
/// With `out_dir` set, writes `metrics.jsonl`, `split.txt` and a checkpoint
/// (`model.safetensors`) that is replaced atomically after every epoch.
pub fn train<T: Scalar>(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cfg.run.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        return pool.install(|| train_inner(cfg, out_dir));
    }
    train_inner(cfg, out_dir)
}

fn train_inner<T: Scalar>(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    let dataset = load_dataset(cfg)?;
    let split = load_split(cfg, &dataset)?;
    let items = split_instances(&dataset, &split)?;
    let labels: Vec<Option<ClassId>> = items
        .iter()
        .map(|(inst, part)| (*part == Partition::Labeled).then_some(inst.class_id))
        .collect();
    let mut model = Model::<T>::new(cfg)?;
    let b = cfg.optim.batch_size.min(items.len());
    if b < 2 {
        return Err(Error::InvalidInput(format!("{} instances cannot form a batch", items.len())));
    }
    let steps_per_epoch = items.len().div_ceil(b);
    let total_steps = steps_per_epoch * cfg.optim.epochs;
    log::info!(
        "training on {} instances ({} labeled), {} parameters, {steps_per_epoch} steps per epoch",
        items.len(),
        split.num_labeled(),
        model.store.num_scalars()
    );

    let metrics = out_dir.map(|d| d.join("metrics.jsonl"));
    let ckpt_path = out_dir.map(|d| d.join("model.safetensors"));
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        split.write(&dir.join("split.txt"))?;
        if let Some(m) = &metrics {
            if m.exists() {
                std::fs::remove_file(m).map_err(|e| Error::io(m, e))?;
            }
        }
    }

    let mut opt = Optimizer::<T>::new(&cfg.optim, model.store.len());
    let mut history = Vec::with_capacity(cfg.optim.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mode = cfg.clusterer.selection_mode;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut global_step = 0;
    for epoch in 1..=cfg.optim.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let start = steps.len();
        for chunk in order.chunks(b) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<BatchItem<T>> = chunk
                .par_iter()
                .map(|&i| {
                    let inst = items[i].0;
                    let base = base_sample::<T>(cfg, inst)?;
                    let seed = derive_seed(cfg.seed, &[stream::VIEW, epoch as u64, hash_str(&inst.id)]);
                    let pair = make_views(&base, &inst.id, &cfg.data.aug, seed)?;
                    Ok(BatchItem {
                        view1: pair.view1,
                        view2: pair.view2,
                        label: labels[i],
                    })
                })
                .collect::<Result<_>>()?;
            let lr = learning_rate(&cfg.optim, global_step, total_steps);
            let step_seed = derive_seed(cfg.seed, &[stream::STEP, global_step as u64]);
            let (values, grads) = model.batch_gradients(&batch, step_seed, mode, cfg.clusterer.sparsity_at(epoch))?;
            opt.step(&mut model.store, grads, lr);
            steps.push(StepRecord {
                epoch,
                step: global_step,
                lr,
                values,
            });
            global_step += 1;
        }
        let rec = epoch_record(epoch, &steps[start..]);
        log::info!(
            "epoch {epoch}: overall {:.5} rec {:.5} sup {:.5} unsup {:.5} kept {:.2}",
            rec.overall,
            rec.rec,
            rec.sup,
            rec.unsup,
            rec.kept
        );
        if let Some(m) = &metrics {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
            append_line(m, &line)?;
        }
        history.push(rec);
        if let Some(p) = &ckpt_path {
            Checkpoint::from_model(&model, epoch, &history, None).save(p)?;
        }
    }

    let k = default_k(cfg, &split);
    let report = evaluate_model(&model, &dataset, &split, k)?;
    log::info!(
        "evaluation K={k}: all {:.4} old {:.4} new {:.4}",
        report.acc_all,
        report.acc_old,
        report.acc_new
    );
    if let (Some(m), Some(p), Some(dir)) = (&metrics, &ckpt_path, out_dir) {
        let line = serde_json::json!({
            "eval": {
                "k": report.k,
                "acc_all": report.acc_all,
                "acc_old": report.acc_old,
                "acc_new": report.acc_new,
                "n_old": report.n_old,
                "n_new": report.n_new,
            }
        });
        append_line(m, &line.to_string())?;
        std::fs::write(dir.join("report.txt"), report.to_kv()).map_err(|e| Error::io(dir, e))?;
        report.write_assignments_csv(&dir.join("assignments.csv"))?;
        Checkpoint::from_model(&model, cfg.optim.epochs, &history, Some(&report)).save(p)?;
    }
    Ok(TrainOutcome {
        model,
        dataset,
        split,
        history,
        steps,
        report,
    })
}
