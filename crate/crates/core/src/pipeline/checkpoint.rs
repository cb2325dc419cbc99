//! Model checkpoints: parameters as safetensors, run state in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::config::{PipelineConfig, Precision};
use super::model::Model;
use super::train::EpochRecord;
use crate::error::{Error, Result};
use crate::eval::ClusterReport;
use crate::scalar::Scalar;

const FORMAT: &str = "adagcd-checkpoint-1";

/// Header fields of a checkpoint, readable without knowing its precision.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config: PipelineConfig,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub report: Option<ClusterReport>,
    pub precision: Precision,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    /// Parameter name and value, in store order.
    pub params: Vec<(String, Array2<T>)>,
}

fn dtype_of<T: Scalar>() -> Dtype {
    if T::DTYPE == "F64" {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

fn precision_of<T: Scalar>() -> Precision {
    if T::DTYPE == "F64" {
        Precision::F64
    } else {
        Precision::F32
    }
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of `model`. Frozen parameters loaded from a weights file are
    /// left out; they are restored from that file on load.
    pub fn from_model(
        model: &Model<T>,
        epoch: usize,
        history: &[EpochRecord],
        report: Option<&ClusterReport>,
    ) -> Self {
        let skip_frozen = model.cfg.backbone.weights_path.is_some();
        let params = model
            .store
            .iter()
            .filter(|(_, p)| p.trainable || !skip_frozen)
            .map(|(_, p)| (p.name.clone(), (*p.value).clone()))
            .collect();
        Checkpoint {
            meta: CheckpointMeta {
                config: model.cfg.clone(),
                epoch,
                history: history.to_vec(),
                report: report.cloned(),
                precision: precision_of::<T>(),
            },
            params,
        }
    }

    /// Writes to a temporary sibling, then renames over `path`, so an
    /// interrupted write never leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(n, v)| {
                let flat: Vec<T> = v.iter().copied().collect();
                (n.clone(), T::to_le_bytes_vec(&flat), vec![v.nrows(), v.ncols()])
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b, s)| Ok((n.as_str(), TensorView::new(dtype_of::<T>(), s.clone(), b).map_err(|e| ckpt_err(path, e))?)))
            .collect::<Result<Vec<_>>>()?;
        let mut info = HashMap::new();
        info.insert("format".to_string(), FORMAT.to_string());
        info.insert("config".to_string(), self.meta.config.to_kv());
        info.insert("epoch".to_string(), self.meta.epoch.to_string());
        info.insert(
            "history".to_string(),
            serde_json::to_string(&self.meta.history).map_err(|e| ckpt_err(path, e))?,
        );
        if let Some(r) = &self.meta.report {
            info.insert("report".to_string(), r.to_kv());
        }
        let data = safetensors::serialize(views, Some(info)).map_err(|e| ckpt_err(path, e))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta = parse_meta(path, &bytes)?;
        if meta.precision != precision_of::<T>() {
            return Err(Error::Checkpoint(format!(
                "{} holds {} parameters",
                path.display(),
                meta.precision.name()
            )));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
        let mut params = Vec::new();
        for (name, view) in st.tensors() {
            let shape = view.shape();
            if shape.len() != 2 {
                return Err(ckpt_err(path, format!("{name} has rank {}", shape.len())));
            }
            let values = T::from_le_slice(view.data());
            let arr = Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|e| ckpt_err(path, e))?;
            params.push((name, arr));
        }
        Ok(Checkpoint { meta, params })
    }

    /// Rebuilds the model from the stored config and overwrites its parameters.
    pub fn into_model(self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(&self.meta.config)?;
        let mut seen = vec![false; model.store.len()];
        for (name, value) in self.params {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            model.store.set_value(id, value)?;
            seen[id.index()] = true;
        }
        let restored_elsewhere = model.cfg.backbone.weights_path.is_some();
        for (id, p) in model.store.iter() {
            if !seen[id.index()] && (p.trainable || !restored_elsewhere) {
                return Err(Error::Checkpoint(format!("missing parameter {}", p.name)));
            }
        }
        Ok(model)
    }
}

fn parse_meta(path: &Path, bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_err(path, "no metadata"))?;
    let get = |k: &str| info.get(k).ok_or_else(|| ckpt_err(path, format!("missing {k}")));
    if get("format")? != FORMAT {
        return Err(ckpt_err(path, "not a model checkpoint"));
    }
    let config = PipelineConfig::parse(get("config")?)?;
    let epoch = get("epoch")?.parse().map_err(|e| ckpt_err(path, e))?;
    let history = serde_json::from_str(get("history")?).map_err(|e| ckpt_err(path, e))?;
    let report = info.get("report").map(|r| ClusterReport::parse_kv(r)).transpose()?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(path, e))?;
    let precision = match st.tensors().first().map(|(_, v)| v.dtype()) {
        Some(Dtype::F64) => Precision::F64,
        Some(Dtype::F32) | None => Precision::F32,
        Some(other) => return Err(ckpt_err(path, format!("unsupported dtype {other:?}"))),
    };
    Ok(CheckpointMeta {
        config,
        epoch,
        history,
        report,
        precision,
    })
}

/// Reads only the header of a checkpoint.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_meta(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::model::tests::tiny_config;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut model = Model::<f32>::new(&tiny_config()).unwrap();
        for id in model.store.trainable_ids() {
            model.store.value_mut(id).mapv_inplace(|v| v * 1.000_001 + 1e-7);
        }
        let history = vec![EpochRecord {
            epoch: 1,
            steps: 3,
            rec: 0.25,
            sup: 1.0 / 3.0,
            unsup: 2.0,
            overall: 1.5,
            sparsity: 0.5,
            kept: 3.0,
            lr: 0.1,
        }];
        Checkpoint::from_model(&model, 1, &history, None).save(&path).unwrap();
        let meta = read_meta(&path).unwrap();
        assert_eq!(meta.precision, Precision::F32);
        assert_eq!(meta.history, history);
        assert_eq!(meta.config, model.cfg);
        let loaded = Checkpoint::<f32>::load(&path).unwrap().into_model().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(matches!(Checkpoint::<f64>::load(&path), Err(Error::Checkpoint(_))));
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn garbage_file_is_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(read_meta(&path), Err(Error::Checkpoint(_))));
    }
}
