//! Embedding export and the matching reader.

use std::path::Path;

use ndarray::Array2;

use super::model::Model;
use super::train::embed_split;
use crate::data::{ClassId, Dataset, InstanceId, Partition, SplitEntry, SplitSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), format!("{other:?}")),
    }
}

/// Writes `instance_id,class_id,partition,g0,...` with one row per split
/// instance. Values use the shortest representation that parses back exactly.
pub fn export_embeddings<T: Scalar>(model: &Model<T>, dataset: &Dataset, split: &SplitSpec, path: &Path) -> Result<usize> {
    let dim = model.embed_dim();
    let x = if split.entries.is_empty() {
        Array2::zeros((0, dim))
    } else {
        embed_split(model, dataset, split)?.1
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["instance_id".to_string(), "class_id".into(), "partition".into()];
    header.extend((0..dim).map(|i| format!("g{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (e, row) in split.entries.iter().zip(x.rows()) {
        let mut rec = vec![e.instance_id.clone(), e.class_id.to_string(), e.partition.tag().to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(split.entries.len())
}

/// Exported rows: split entries and the embedding matrix in file order.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub entries: Vec<SplitEntry>,
    pub vectors: Array2<f64>,
}

impl Embeddings {
    pub fn ids(&self) -> Vec<InstanceId> {
        self.entries.iter().map(|e| e.instance_id.clone()).collect()
    }
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let dim = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(3);
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let loc = || format!("{} row {}", path.display(), n + 2);
        if rec.len() != dim + 3 {
            return Err(Error::parse(loc(), format!("expected {} fields, found {}", dim + 3, rec.len())));
        }
        let class_id: ClassId = rec[1].parse().map_err(|_| Error::parse(loc(), "bad class id"))?;
        let partition = match &rec[2] {
            "L" => Partition::Labeled,
            "U" => Partition::Unlabeled,
            other => return Err(Error::parse(loc(), format!("bad partition {other:?}"))),
        };
        entries.push(SplitEntry {
            instance_id: rec[0].to_string(),
            class_id,
            partition,
        });
        for v in rec.iter().skip(3) {
            values.push(v.parse::<f64>().map_err(|_| Error::parse(loc(), format!("bad value {v:?}")))?);
        }
    }
    let vectors = Array2::from_shape_vec((entries.len(), dim), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Embeddings { entries, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::model::tests::tiny_config;
    use std::collections::BTreeSet;

    #[test]
    fn empty_split_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let model = Model::<f64>::new(&tiny_config()).unwrap();
        let split = SplitSpec {
            known_classes: BTreeSet::new(),
            seed: 0,
            entries: Vec::new(),
        };
        assert_eq!(export_embeddings(&model, &Dataset::default(), &split, &path).unwrap(), 0);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("instance_id,class_id,partition,g0,"));
        assert_eq!(text.trim_end().split(',').count(), 3 + 18);
        let back = read_embeddings(&path).unwrap();
        assert!(back.entries.is_empty());
    }
}
