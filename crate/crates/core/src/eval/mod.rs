//! Semi-supervised clustering of embeddings and All/Old/New scoring.

mod hungarian;
mod kmeans;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

pub use self::hungarian::{hungarian_accuracy, max_weight_assignment, Accuracy};
pub use self::kmeans::{l2_normalize_rows, objective, ss_kmeans, KMeansConfig, KMeansResult};

use crate::data::{ClassId, InstanceId, Partition, SplitSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub k: usize,
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    pub n_old: usize,
    pub n_new: usize,
    /// Cluster of every clustered instance, labeled ones included.
    pub assignments: Vec<(InstanceId, usize)>,
    pub matching: BTreeMap<usize, ClassId>,
}

impl ClusterReport {
    /// `key=value` lines. Floats use the shortest round-trip representation.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "k={}", self.k);
        let _ = writeln!(out, "acc_all={}", self.acc_all);
        let _ = writeln!(out, "acc_old={}", self.acc_old);
        let _ = writeln!(out, "acc_new={}", self.acc_new);
        let _ = writeln!(out, "n_old={}", self.n_old);
        let _ = writeln!(out, "n_new={}", self.n_new);
        let matching: Vec<String> = self.matching.iter().map(|(c, k)| format!("{c}:{k}")).collect();
        let _ = writeln!(out, "matching={}", matching.join(","));
        out
    }

    /// Parses the scalar fields written by [`ClusterReport::to_kv`];
    /// assignments are not part of that record.
    pub fn parse_kv(text: &str) -> Result<ClusterReport> {
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("report line {}", n + 1), "expected key=value"))?;
            map.insert(k.to_string(), v.to_string());
        }
        fn field<V: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<V> {
            map.get(key)
                .ok_or_else(|| Error::parse("report", format!("missing {key}")))?
                .parse()
                .map_err(|_| Error::parse("report", format!("bad value for {key}")))
        }
        let mut matching = BTreeMap::new();
        if let Some(m) = map.get("matching").filter(|m| !m.is_empty()) {
            for pair in m.split(',') {
                let (c, k) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::parse("report", format!("bad matching entry {pair:?}")))?;
                let c = c.parse().map_err(|_| Error::parse("report", "bad cluster id"))?;
                let k = k.parse().map_err(|_| Error::parse("report", "bad class id"))?;
                matching.insert(c, k);
            }
        }
        Ok(ClusterReport {
            k: field(&map, "k")?,
            acc_all: field(&map, "acc_all")?,
            acc_old: field(&map, "acc_old")?,
            acc_new: field(&map, "acc_new")?,
            n_old: field(&map, "n_old")?,
            n_new: field(&map, "n_new")?,
            assignments: Vec::new(),
            matching,
        })
    }

    pub fn write_assignments_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["instance_id", "cluster_id"]).map_err(|e| csv_err(path, e))?;
        for (id, c) in &self.assignments {
            w.write_record([id.as_str(), &c.to_string()]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), format!("{other:?}")),
    }
}

/// Clusters `embeddings` (one row per id in `ids`) with the labeled part of
/// `split` pinned, then scores the unlabeled part. Rows are unit-normalised
/// before clustering.
pub fn cluster_and_score(
    ids: &[InstanceId],
    embeddings: &Array2<f64>,
    split: &SplitSpec,
    k: usize,
    seed: u64,
) -> Result<ClusterReport> {
    if ids.len() != embeddings.nrows() {
        return Err(Error::Shape(format!("{} ids for {} embeddings", ids.len(), embeddings.nrows())));
    }
    let by_id: HashMap<&str, (ClassId, Partition)> = split
        .entries
        .iter()
        .map(|e| (e.instance_id.as_str(), (e.class_id, e.partition)))
        .collect();
    let mut labels = Vec::with_capacity(ids.len());
    let mut truth = Vec::with_capacity(ids.len());
    for id in ids {
        let &(class, part) = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("instance {id} is not in the split")))?;
        labels.push((part == Partition::Labeled).then_some(class));
        truth.push(class);
    }
    let mut x = embeddings.clone();
    l2_normalize_rows(&mut x);
    let km = ss_kmeans(&x, &labels, &KMeansConfig::new(k, seed))?;
    let (pred, true_u): (Vec<usize>, Vec<ClassId>) = labels
        .iter()
        .zip(km.assignments.iter().zip(&truth))
        .filter(|(l, _)| l.is_none())
        .map(|(_, (&p, &t))| (p, t))
        .unzip();
    let acc = hungarian_accuracy(&pred, &true_u, &split.known_classes)?;
    Ok(ClusterReport {
        k,
        acc_all: acc.acc_all,
        acc_old: acc.acc_old,
        acc_new: acc.acc_new,
        n_old: acc.n_old,
        n_new: acc.n_new,
        assignments: ids.iter().cloned().zip(km.assignments).collect(),
        matching: acc.matching,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_split, KnownClasses};
    use crate::nn::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn index(classes: u32, per: usize) -> Vec<(InstanceId, ClassId)> {
        (0..classes)
            .flat_map(|c| (0..per).map(move |i| (format!("{c}-{i}"), c)))
            .collect()
    }

    #[test]
    fn separated_embeddings_score_perfectly() {
        let idx = index(4, 20);
        let split = build_split(&idx, &KnownClasses::Count(2), 0.5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise: Array2<f64> = normal(&mut rng, (idx.len(), 8), 0.01);
        let mut x = noise;
        for (r, (_, c)) in idx.iter().enumerate() {
            x[[r, *c as usize]] += 1.0;
        }
        let ids: Vec<_> = idx.iter().map(|(i, _)| i.clone()).collect();
        let rep = cluster_and_score(&ids, &x, &split, 4, 0).unwrap();
        assert_eq!(rep.acc_all, 1.0);
        assert_eq!(rep.n_old + rep.n_new, split.num_unlabeled());
        let mixed = (rep.n_old as f64 * rep.acc_old + rep.n_new as f64 * rep.acc_new) / (rep.n_old + rep.n_new) as f64;
        assert!((rep.acc_all - mixed).abs() < 1e-12);
    }

    #[test]
    fn random_embeddings_sit_near_chance() {
        let c = 10;
        let idx = index(c, 100);
        let split = build_split(&idx, &KnownClasses::Count(5), 0.5, 3).unwrap();
        let ids: Vec<_> = idx.iter().map(|(i, _)| i.clone()).collect();
        let mut accs = Vec::new();
        for seed in 0..5 {
            let x: Array2<f64> = normal(&mut ChaCha8Rng::seed_from_u64(seed), (idx.len(), 16), 1.0);
            accs.push(cluster_and_score(&ids, &x, &split, c as usize, seed).unwrap().acc_all);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        // labeled points pull known clusters toward their classes a little,
        // so allow a generous band above 1/C
        assert!(mean > 0.05 && mean < 0.3, "{accs:?}");
    }

    #[test]
    fn kv_round_trip() {
        let rep = ClusterReport {
            k: 3,
            acc_all: 0.1 + 0.2,
            acc_old: 1.0 / 3.0,
            acc_new: 0.0,
            n_old: 3,
            n_new: 4,
            assignments: Vec::new(),
            matching: [(0, 2), (5, 1)].into(),
        };
        assert_eq!(ClusterReport::parse_kv(&rep.to_kv()).unwrap(), rep);
    }
}
