//! Semi-supervised k-means with labeled points pinned to their class cluster.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::seeds::{rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent k-means++ initialisations; the lowest final objective wins.
    pub n_init: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iter: 100,
            tol: 1e-4,
            n_init: 10,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Constrained objective after each assignment + update round.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// Cluster index used for each known class.
    pub class_cluster: BTreeMap<ClassId, usize>,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    centroids
        .rows()
        .into_iter()
        .enumerate()
        .map(|(k, c)| (k, sq_dist(x, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Sum of squared distances of every point to its assigned centroid.
pub fn objective(x: &Array2<f64>, assignments: &[usize], centroids: &Array2<f64>) -> f64 {
    x.rows()
        .into_iter()
        .zip(assignments)
        .map(|(r, &k)| sq_dist(r, centroids.row(k)))
        .sum()
}

/// Clusters the rows of `x`. `labels[i] = Some(c)` pins row `i` to the
/// cluster of class `c`; known classes take clusters `0..|known|` in
/// ascending class order.
pub fn ss_kmeans(x: &Array2<f64>, labels: &[Option<ClassId>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} points", labels.len())));
    }
    if n == 0 {
        return Err(Error::InvalidInput("no points to cluster".into()));
    }
    let class_cluster: BTreeMap<ClassId, usize> = labels
        .iter()
        .flatten()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    let known = class_cluster.len();
    if cfg.k < known {
        return Err(Error::Config(format!("K = {} is below the {known} known classes", cfg.k)));
    }
    if cfg.k == 0 {
        return Err(Error::Config("K must be positive".into()));
    }
    if cfg.n_init == 0 {
        return Err(Error::Config("k-means needs at least one initialisation".into()));
    }
    let pinned: Vec<Option<usize>> = labels.iter().map(|l| l.map(|c| class_cluster[&c])).collect();
    let unlabeled: Vec<usize> = (0..n).filter(|&i| pinned[i].is_none()).collect();
    let mut best: Option<KMeansResult> = None;
    for run in 0..cfg.n_init {
        let mut rng = rng_for(cfg.seed, &[stream::KMEANS, run as u64]);
        let r = run_once(x, &pinned, &unlabeled, known, cfg, &mut rng, class_cluster.clone());
        let final_obj = |r: &KMeansResult| r.objective.last().copied().unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|b| final_obj(&r) < final_obj(b)) {
            best = Some(r);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

fn run_once<R: Rng>(
    x: &Array2<f64>,
    pinned: &[Option<usize>],
    unlabeled: &[usize],
    known: usize,
    cfg: &KMeansConfig,
    rng: &mut R,
    class_cluster: BTreeMap<ClassId, usize>,
) -> KMeansResult {
    let n = x.nrows();

    let d = x.ncols();
    let mut centroids = Array2::<f64>::zeros((cfg.k, d));
    let mut counts = vec![0usize; cfg.k];
    for (i, p) in pinned.iter().enumerate() {
        if let Some(k) = *p {
            centroids.row_mut(k).zip_mut_with(&x.row(i), |c, &v| *c += v);
            counts[k] += 1;
        }
    }
    for k in 0..known {
        centroids.row_mut(k).mapv_inplace(|v| v / counts[k] as f64);
    }

    // k-means++ for the remaining centroids, drawn from unlabeled points
    let pool: &[usize] = unlabeled;
    let all: Vec<usize> = (0..n).collect();
    let pool = if pool.is_empty() { &all[..] } else { pool };
    for k in known..cfg.k {
        let next = if k == 0 {
            pool[rng.random_range(0..pool.len())]
        } else {
            let d2: Vec<f64> = pool
                .iter()
                .map(|&i| {
                    (0..k)
                        .map(|j| sq_dist(x.row(i), centroids.row(j)))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            if total > 0.0 {
                let mut r = rng.random::<f64>() * total;
                let mut pick = pool[pool.len() - 1];
                for (idx, &w) in pool.iter().zip(&d2) {
                    if r < w {
                        pick = *idx;
                        break;
                    }
                    r -= w;
                }
                pick
            } else {
                pool[rng.random_range(0..pool.len())]
            }
        };
        centroids.row_mut(k).assign(&x.row(next));
    }

    let mut assignments: Vec<usize> = pinned.iter().map(|p| p.unwrap_or(0)).collect();
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iter.max(1) {
        iterations += 1;
        for &i in unlabeled {
            assignments[i] = nearest(x.row(i), &centroids).0;
        }
        let mut next = Array2::<f64>::zeros((cfg.k, d));
        let mut counts = vec![0usize; cfg.k];
        for (i, &k) in assignments.iter().enumerate() {
            next.row_mut(k).zip_mut_with(&x.row(i), |c, &v| *c += v);
            counts[k] += 1;
        }
        for k in 0..cfg.k {
            if counts[k] > 0 {
                next.row_mut(k).mapv_inplace(|v| v / counts[k] as f64);
            } else {
                next.row_mut(k).assign(&centroids.row(k));
            }
        }
        // Empty clusters move onto the unlabeled point farthest from its own
        // centroid; that point joins them at the next assignment step.
        let mut taken = Vec::new();
        for k in 0..cfg.k {
            if counts[k] == 0 {
                let far = unlabeled
                    .iter()
                    .filter(|i| !taken.contains(*i))
                    .map(|&i| (i, sq_dist(x.row(i), next.row(assignments[i]))))
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = far {
                    next.row_mut(k).assign(&x.row(i));
                    taken.push(i);
                }
            }
        }
        let shift = centroids
            .rows()
            .into_iter()
            .zip(next.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        trace.push(objective(x, &assignments, &centroids));
        if shift < cfg.tol {
            break;
        }
    }
    KMeansResult {
        assignments,
        centroids,
        objective: trace,
        iterations,
        class_cluster,
    }
}

/// Row-wise unit normalisation; zero rows are left unchanged.
pub fn l2_normalize_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}
