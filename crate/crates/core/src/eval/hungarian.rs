//! Maximum-weight assignment and clustering accuracy.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::data::ClassId;
use crate::error::{Error, Result};

/// Maximum-weight perfect matching on a square matrix (Kuhn-Munkres with
/// potentials, O(n^3)). Returns `col_of_row`.
pub fn max_weight_assignment(weights: &[Vec<i64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(weights.iter().all(|r| r.len() == n), "matrix must be square");
    let max = weights.iter().flatten().copied().max().unwrap_or(0);
    // minimise cost = max - w, 1-based arrays with a sentinel column 0
    let cost = |i: usize, j: usize| max - weights[i - 1][j - 1];
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    col_of_row
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_new: f64,
    pub n_old: usize,
    pub n_new: usize,
    /// cluster id -> class id for matched pairs.
    pub matching: BTreeMap<usize, ClassId>,
}

/// Scores predicted clusters against true classes with a single optimal
/// cluster-to-class matching over all instances. Instances are counted as
/// correct when their (cluster, class) pair is matched.
pub fn hungarian_accuracy(pred: &[usize], truth: &[ClassId], old_classes: &BTreeSet<ClassId>) -> Result<Accuracy> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty prediction set".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let clusters: Vec<usize> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let classes: Vec<ClassId> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let ci: HashMap<usize, usize> = clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let ki: HashMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let n = clusters.len().max(classes.len());
    let mut counts = vec![vec![0i64; n]; n];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[ci[&p]][ki[&t]] += 1;
    }
    let assignment = max_weight_assignment(&counts);
    let mut matching = BTreeMap::new();
    for (r, &c) in assignment.iter().enumerate() {
        if r < clusters.len() && c < classes.len() {
            matching.insert(clusters[r], classes[c]);
        }
    }
    let (mut hit_old, mut hit_new, mut n_old, mut n_new) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let hit = matching.get(&p) == Some(&t);
        if old_classes.contains(&t) {
            n_old += 1;
            hit_old += usize::from(hit);
        } else {
            n_new += 1;
            hit_new += usize::from(hit);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Accuracy {
        acc_all: ratio(hit_old + hit_new, n_old + n_new),
        acc_old: ratio(hit_old, n_old),
        acc_new: ratio(hit_new, n_new),
        n_old,
        n_new,
        matching,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_best(w: &[Vec<i64>]) -> i64 {
        fn go(w: &[Vec<i64>], row: usize, used: &mut Vec<bool>) -> i64 {
            if row == w.len() {
                return 0;
            }
            let mut best = i64::MIN;
            for c in 0..w.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.max(w[row][c] + go(w, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        go(w, 0, &mut vec![false; w.len()])
    }

    #[test]
    fn assignment_is_optimal_on_small_matrices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..300 {
            let n = rng.random_range(1..=6);
            let w: Vec<Vec<i64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0..20)).collect()).collect();
            let a = max_weight_assignment(&w);
            let mut seen = vec![false; n];
            for &c in &a {
                assert!(!seen[c]);
                seen[c] = true;
            }
            let total: i64 = a.iter().enumerate().map(|(r, &c)| w[r][c]).sum();
            assert_eq!(total, brute_force_best(&w));
        }
    }

    #[test]
    fn identity_and_relabeling_are_perfect() {
        let truth = vec![0, 0, 1, 2, 2, 3];
        let old: BTreeSet<ClassId> = [0, 1].into();
        let acc = hungarian_accuracy(&[0, 0, 1, 2, 2, 3], &truth, &old).unwrap();
        assert_eq!((acc.acc_all, acc.acc_old, acc.acc_new), (1.0, 1.0, 1.0));
        let acc = hungarian_accuracy(&[7, 7, 4, 9, 9, 1], &truth, &old).unwrap();
        assert_eq!((acc.acc_all, acc.acc_old, acc.acc_new), (1.0, 1.0, 1.0));
        assert_eq!(acc.matching[&7], 0);
    }

    #[test]
    fn contingency_example() {
        // rows are clusters: [[2,0,0],[0,1,1],[0,1,1]]
        let pred = [0, 0, 1, 1, 2, 2];
        let truth = [0, 0, 1, 2, 1, 2];
        let acc = hungarian_accuracy(&pred, &truth, &BTreeSet::new()).unwrap();
        assert!((acc.acc_all - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(acc.acc_old, 0.0);
        assert_eq!(acc.n_old, 0);
    }

    #[test]
    fn weighted_mean_identity() {
        let pred = [0, 1, 1, 2, 0, 2, 2, 1];
        let truth = [0, 0, 1, 1, 2, 2, 3, 3];
        let old: BTreeSet<ClassId> = [0, 1].into();
        let a = hungarian_accuracy(&pred, &truth, &old).unwrap();
        let mixed = (a.n_old as f64 * a.acc_old + a.n_new as f64 * a.acc_new) / (a.n_old + a.n_new) as f64;
        assert!((a.acc_all - mixed).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_is_an_error() {
        assert!(matches!(
            hungarian_accuracy(&[], &[], &BTreeSet::new()),
            Err(Error::InvalidInput(_))
        ));
    }
}
