use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use super::{ClassId, Dataset, Instance, Source, SyntheticScene};
use crate::error::{Error, Result};
use crate::seeds::{rng_for, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetConfig {
    pub n_classes: usize,
    pub parts_min: usize,
    pub parts_max: usize,
    pub instances_per_class: usize,
    pub grid: usize,
    pub palette_size: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        SyntheticDatasetConfig {
            n_classes: 10,
            parts_min: 2,
            parts_max: 8,
            instances_per_class: 100,
            grid: 6,
            palette_size: 16,
            seed: 0,
        }
    }
}

/// A scene with `n_parts` distinct palette parts drawn uniformly.
pub fn random_scene<R: Rng + ?Sized>(
    rng: &mut R,
    grid: usize,
    n_parts: usize,
    palette_size: usize,
    class_id: ClassId,
) -> Result<SyntheticScene> {
    if n_parts > palette_size {
        return Err(Error::InvalidInput(format!(
            "{n_parts} distinct parts requested from a palette of {palette_size}"
        )));
    }
    let mut parts = sample(rng, palette_size, n_parts).into_vec();
    parts.sort_unstable();
    SyntheticScene::random_layout(rng, grid, grid, parts, class_id)
}

/// Class-balanced synthetic collection. Every class owns a distinct set of
/// palette parts (its signature); instances re-draw the spatial layout, so the
/// class is recoverable from which parts are present.
pub fn synthetic_dataset(cfg: &SyntheticDatasetConfig) -> Result<Dataset> {
    let SyntheticDatasetConfig {
        n_classes,
        parts_min,
        parts_max,
        instances_per_class,
        grid,
        palette_size,
        seed,
    } = *cfg;
    if parts_min == 0 || parts_min > parts_max {
        return Err(Error::Config(format!(
            "invalid part range {parts_min}..={parts_max}"
        )));
    }
    if parts_max > grid * grid {
        return Err(Error::InvalidInput(format!(
            "grid {grid}x{grid} too small for {parts_max} parts"
        )));
    }
    if parts_max > palette_size {
        return Err(Error::Config(format!(
            "palette of {palette_size} cannot supply {parts_max} distinct parts"
        )));
    }
    let mut rng = rng_for(seed, &[stream::DATASET]);
    let mut signatures: Vec<Vec<usize>> = Vec::with_capacity(n_classes);
    let mut taken = BTreeSet::new();
    let mut attempts = 0;
    while signatures.len() < n_classes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!(
                "cannot draw {n_classes} distinct part signatures from a palette of {palette_size}"
            )));
        }
        let k = rng.random_range(parts_min..=parts_max);
        let mut parts = sample(&mut rng, palette_size, k).into_vec();
        parts.sort_unstable();
        if taken.insert(parts.clone()) {
            signatures.push(parts);
        }
    }
    let mut instances = Vec::with_capacity(n_classes * instances_per_class);
    for (class, parts) in signatures.iter().enumerate() {
        for _ in 0..instances_per_class {
            let scene =
                SyntheticScene::random_layout(&mut rng, grid, grid, parts.clone(), class as ClassId)?;
            instances.push((class as ClassId, scene));
        }
    }
    let instances = instances
        .into_iter()
        .enumerate()
        .map(|(i, (class_id, scene))| Instance {
            id: format!("{i:06}"),
            class_id,
            source: Source::Scene(scene),
        })
        .collect();
    Dataset::new(instances)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_single_part() {
        let cfg = SyntheticDatasetConfig {
            n_classes: 1,
            parts_min: 1,
            parts_max: 1,
            instances_per_class: 5,
            ..Default::default()
        };
        let ds = synthetic_dataset(&cfg).unwrap();
        for inst in &ds.instances {
            let Source::Scene(scene) = &inst.source else { panic!() };
            assert_eq!(scene.parts.len(), 1);
            assert!(scene.cells.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn ten_classes_are_balanced() {
        let cfg = SyntheticDatasetConfig::default();
        let ds = synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 1000);
        let mut counts = [0usize; 10];
        for inst in &ds.instances {
            counts[inst.class_id as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100));
    }

    #[test]
    fn grid_too_small_is_rejected() {
        let cfg = SyntheticDatasetConfig {
            grid: 2,
            parts_max: 5,
            ..Default::default()
        };
        assert!(matches!(synthetic_dataset(&cfg), Err(Error::InvalidInput(_))));
    }
}
