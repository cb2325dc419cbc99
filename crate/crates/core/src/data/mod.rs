//! Datasets, GCD splits and two-view augmentation.

mod augment;
mod image;
mod index;
mod scene;
mod split;
mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

pub use self::augment::{make_views, AugConfig, ViewPair};
pub use self::image::Image;
pub use self::index::{dataset_from_dir, read_index_csv};
pub use self::scene::SyntheticScene;
pub use self::split::{build_split, KnownClasses, Partition, SplitEntry, SplitSpec};
pub use self::synthetic::{random_scene, synthetic_dataset, SyntheticDatasetConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type ClassId = u32;
pub type InstanceId = String;

/// Where an instance's pixels (or synthetic layout) come from.
#[derive(Clone, Debug)]
pub enum Source {
    Scene(SyntheticScene),
    ImageFile(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub id: InstanceId,
    pub class_id: ClassId,
    pub source: Source,
}

/// Backbone input: a synthetic layout with the seed of its feature noise, or an image.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample<T> {
    Scene { scene: SyntheticScene, noise_seed: u64 },
    Image(Image<T>),
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate instance id {}", inst.id)));
            }
        }
        Ok(Dataset { instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// `(instance_id, class_id)` pairs in dataset order.
    pub fn index(&self) -> Vec<(InstanceId, ClassId)> {
        self.instances
            .iter()
            .map(|i| (i.id.clone(), i.class_id))
            .collect()
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.instances.iter().map(|i| i.class_id).collect()
    }

    pub fn position_map(&self) -> HashMap<&str, usize> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.id.as_str(), i))
            .collect()
    }
}

impl Instance {
    /// Un-augmented backbone input. Synthetic scenes get noise seeded by `noise_seed`.
    pub fn load_sample<T: Scalar>(&self, image_size: usize, noise_seed: u64) -> Result<Sample<T>> {
        match &self.source {
            Source::Scene(scene) => Ok(Sample::Scene {
                scene: scene.clone(),
                noise_seed,
            }),
            Source::ImageFile(path) => Ok(Sample::Image(Image::load(path, image_size)?)),
        }
    }
}
