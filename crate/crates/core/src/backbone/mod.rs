//! Feature encoders: a vision transformer adapter and a synthetic stand-in.

mod synthetic;
mod vit;

use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView3};
use rand::Rng;

pub use self::synthetic::SyntheticBackbone;
pub use self::vit::{load_backbone_weights, trainable_block_names, VisionTransformer};

use crate::autodiff::Var;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    PretrainedVit,
    Synthetic,
}

impl FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained-vit" => Ok(BackboneKind::PretrainedVit),
            "synthetic" => Ok(BackboneKind::Synthetic),
            other => Err(Error::Config(format!("unknown backbone kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::PretrainedVit => "pretrained-vit",
            BackboneKind::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Input side length in pixels (cells for the synthetic backbone).
    pub input_size: usize,
    pub patch_size: usize,
    pub feat_dim: usize,
    /// Number of final transformer blocks left unfrozen.
    pub trainable_depth: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub weights_path: Option<PathBuf>,
    pub palette_size: usize,
    pub noise_std: f64,
    pub embed_scale: f64,
    /// Norm of the synthetic position code directions; 0 disables it.
    pub pos_scale: f64,
    pub palette_seed: u64,
}

impl Default for BackboneConfig {
    /// ViT-B/16 at 224 pixels with the last block unfrozen.
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::PretrainedVit,
            input_size: 224,
            patch_size: 16,
            feat_dim: 768,
            trainable_depth: 1,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            weights_path: None,
            palette_size: 16,
            noise_std: 0.05,
            embed_scale: 1.0,
            pos_scale: 0.0,
            palette_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 {
            return Err(Error::Config("backbone.feat_dim must be positive".into()));
        }
        if self.patch_size == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        // the synthetic backbone has no blocks and ignores trainable_depth
        if self.kind == BackboneKind::PretrainedVit && self.trainable_depth > self.depth {
            return Err(Error::Config(format!(
                "trainable depth {} exceeds the {} backbone blocks",
                self.trainable_depth, self.depth
            )));
        }
        Ok(())
    }

    /// Side length of the feature grid, `input_size / patch_size`.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_positions(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Per-image encoder output: local features (row-major N x D over an H x W
/// grid) and a global feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub local: Array2<T>,
    pub global: Array1<T>,
    pub image_id: String,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn num_positions(&self) -> usize {
        self.height * self.width
    }

    pub fn feat_dim(&self) -> usize {
        self.local.ncols()
    }

    /// Local features as an H x W x D view.
    pub fn grid(&self) -> ArrayView3<'_, T> {
        self.local
            .view()
            .into_shape_with_order((self.height, self.width, self.feat_dim()))
            .expect("local features are row-major N x D")
    }

    pub fn is_finite(&self) -> bool {
        self.local.iter().chain(self.global.iter()).all(|v| v.is_finite())
    }
}

/// Encoder output recorded in a graph: local is N x D, global is 1 x D.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub local: Var,
    pub global: Var,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub enum Backbone<T> {
    Synthetic(SyntheticBackbone<T>),
    Vit(VisionTransformer),
}

impl<T: Scalar> Backbone<T> {
    /// Builds the encoder, registering transformer parameters in `store` and
    /// loading `weights_path` when configured.
    pub fn build<R: Rng + ?Sized>(
        cfg: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        match cfg.kind {
            BackboneKind::Synthetic => Ok(Backbone::Synthetic(SyntheticBackbone::generate(
                cfg.palette_size,
                cfg.feat_dim,
                cfg.embed_scale,
                cfg.noise_std,
                cfg.grid(),
                cfg.palette_seed,
            )?
            .with_position_code(cfg.pos_scale, cfg.palette_seed)?)),
            BackboneKind::PretrainedVit => {
                let vit = VisionTransformer::new(store, rng, cfg)?;
                if let Some(path) = &cfg.weights_path {
                    let n = load_backbone_weights(store, path)?;
                    log::info!("loaded {n} backbone tensors from {}", path.display());
                }
                Ok(Backbone::Vit(vit))
            }
        }
    }

    pub fn grid(&self) -> usize {
        match self {
            Backbone::Synthetic(b) => b.grid,
            Backbone::Vit(v) => v.grid(),
        }
    }

    /// Records the encoder forward pass for one sample.
    pub fn forward(&self, s: &mut Session<'_, T>, sample: &Sample<T>) -> Result<FeatureVars> {
        match (self, sample) {
            (Backbone::Synthetic(b), Sample::Scene { scene, noise_seed }) => {
                let fm = b.render(scene, *noise_seed)?;
                let local = s.constant(fm.local);
                let global = s.constant(fm.global.insert_axis(ndarray::Axis(0)));
                Ok(FeatureVars {
                    local,
                    global,
                    height: fm.height,
                    width: fm.width,
                })
            }
            (Backbone::Vit(v), Sample::Image(img)) => v.forward(s, img),
            (Backbone::Synthetic(_), Sample::Image(_)) => Err(Error::Config(
                "synthetic backbone cannot encode images".into(),
            )),
            (Backbone::Vit(_), Sample::Scene { .. }) => Err(Error::Config(
                "transformer backbone cannot encode synthetic scenes".into(),
            )),
        }
    }
}

/// Encodes a non-empty batch. Pure in (parameters, inputs).
pub fn extract_features<T: Scalar>(
    backbone: &Backbone<T>,
    store: &ParamStore<T>,
    batch: &[(String, Sample<T>)],
) -> Result<Vec<FeatureMap<T>>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    batch
        .iter()
        .map(|(id, sample)| {
            let mut s = Session::new(store);
            let fv = backbone.forward(&mut s, sample)?;
            let fm = FeatureMap {
                height: fv.height,
                width: fv.width,
                local: s.value(fv.local).clone(),
                global: s.value(fv.global).row(0).to_owned(),
                image_id: id.clone(),
            };
            if !fm.is_finite() {
                return Err(Error::numeric("backbone output", format!("image {id}")));
            }
            Ok(fm)
        })
        .collect()
}

/// Names of the backbone parameters that receive gradient updates.
pub fn trainable_parameters(cfg: &BackboneConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    match cfg.kind {
        BackboneKind::Synthetic => Ok(Vec::new()),
        BackboneKind::PretrainedVit => trainable_block_names(cfg.depth, cfg.trainable_depth),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_vit_cfg() -> BackboneConfig {
        BackboneConfig {
            input_size: 8,
            patch_size: 4,
            feat_dim: 8,
            depth: 3,
            heads: 2,
            mlp_ratio: 2,
            trainable_depth: 1,
            ..BackboneConfig::default()
        }
    }

    fn test_image(seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..1.0)))
    }

    #[test]
    fn default_geometry() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.grid(), 14);
        assert_eq!(cfg.num_positions(), 196);
        assert_eq!(cfg.feat_dim, 768);
    }

    #[test]
    fn trainable_parameter_selection() {
        let cfg = BackboneConfig::default();
        let names = trainable_parameters(&cfg).unwrap();
        assert_eq!(names.len(), 12);
        assert!(names.iter().all(|n| n.starts_with("backbone.blocks.11.")));

        let frozen = BackboneConfig {
            trainable_depth: 0,
            ..cfg.clone()
        };
        assert!(trainable_parameters(&frozen).unwrap().is_empty());

        let too_deep = BackboneConfig {
            trainable_depth: 13,
            ..cfg
        };
        assert!(matches!(trainable_parameters(&too_deep), Err(Error::Config(_))));
    }

    #[test]
    fn store_flags_match_trainable_names() {
        let cfg = tiny_vit_cfg();
        let mut store = ParamStore::<f64>::new();
        Backbone::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut flagged: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.clone())
            .collect();
        let mut expected = trainable_parameters(&cfg).unwrap();
        flagged.sort();
        expected.sort();
        assert_eq!(flagged, expected);
    }

    #[test]
    fn vit_output_shapes_and_determinism() {
        let cfg = tiny_vit_cfg();
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = vec![
            ("a".to_string(), Sample::Image(test_image(1))),
            ("b".to_string(), Sample::Image(test_image(2))),
        ];
        let f1 = extract_features(&bb, &store, &batch).unwrap();
        let f2 = extract_features(&bb, &store, &batch).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1[0].grid().dim(), (2, 2, 8));
        assert_eq!(f1[0].global.len(), 8);
    }

    #[test]
    fn wrong_input_size_is_config_error() {
        let cfg = tiny_vit_cfg();
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = Image::new(Array3::<f64>::zeros((3, 12, 12)));
        let err = extract_features(&bb, &store, &[("x".into(), Sample::Image(img))]);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(matches!(
            extract_features(&bb, &store, &[]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let cfg = tiny_vit_cfg();
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let id = store.id("backbone.blocks.1.mlp.fc2.bias").unwrap();
        store.set_value(id, Array2::from_elem((1, 8), f64::NAN)).unwrap();
        let err = extract_features(&bb, &store, &[("x".into(), Sample::Image(test_image(0)))]).unwrap_err();
        match err {
            Error::Numeric { context, .. } => assert_eq!(context, "backbone block 1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_blocks_get_no_gradient() {
        let cfg = tiny_vit_cfg();
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut s = Session::new(&store);
        let fv = bb.forward(&mut s, &Sample::Image(test_image(3))).unwrap();
        let sq = s.mul(fv.local, fv.local);
        let loss = s.sum_all(sq);
        let grads = s.backward(loss);
        let names: Vec<_> = s
            .param_grads(&grads)
            .into_iter()
            .filter(|(_, g)| g.iter().any(|v| *v != 0.0))
            .map(|(id, _)| store.get(id).name.clone())
            .collect();
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| n.starts_with("backbone.blocks.2.")), "{names:?}");
    }

    #[test]
    fn loads_output_major_safetensors() {
        use safetensors::tensor::TensorView;
        let cfg = tiny_vit_cfg();
        let mut src = ParamStore::<f32>::new();
        let bb = Backbone::build(&cfg, &mut src, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // Write the tensors the way a PyTorch export lays them out.
        let mut blobs = Vec::new();
        for (_, p) in src.iter() {
            let name = p.name.strip_prefix("backbone.").unwrap().to_string();
            let (r, c) = p.value.dim();
            let (shape, data): (Vec<usize>, Vec<f32>) = if name.ends_with(".weight") && r > 1 {
                let t = p.value.t().as_standard_layout().into_owned();
                if name == "patch_embed.proj.weight" {
                    (vec![c, 3, 4, 4], t.iter().copied().collect())
                } else {
                    (vec![c, r], t.iter().copied().collect())
                }
            } else if name == "cls_token" {
                (vec![1, 1, c], p.value.iter().copied().collect())
            } else if name == "pos_embed" {
                (vec![1, r, c], p.value.iter().copied().collect())
            } else {
                (vec![c], p.value.iter().copied().collect())
            };
            blobs.push((name, shape, f32::to_le_bytes_vec(&data)));
        }
        let views: Vec<(String, TensorView<'_>)> = blobs
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(safetensors::Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.safetensors");
        safetensors::serialize_to_file(views, None, &path).unwrap();

        let loaded_cfg = BackboneConfig {
            weights_path: Some(path),
            ..cfg
        };
        let mut dst = ParamStore::<f32>::new();
        Backbone::build(&loaded_cfg, &mut dst, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        for ((_, a), (_, b)) in src.iter().zip(dst.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        let _ = bb;
    }
}
