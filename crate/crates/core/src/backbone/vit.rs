//! Vision transformer encoder with timm/DINO parameter naming.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use safetensors::{Dtype, SafeTensors};

use super::{BackboneConfig, FeatureVars};
use crate::autodiff::Var;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{normal, Activation, LayerNorm, Linear, Mlp, ParamGroup, ParamStore, Session};
use crate::scalar::Scalar;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const LN_EPS: f64 = 1e-6;

pub(crate) const PREFIX: &str = "backbone.";

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    patch_size: usize,
    grid: usize,
    dim: usize,
    heads: usize,
    patch_embed: Linear,
    cls_token: crate::nn::ParamId,
    pos_embed: crate::nn::ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VisionTransformer {
    /// Registers randomly initialised parameters; only the last
    /// `cfg.trainable_depth` blocks are trainable.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.heads == 0 || !cfg.feat_dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "feature width {} not divisible into {} heads",
                cfg.feat_dim, cfg.heads
            )));
        }
        let g = ParamGroup::Backbone;
        let d = cfg.feat_dim;
        let grid = cfg.grid();
        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let first_trainable = cfg.depth - cfg.trainable_depth;

        let start = store.len();
        let patch_embed = Linear::new(store, rng, &format!("{PREFIX}patch_embed.proj"), patch_in, d, g);
        let cls_token = store.add(format!("{PREFIX}cls_token"), normal(rng, (1, d), 0.02), true, g);
        let pos_embed = store.add(
            format!("{PREFIX}pos_embed"),
            normal(rng, (grid * grid + 1, d), 0.02),
            true,
            g,
        );
        let mut frozen_ids: Vec<_> = (start..store.len()).collect();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("{PREFIX}blocks.{i}");
            let before = store.len();
            let block = Block {
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d, LN_EPS, g),
                qkv: Linear::new(store, rng, &format!("{p}.attn.qkv"), d, 3 * d, g),
                proj: Linear::new(store, rng, &format!("{p}.attn.proj"), d, d, g),
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d, LN_EPS, g),
                mlp: Mlp {
                    layers: vec![
                        Linear::new(store, rng, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, g),
                        Linear::new(store, rng, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, g),
                    ],
                    activation: Activation::Gelu,
                },
            };
            if i < first_trainable {
                frozen_ids.extend(before..store.len());
            }
            blocks.push(block);
        }
        let before = store.len();
        let norm = LayerNorm::new(store, &format!("{PREFIX}norm"), d, LN_EPS, g);
        frozen_ids.extend(before..store.len());
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for idx in frozen_ids {
            store.set_trainable(ids[idx], false);
        }
        Ok(VisionTransformer {
            patch_size: cfg.patch_size,
            grid,
            dim: d,
            heads: cfg.heads,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Flattens non-overlapping patches in (channel, row, column) order, the
    /// layout of a flattened convolution kernel.
    fn patchify<T: Scalar>(&self, img: &Image<T>) -> Array2<T> {
        let p = self.patch_size;
        let g = self.grid;
        let mut out = Array2::zeros((g * g, 3 * p * p));
        for py in 0..g {
            for px in 0..g {
                let row = py * g + px;
                let mut col = 0;
                for c in 0..3 {
                    let (m, s) = (T::lit(IMAGENET_MEAN[c]), T::lit(IMAGENET_STD[c]));
                    for ky in 0..p {
                        for kx in 0..p {
                            out[[row, col]] = (img.pixels[[c, py * p + ky, px * p + kx]] - m) / s;
                            col += 1;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, img: &Image<T>) -> Result<FeatureVars> {
        let expected = self.grid * self.patch_size;
        if img.channels() != 3 || img.height() != expected || img.width() != expected {
            return Err(Error::Config(format!(
                "backbone expects 3x{expected}x{expected} input, got {}x{}x{}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        let patches = s.constant(self.patchify(img));
        let x = self.patch_embed.forward(s, patches);
        let cls = s.param(self.cls_token);
        let tokens = s.concat_rows(&[cls, x]);
        let pos = s.param(self.pos_embed);
        let mut h = s.add(tokens, pos);
        check_finite(s, h, "backbone embedding")?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = self.block_forward(s, block, h);
            check_finite(s, h, &format!("backbone block {i}"))?;
        }
        h = self.norm.forward(s, h);
        check_finite(s, h, "backbone final norm")?;
        let n = self.grid * self.grid;
        let global = s.slice_rows(h, 0, 1);
        let local = s.slice_rows(h, 1, n);
        Ok(FeatureVars {
            local,
            global,
            height: self.grid,
            width: self.grid,
        })
    }

    fn block_forward<T: Scalar>(&self, s: &mut Session<'_, T>, b: &Block, x: Var) -> Var {
        let d = self.dim;
        let dh = d / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let xn = b.norm1.forward(s, x);
        let qkv = b.qkv.forward(s, xn);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = s.slice_cols(qkv, h * dh, dh);
            let k = s.slice_cols(qkv, d + h * dh, dh);
            let v = s.slice_cols(qkv, 2 * d + h * dh, dh);
            let kt = s.transpose(k);
            let logits = s.matmul(q, kt);
            let logits = s.scale(logits, scale);
            let attn = s.softmax_rows(logits);
            heads.push(s.matmul(attn, v));
        }
        let merged = s.concat_cols(&heads);
        let attn_out = b.proj.forward(s, merged);
        let x = s.add(x, attn_out);
        let xn = b.norm2.forward(s, x);
        let m = b.mlp.forward(s, xn);
        s.add(x, m)
    }
}

fn check_finite<T: Scalar>(s: &Session<'_, T>, v: Var, layer: &str) -> Result<()> {
    if s.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(layer, "non-finite activation"))
    }
}

/// Names of the parameters in the last `trainable_depth` blocks.
pub fn trainable_block_names(depth: usize, trainable_depth: usize) -> Result<Vec<String>> {
    if trainable_depth > depth {
        return Err(Error::Config(format!(
            "trainable depth {trainable_depth} exceeds the {depth} transformer blocks"
        )));
    }
    let suffixes = [
        "norm1.weight",
        "norm1.bias",
        "attn.qkv.weight",
        "attn.qkv.bias",
        "attn.proj.weight",
        "attn.proj.bias",
        "norm2.weight",
        "norm2.bias",
        "mlp.fc1.weight",
        "mlp.fc1.bias",
        "mlp.fc2.weight",
        "mlp.fc2.bias",
    ];
    Ok((depth - trainable_depth..depth)
        .flat_map(|i| suffixes.iter().map(move |s| format!("{PREFIX}blocks.{i}.{s}")))
        .collect())
}

fn tensor_to_f64(view: &safetensors::tensor::TensorView<'_>, name: &str) -> Result<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(f32::from_le_slice(data).into_iter().map(f64::from).collect()),
        Dtype::F64 => Ok(f64::from_le_slice(data)),
        Dtype::BF16 => Ok(data
            .chunks_exact(2)
            .map(|c| f64::from(f32::from_bits(u32::from(u16::from_le_bytes([c[0], c[1]])) << 16)))
            .collect()),
        other => Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
    }
}

/// Loads backbone weights from a safetensors file using timm names
/// (`blocks.11.attn.qkv.weight`, ...), with or without a `backbone.` prefix.
/// Linear and patch-embedding kernels are stored output-major in such files
/// and are transposed into the input-major layout used here.
pub fn load_backbone_weights<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<usize> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let by_name: HashMap<String, String> = tensors
        .names()
        .into_iter()
        .map(|n| {
            let stripped = n.strip_prefix("module.").unwrap_or(n);
            let canonical = if stripped.starts_with(PREFIX) {
                stripped.to_string()
            } else {
                format!("{PREFIX}{stripped}")
            };
            (canonical, n.to_string())
        })
        .collect();
    let targets: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(PREFIX))
        .map(|(id, p)| (id, p.name.clone(), p.value.dim()))
        .collect();
    let mut loaded = 0;
    for (id, name, (rows, cols)) in targets {
        let Some(file_name) = by_name.get(&name) else {
            return Err(Error::Checkpoint(format!("{}: missing tensor {name}", path.display())));
        };
        let view = tensors
            .tensor(file_name)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let values = tensor_to_f64(&view, &name)?;
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{name}: file holds {:?}, model expects {rows}x{cols}",
                view.shape()
            )));
        }
        let shape = view.shape();
        let value = if shape.len() >= 2 && name.ends_with(".weight") {
            // output-major (out, in...) -> input-major (in, out)
            let out_dim = shape[0];
            let in_dim = values.len() / out_dim;
            if out_dim != cols || in_dim != rows {
                return Err(Error::Shape(format!(
                    "{name}: file holds {shape:?}, model expects {rows}x{cols}"
                )));
            }
            Array2::from_shape_fn((rows, cols), |(i, o)| T::lit(values[o * in_dim + i]))
        } else {
            Array2::from_shape_vec((rows, cols), values.into_iter().map(T::lit).collect())
                .expect("element count checked")
        };
        store.set_value(id, value)?;
        loaded += 1;
    }
    Ok(loaded)
}
