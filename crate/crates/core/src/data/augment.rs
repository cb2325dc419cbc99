use rand::Rng;

use super::{Image, Sample, SyntheticScene};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::rng_for;

const MAX_CROP_ATTEMPTS: usize = 10;

/// Augmentation ranges. Image instances use the crop/flip/jitter settings;
/// synthetic scenes use flip, cyclic translation and per-view feature noise.
#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    /// Range of the crop area as a fraction of the source area.
    pub crop_scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height).
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum translation in grid cells, in each direction.
    pub max_shift: usize,
    /// Draw fresh feature noise for every view.
    pub resample_noise: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            max_shift: 1,
            resample_noise: true,
        }
    }
}

impl AugConfig {
    pub fn identity() -> Self {
        AugConfig {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            max_shift: 0,
            resample_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range ({lo}, {hi}) outside (0, 1]")));
        }
        let (lo, hi) = self.crop_ratio;
        if !(0.0 < lo && lo <= hi) {
            return Err(Error::Config(format!("invalid crop ratio range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} jitter {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Two augmentations of the same source instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair<S> {
    pub view1: S,
    pub view2: S,
    pub source_id: String,
}

/// Draws two independent augmentations of `source`, reproducibly from `seed`.
pub fn make_views<T: Scalar>(
    source: &Sample<T>,
    source_id: &str,
    aug: &AugConfig,
    seed: u64,
) -> Result<ViewPair<Sample<T>>> {
    aug.validate()?;
    let view1 = augment(source, aug, rng_for(seed, &[1]))?;
    let view2 = augment(source, aug, rng_for(seed, &[2]))?;
    Ok(ViewPair {
        view1,
        view2,
        source_id: source_id.to_string(),
    })
}

fn augment<T: Scalar, R: Rng>(source: &Sample<T>, aug: &AugConfig, mut rng: R) -> Result<Sample<T>> {
    match source {
        Sample::Scene { scene, noise_seed } => {
            let noise_seed = if aug.resample_noise {
                rng.random()
            } else {
                *noise_seed
            };
            Ok(Sample::Scene {
                scene: augment_scene(scene, aug, &mut rng),
                noise_seed,
            })
        }
        Sample::Image(img) => Ok(Sample::Image(augment_image(img, aug, &mut rng)?)),
    }
}

fn augment_scene<R: Rng>(scene: &SyntheticScene, aug: &AugConfig, rng: &mut R) -> SyntheticScene {
    let mut out = if aug.flip_prob > 0.0 && rng.random_bool(aug.flip_prob) {
        scene.flipped_horizontal()
    } else {
        scene.clone()
    };
    if aug.max_shift > 0 {
        let m = aug.max_shift as i64;
        let dy = rng.random_range(-m..=m);
        let dx = rng.random_range(-m..=m);
        out = out.translated(dy, dx);
    }
    out
}

fn augment_image<T: Scalar, R: Rng>(img: &Image<T>, aug: &AugConfig, rng: &mut R) -> Result<Image<T>> {
    let (h, w) = (img.height(), img.width());
    let mut out = if aug.crop_scale == (1.0, 1.0) && aug.crop_ratio == (1.0, 1.0) {
        img.clone()
    } else {
        let (top, left, ch, cw) = sample_crop(h, w, aug, rng)?;
        img.crop_resize(top as f64, left as f64, ch as f64, cw as f64, h.max(w))
    };
    if aug.flip_prob > 0.0 && rng.random_bool(aug.flip_prob) {
        out = out.mirrored();
    }
    if aug.brightness > 0.0 || aug.contrast > 0.0 || aug.saturation > 0.0 {
        color_jitter(&mut out, aug, rng);
    }
    Ok(out)
}

/// Random-resized-crop window `(top, left, height, width)`.
fn sample_crop<R: Rng>(h: usize, w: usize, aug: &AugConfig, rng: &mut R) -> Result<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (aug.crop_ratio.0.ln(), aug.crop_ratio.1.ln());
    for _ in 0..MAX_CROP_ATTEMPTS {
        let target = area * sample_range(rng, aug.crop_scale);
        let ratio = sample_range(rng, (log_lo, log_hi)).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Ok((top, left, ch, cw));
        }
    }
    Err(Error::InvalidInput(format!(
        "no non-empty crop found for a {h}x{w} image after {MAX_CROP_ATTEMPTS} attempts"
    )))
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn color_jitter<T: Scalar, R: Rng>(img: &mut Image<T>, aug: &AugConfig, rng: &mut R) {
    let factor = |rng: &mut R, s: f64| T::lit(sample_range(rng, (1.0 - s, 1.0 + s)));
    let b = factor(rng, aug.brightness);
    let c = factor(rng, aug.contrast);
    let s = factor(rng, aug.saturation);
    let px = &mut img.pixels;
    px.mapv_inplace(|v| v * b);
    let mean = px.mean().unwrap_or_else(T::zero);
    px.mapv_inplace(|v| mean + (v - mean) * c);
    if px.dim().0 == 3 {
        let (_, hh, ww) = px.dim();
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        for y in 0..hh {
            for x in 0..ww {
                let gray = wr * px[[0, y, x]] + wg * px[[1, y, x]] + wb * px[[2, y, x]];
                for ch in 0..3 {
                    px[[ch, y, x]] = gray + (px[[ch, y, x]] - gray) * s;
                }
            }
        }
    }
    px.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image() -> Image<f64> {
        Image::new(Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c + 1) * (y * 8 + x)) as f64 / 200.0
        }))
    }

    #[test]
    fn identity_views_equal_source() {
        let src = Sample::Image(gradient_image());
        let pair = make_views(&src, "a", &AugConfig::identity(), 9).unwrap();
        assert_eq!(pair.view1, src);
        assert_eq!(pair.view2, src);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scene = SyntheticScene::random_layout(&mut rng, 4, 4, vec![1, 2], 0).unwrap();
        let src = Sample::<f64>::Scene { scene, noise_seed: 5 };
        let pair = make_views(&src, "b", &AugConfig::identity(), 9).unwrap();
        assert_eq!(pair.view1, src);
        assert_eq!(pair.view2, src);
    }

    #[test]
    fn certain_flip_mirrors_source() {
        let img = gradient_image();
        let aug = AugConfig {
            flip_prob: 1.0,
            ..AugConfig::identity()
        };
        let pair = make_views(&Sample::Image(img.clone()), "a", &aug, 3).unwrap();
        let Sample::Image(view) = pair.view1 else { panic!() };
        let (_, h, w) = img.pixels.dim();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    assert_eq!(view.pixels[[c, y, x]], img.pixels[[c, y, w - 1 - x]]);
                }
            }
        }
    }

    #[test]
    fn views_are_reproducible_and_distinct() {
        let src = Sample::Image(gradient_image());
        let aug = AugConfig::default();
        let a = make_views(&src, "a", &aug, 11).unwrap();
        let b = make_views(&src, "a", &aug, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.view1, a.view2);
    }

    #[test]
    fn impossible_crop_errors_after_retries() {
        let img = Image::new(Array3::<f64>::zeros((3, 1, 1)));
        let aug = AugConfig {
            crop_scale: (0.01, 0.02),
            crop_ratio: (1.0, 1.0),
            ..AugConfig::identity()
        };
        let err = make_views(&Sample::Image(img), "x", &aug, 0);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
