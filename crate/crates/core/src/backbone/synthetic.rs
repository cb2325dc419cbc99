use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use super::FeatureMap;
use crate::data::SyntheticScene;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::{rng_for, stream};

const PALETTE_ATTEMPTS: usize = 1000;

/// Fixed random embedding per palette part, plus per-cell Gaussian noise.
///
/// Any two part embeddings are at least `4 * noise_std * sqrt(D)` apart, i.e.
/// four times the expected norm of a cell's noise vector.
///
/// Optionally a linear position code is added, `(r - 1/2) * pos[0] + (c - 1/2) * pos[1]`
/// with `r, c` the row and column scaled to `[0, 1]`, standing in for the
/// positional content of transformer patch tokens.
#[derive(Clone, Debug)]
pub struct SyntheticBackbone<T> {
    pub palette: Array2<T>,
    /// 2 x D position directions; zero when no position code is used.
    pub pos: Array2<T>,
    pub noise_std: f64,
    pub grid: usize,
}

impl<T: Scalar> SyntheticBackbone<T> {
    /// Palette of `palette_size` random directions of norm `embed_scale`.
    pub fn generate(
        palette_size: usize,
        feat_dim: usize,
        embed_scale: f64,
        noise_std: f64,
        grid: usize,
        seed: u64,
    ) -> Result<Self> {
        if palette_size == 0 || feat_dim == 0 {
            return Err(Error::Config("synthetic palette needs parts and width".into()));
        }
        let mut rng = rng_for(seed, &[stream::PALETTE]);
        for _ in 0..PALETTE_ATTEMPTS {
            let mut palette = Array2::<f64>::zeros((palette_size, feat_dim));
            for mut row in palette.rows_mut() {
                row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
                let norm = row.dot(&row).sqrt();
                row.mapv_inplace(|v| v / norm * embed_scale);
            }
            let candidate = SyntheticBackbone {
                palette: palette.mapv(T::lit),
                pos: Array2::zeros((2, feat_dim)),
                noise_std,
                grid,
            };
            if candidate.validate().is_ok() {
                return Ok(candidate);
            }
        }
        Err(Error::Config(format!(
            "could not draw {palette_size} part embeddings separated by 4x the noise level \
             (scale {embed_scale}, noise {noise_std}, width {feat_dim})"
        )))
    }

    /// Adds a position code: two orthogonal random directions of norm
    /// `scale`, drawn from their own stream so the palette is unchanged.
    pub fn with_position_code(mut self, scale: f64, seed: u64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("invalid position scale {scale}")));
        }
        let d = self.feat_dim();
        if scale == 0.0 {
            self.pos = Array2::zeros((2, d));
            return Ok(self);
        }
        if d < 2 {
            return Err(Error::Config("a position code needs feat_dim >= 2".into()));
        }
        let mut rng = rng_for(seed, &[stream::PALETTE, 1]);
        let mut dirs = Array2::<f64>::zeros((2, d));
        dirs.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        // Gram-Schmidt
        let u = dirs.row(0).to_owned();
        let u = &u / u.dot(&u).sqrt();
        let v = dirs.row(1).to_owned();
        let v = &v - &(&u * u.dot(&v));
        let v = &v / v.dot(&v).sqrt();
        dirs.row_mut(0).assign(&(u * scale));
        dirs.row_mut(1).assign(&(v * scale));
        self.pos = dirs.mapv(T::lit);
        Ok(self)
    }

    pub fn with_palette(palette: Array2<T>, noise_std: f64, grid: usize) -> Result<Self> {
        let d = palette.ncols();
        let b = SyntheticBackbone {
            pos: Array2::zeros((2, d)),
            palette,
            noise_std,
            grid,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 {
            return Err(Error::Config("negative synthetic noise".into()));
        }
        let margin = 4.0 * self.noise_std * (self.feat_dim() as f64).sqrt();
        let p = &self.palette;
        for i in 0..p.nrows() {
            for j in i + 1..p.nrows() {
                let d = (&p.row(i) - &p.row(j)).mapv(|v| v.as_f64().powi(2)).sum().sqrt();
                if d < margin {
                    return Err(Error::Config(format!(
                        "parts {i} and {j} are {d:.4} apart, below the margin {margin:.4}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn feat_dim(&self) -> usize {
        self.palette.ncols()
    }

    /// Renders a scene: cell `n` gets `palette[part(n)] + position code + noise`.
    pub fn render(&self, scene: &SyntheticScene, noise_seed: u64) -> Result<FeatureMap<T>> {
        if scene.height != self.grid || scene.width != self.grid {
            return Err(Error::Config(format!(
                "scene is {}x{}, backbone grid is {g}x{g}",
                scene.height,
                scene.width,
                g = self.grid
            )));
        }
        if let Some(&bad) = scene.parts.iter().find(|&&p| p >= self.palette.nrows()) {
            return Err(Error::InvalidInput(format!(
                "part {bad} outside palette of {}",
                self.palette.nrows()
            )));
        }
        let mut rng = rng_for(noise_seed, &[stream::NOISE]);
        let n = scene.num_cells();
        let d = self.feat_dim();
        let mut local = Array2::zeros((n, d));
        let unit = |i: usize, len: usize| if len > 1 { i as f64 / (len - 1) as f64 - 0.5 } else { 0.0 };
        for (cell, mut row) in local.rows_mut().into_iter().enumerate() {
            let base = self.palette.row(scene.part_at(cell));
            let (r, c) = (unit(cell / scene.width, scene.height), unit(cell % scene.width, scene.width));
            for (j, (dst, &b)) in row.iter_mut().zip(base.iter()).enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let p = r * self.pos[[0, j]].as_f64() + c * self.pos[[1, j]].as_f64();
                *dst = b + T::lit(p + z * self.noise_std);
            }
        }
        let global: Array1<T> = local.mean_axis(Axis(0)).expect("non-empty grid");
        Ok(FeatureMap {
            height: scene.height,
            width: scene.width,
            local,
            global,
            image_id: String::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_part_scene_stays_in_noise_ball() {
        let b = SyntheticBackbone::<f64>::generate(4, 8, 1.0, 0.01, 3, 0).unwrap();
        let scene = SyntheticScene::new(3, 3, vec![2], vec![0; 9], 0).unwrap();
        let fm = b.render(&scene, 5).unwrap();
        for row in fm.local.rows() {
            let d = (&row - &b.palette.row(2)).mapv(|v| v * v).sum().sqrt();
            assert!(d < 0.01 * 8.0);
        }
    }

    #[test]
    fn nearest_centroid_recovers_two_parts() {
        // separation 1.0 between the two embeddings, noise 0.01
        let palette = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = SyntheticBackbone::<f64>::with_palette(palette.clone(), 0.01, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = SyntheticScene::random_layout(&mut rng, 4, 4, vec![0, 1], 0).unwrap();
        let fm = b.render(&scene, 3).unwrap();
        // centroids from the rendered cells themselves
        let mut centroids = Array2::<f64>::zeros((2, 3));
        let mut counts = [0.0; 2];
        for (cell, row) in fm.local.rows().into_iter().enumerate() {
            let k = scene.cells[cell] as usize;
            centroids.row_mut(k).zip_mut_with(&row, |c, &v| *c += v);
            counts[k] += 1.0;
        }
        for k in 0..2 {
            centroids.row_mut(k).mapv_inplace(|v| v / counts[k]);
        }
        for (cell, row) in fm.local.rows().into_iter().enumerate() {
            let d: Vec<f64> = (0..2)
                .map(|k| (&row - &centroids.row(k)).mapv(|v| v * v).sum())
                .collect();
            let nearest = if d[0] <= d[1] { 0 } else { 1 };
            assert_eq!(nearest, scene.cells[cell] as usize);
        }
    }

    #[test]
    fn noise_seed_changes_noise_not_embeddings() {
        let a = SyntheticBackbone::<f64>::generate(5, 6, 1.0, 0.05, 3, 9).unwrap();
        let b = SyntheticBackbone::<f64>::generate(5, 6, 1.0, 0.05, 3, 9).unwrap();
        assert_eq!(a.palette, b.palette);
        let scene = SyntheticScene::new(3, 3, vec![1, 4], vec![0, 0, 0, 1, 1, 1, 0, 1, 0], 0).unwrap();
        let f1 = a.render(&scene, 1).unwrap();
        let f2 = a.render(&scene, 2).unwrap();
        let f1b = a.render(&scene, 1).unwrap();
        assert_ne!(f1.local, f2.local);
        assert_eq!(f1.local, f1b.local);
    }

    #[test]
    fn global_is_mean_of_grid() {
        let b = SyntheticBackbone::<f64>::generate(3, 4, 1.0, 0.05, 2, 1).unwrap();
        let scene = SyntheticScene::new(2, 2, vec![0, 1], vec![0, 1, 1, 0], 0).unwrap();
        let fm = b.render(&scene, 0).unwrap();
        let mean = fm.local.mean_axis(Axis(0)).unwrap();
        assert_eq!(fm.global, mean);
    }

    #[test]
    fn position_code_is_linear_in_row_and_column() {
        let b = SyntheticBackbone::<f64>::generate(3, 6, 1.0, 0.0, 3, 4)
            .unwrap()
            .with_position_code(0.5, 4)
            .unwrap();
        assert!((b.pos.row(0).dot(&b.pos.row(1))).abs() < 1e-12);
        assert!((b.pos.row(0).dot(&b.pos.row(0)) - 0.25).abs() < 1e-12);
        let scene = SyntheticScene::new(3, 3, vec![1], vec![0; 9], 0).unwrap();
        let fm = b.render(&scene, 0).unwrap();
        // corner to corner along the row axis spans one full direction
        let d = &fm.local.row(6) - &fm.local.row(0);
        assert!((&d - &b.pos.row(0)).iter().all(|v| v.abs() < 1e-12));
        let center = &fm.local.row(4) - &b.palette.row(1);
        assert!(center.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(fm.global, fm.local.mean_axis(Axis(0)).unwrap());
    }

    #[test]
    fn crowded_palette_is_rejected() {
        let palette = array![[0.0, 0.0], [0.01, 0.0]];
        assert!(SyntheticBackbone::<f64>::with_palette(palette, 0.1, 2).is_err());
    }
}
