use rand::seq::index::sample;
use rand::Rng;

use super::ClassId;
use crate::error::{Error, Result};

/// A grid partitioned into part regions. Each cell belongs to exactly one part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    /// Palette id of every part present in the scene.
    pub parts: Vec<usize>,
    /// Row-major cell assignment; each entry indexes `parts`.
    pub cells: Vec<u16>,
    pub class_id: ClassId,
}

impl SyntheticScene {
    pub fn new(
        height: usize,
        width: usize,
        parts: Vec<usize>,
        cells: Vec<u16>,
        class_id: ClassId,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("scene needs at least one part".into()));
        }
        if cells.len() != height * width {
            return Err(Error::Shape(format!(
                "scene grid {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        let mut seen = vec![false; parts.len()];
        for &c in &cells {
            let c = c as usize;
            if c >= parts.len() {
                return Err(Error::InvalidInput(format!("cell refers to missing part {c}")));
            }
            seen[c] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("part {empty} owns no cell")));
        }
        Ok(SyntheticScene {
            height,
            width,
            parts,
            cells,
            class_id,
        })
    }

    /// Scene whose regions are the Voronoi cells of one random seed cell per
    /// part. Seeds are distinct, so every region is non-empty.
    pub fn random_layout<R: Rng + ?Sized>(
        rng: &mut R,
        height: usize,
        width: usize,
        parts: Vec<usize>,
        class_id: ClassId,
    ) -> Result<Self> {
        let n = height * width;
        if parts.len() > n {
            return Err(Error::InvalidInput(format!(
                "{} parts do not fit on a {height}x{width} grid",
                parts.len()
            )));
        }
        if parts.is_empty() {
            return Err(Error::InvalidInput("scene needs at least one part".into()));
        }
        let seeds = sample(rng, n, parts.len()).into_vec();
        let cells = (0..n)
            .map(|cell| {
                let (r, c) = ((cell / width) as i64, (cell % width) as i64);
                let mut best = 0;
                let mut best_d = i64::MAX;
                for (k, &s) in seeds.iter().enumerate() {
                    let (sr, sc) = ((s / width) as i64, (s % width) as i64);
                    let d = (r - sr).pow(2) + (c - sc).pow(2);
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                best as u16
            })
            .collect();
        SyntheticScene::new(height, width, parts, cells, class_id)
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    /// Palette id at a flat cell index.
    pub fn part_at(&self, cell: usize) -> usize {
        self.parts[self.cells[cell] as usize]
    }

    pub fn region_mask(&self, part_index: usize) -> Vec<bool> {
        self.cells.iter().map(|&c| c as usize == part_index).collect()
    }

    /// Cyclic shift of the layout by `(dy, dx)` cells.
    pub fn translated(&self, dy: i64, dx: i64) -> Self {
        let (h, w) = (self.height as i64, self.width as i64);
        let mut cells = vec![0; self.cells.len()];
        for r in 0..h {
            for c in 0..w {
                let src = (r.rem_euclid(h) * w + c.rem_euclid(w)) as usize;
                let dst = ((r + dy).rem_euclid(h) * w + (c + dx).rem_euclid(w)) as usize;
                cells[dst] = self.cells[src];
            }
        }
        SyntheticScene {
            cells,
            ..self.clone()
        }
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut cells = self.cells.clone();
        for row in cells.chunks_mut(self.width) {
            row.reverse();
        }
        SyntheticScene {
            cells,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_layout_partitions_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for parts in 1..=9 {
            let scene =
                SyntheticScene::random_layout(&mut rng, 3, 3, (0..parts).collect(), 0).unwrap();
            let covered: usize = (0..parts)
                .map(|p| scene.region_mask(p).iter().filter(|&&m| m).count())
                .sum();
            assert_eq!(covered, 9);
        }
    }

    #[test]
    fn too_many_parts_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = SyntheticScene::random_layout(&mut rng, 2, 2, (0..5).collect(), 0);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn translation_preserves_part_areas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = SyntheticScene::random_layout(&mut rng, 4, 5, vec![3, 7, 9], 1).unwrap();
        let moved = scene.translated(2, -3);
        for p in 0..3 {
            let a = scene.region_mask(p).iter().filter(|&&m| m).count();
            let b = moved.region_mask(p).iter().filter(|&&m| m).count();
            assert_eq!(a, b);
        }
        assert_eq!(moved.translated(-2, 3), scene);
    }
}
