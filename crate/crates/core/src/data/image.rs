use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-first image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub pixels: Array3<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(pixels: Array3<T>) -> Self {
        Image { pixels }
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Reads an image file as RGB and resizes it to `size` x `size`.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::InvalidInput(format!("{}: {other}", path.display())),
        })?;
        let rgb = img
            .resize_exact(size as u32, size as u32, FilterType::Triangle)
            .to_rgb8();
        let pixels = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            T::lit(f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0)
        });
        Ok(Image { pixels })
    }

    pub fn mirrored(&self) -> Self {
        let (c, h, w) = self.pixels.dim();
        Image {
            pixels: Array3::from_shape_fn((c, h, w), |(ch, y, x)| self.pixels[[ch, y, w - 1 - x]]),
        }
    }

    /// Bilinear resample of the window `[top, top+crop_h) x [left, left+crop_w)`
    /// onto an `out` x `out` grid (pixel-centre alignment).
    pub fn crop_resize(&self, top: f64, left: f64, crop_h: f64, crop_w: f64, out: usize) -> Self {
        let (c, h, w) = self.pixels.dim();
        let sample = |ch: usize, y: f64, x: f64| -> T {
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (T::lit(y - y0 as f64), T::lit(x - x0 as f64));
            let p = &self.pixels;
            let top = p[[ch, y0, x0]] * (T::one() - fx) + p[[ch, y0, x1]] * fx;
            let bot = p[[ch, y1, x0]] * (T::one() - fx) + p[[ch, y1, x1]] * fx;
            top * (T::one() - fy) + bot * fy
        };
        let sy = crop_h / out as f64;
        let sx = crop_w / out as f64;
        Image {
            pixels: Array3::from_shape_fn((c, out, out), |(ch, oy, ox)| {
                let y = top + (oy as f64 + 0.5) * sy - 0.5;
                let x = left + (ox as f64 + 0.5) * sx - 0.5;
                sample(ch, y, x)
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_window_crop_is_identity() {
        let img = Image::new(Array3::from_shape_fn((3, 5, 5), |(c, y, x)| {
            (c * 25 + y * 5 + x) as f64 / 75.0
        }));
        let same = img.crop_resize(0.0, 0.0, 5.0, 5.0, 5);
        for (a, b) in img.pixels.iter().zip(same.pixels.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn load_round_trips_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.png");
        let mut buf = image::RgbImage::new(4, 4);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            *p = image::Rgb([(x * 60) as u8, (y * 60) as u8, 255]);
        }
        buf.save(&path).unwrap();
        let img = Image::<f32>::load(&path, 4).unwrap();
        assert_eq!(img.pixels.dim(), (3, 4, 4));
        assert!((img.pixels[[0, 0, 3]] - 180.0 / 255.0).abs() < 1e-6);
        assert!((img.pixels[[2, 2, 2]] - 1.0).abs() < 1e-6);
    }
}
