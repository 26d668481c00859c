//! Dense 2D scalar fields with physical pixel spacing.
//!
//! `Image2D` is the common currency of the toolkit: attenuation maps coming
//! out of the phantom renderer, FBP reconstructions, CT-number images in
//! datasets, noise images, and generator outputs all use it. Values are f64
//! in memory; on disk images are stored as f32 (see [`crate::container`]).

use crate::error::{Error, Result};

/// Row-major 2D image with square pixels of physical side `spacing` (cm).
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    spacing: f64,
    data: Vec<f64>,
}

impl Image2D {
    pub fn zeros(height: usize, width: usize, spacing: f64) -> Self {
        Image2D {
            height,
            width,
            spacing,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, spacing: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "Image2D::from_vec",
                format!("{}x{} = {} values", height, width, height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Image2D {
            height,
            width,
            spacing,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Physical x (cm) of a pixel-center column, origin at the image center.
    #[inline]
    pub fn x_of(&self, col: usize) -> f64 {
        (col as f64 - (self.width as f64 - 1.0) / 2.0) * self.spacing
    }

    /// Physical y (cm) of a pixel-center row, origin at the image center.
    /// Row 0 is the top of the image, so y decreases with the row index.
    #[inline]
    pub fn y_of(&self, row: usize) -> f64 {
        ((self.height as f64 - 1.0) / 2.0 - row as f64) * self.spacing
    }

    pub fn same_shape(&self, other: &Image2D) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_same_shape(&self, other: &Image2D, context: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                context,
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Image2D) -> Result<Image2D> {
        self.check_same_shape(other, "Image2D::add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Image2D {
            data,
            ..self.clone()
        })
    }

    pub fn sub(&self, other: &Image2D) -> Result<Image2D> {
        self.check_same_shape(other, "Image2D::sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Image2D {
            data,
            ..self.clone()
        })
    }

    pub fn scale(&self, c: f64) -> Image2D {
        let data = self.data.iter().map(|a| a * c).collect();
        Image2D {
            data,
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image2D {
        let data = self.data.iter().map(|&a| f(a)).collect();
        Image2D {
            data,
            ..self.clone()
        }
    }

    /// Snap every value to an integer multiple of `grid`.
    ///
    /// Images on a common dyadic grid (default [`VALUE_GRID`]) make pixelwise
    /// sums and differences exact in both f64 and f32, which the
    /// decomposition identity relies on.
    pub fn quantize(&self, grid: f64) -> Image2D {
        self.map(|v| (v / grid).round() * grid)
    }

    /// Indices of pixels whose center is within `radius_frac` of the image
    /// half-extent from the center.
    pub fn disk_indices(&self, radius_frac: f64) -> Vec<usize> {
        let half = self.width.min(self.height) as f64 / 2.0 * self.spacing;
        let r = radius_frac * half;
        let mut idx = Vec::new();
        for row in 0..self.height {
            let y = self.y_of(row);
            for col in 0..self.width {
                let x = self.x_of(col);
                if x * x + y * y <= r * r {
                    idx.push(row * self.width + col);
                }
            }
        }
        idx
    }

    pub fn mean_over(&self, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().map(|&i| self.data[i]).sum::<f64>() / idx.len() as f64
    }

    /// Sample (n-1) standard deviation over the given pixel indices.
    pub fn std_over(&self, idx: &[usize]) -> f64 {
        if idx.len() < 2 {
            return 0.0;
        }
        let mean = self.mean_over(idx);
        let ss: f64 = idx
            .iter()
            .map(|&i| {
                let d = self.data[i] - mean;
                d * d
            })
            .sum();
        (ss / (idx.len() - 1) as f64).sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy a `size`x`size` window whose top-left corner is (row0, col0).
    pub fn crop(&self, row0: usize, col0: usize, size: usize) -> Result<Image2D> {
        if row0 + size > self.height || col0 + size > self.width {
            return Err(Error::Invalid(format!(
                "crop {}x{} at ({},{}) exceeds image {}x{}",
                size, size, row0, col0, self.height, self.width
            )));
        }
        let mut out = Image2D::zeros(size, size, self.spacing);
        for r in 0..size {
            let src = (row0 + r) * self.width + col0;
            out.data[r * size..(r + 1) * size].copy_from_slice(&self.data[src..src + size]);
        }
        Ok(out)
    }
}

/// Dyadic value grid shared by dataset images: fine enough to be invisible
/// next to any simulated noise, coarse enough that every on-grid value (and
/// small sums of them) below |v| < 2048 is exactly representable in f32.
pub const VALUE_GRID: f64 = 1.0 / 4096.0;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn physical_coordinates_are_centered() {
        let img = Image2D::zeros(4, 4, 0.5);
        assert!((img.x_of(0) + 0.75).abs() < 1e-12);
        assert!((img.x_of(3) - 0.75).abs() < 1e-12);
        assert!((img.y_of(0) - 0.75).abs() < 1e-12);
        assert!((img.y_of(3) + 0.75).abs() < 1e-12);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Image2D::from_vec(2, 2, 1.0, vec![0.0; 3]).is_err());
    }

    #[test]
    fn quantize_makes_sums_exact() {
        // Off-grid values whose naive difference/sum round-trips inexactly.
        let a = Image2D::from_vec(1, 2, 1.0, vec![0.1, 1234.567]).unwrap();
        let b = Image2D::from_vec(1, 2, 1.0, vec![0.30000000001, 1234.568]).unwrap();
        let aq = a.quantize(VALUE_GRID);
        let bq = b.quantize(VALUE_GRID);
        let n = bq.sub(&aq).unwrap();
        let back = aq.add(&n).unwrap();
        assert_eq!(back.data(), bq.data());
    }

    #[test]
    fn disk_indices_cover_center_not_corners() {
        let img = Image2D::zeros(16, 16, 1.0);
        let idx = img.disk_indices(0.5);
        assert!(idx.contains(&(8 * 16 + 8)));
        assert!(!idx.contains(&0));
        assert!(!idx.contains(&(16 * 16 - 1)));
    }

    #[test]
    fn std_over_constant_is_zero() {
        let img = Image2D::from_vec(2, 2, 1.0, vec![3.0; 4]).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        assert_eq!(img.std_over(&idx), 0.0);
    }
}
