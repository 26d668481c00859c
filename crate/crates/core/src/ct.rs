//! Virtual parallel-beam CT scanner: forward projection (Radon transform)
//! and ramp-filtered backprojection.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    RamLak,
    /// Ram-Lak tapered by a Hann window, for a softer routine-dose look.
    HannApodized,
}

/// Acquisition description: views uniformly spanning [0, pi), a centered
/// linear detector, and the reconstruction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    pub n_views: usize,
    pub n_bins: usize,
    /// detector element spacing (cm)
    pub det_spacing: f64,
    /// reconstruction grid is n x n pixels
    pub n: usize,
    /// pixel spacing (cm)
    pub pixel_spacing: f64,
    pub filter: FilterKind,
}

impl ScanGeometry {
    pub fn new(
        n_views: usize,
        n_bins: usize,
        det_spacing: f64,
        n: usize,
        pixel_spacing: f64,
        filter: FilterKind,
    ) -> Result<Self> {
        if n_views < 1 || n_bins < 2 || n < 16 {
            return Err(Error::Invalid(format!(
                "scan geometry too small: {n_views} views, {n_bins} bins, {n} px grid"
            )));
        }
        if det_spacing <= 0.0 || pixel_spacing <= 0.0 {
            return Err(Error::Invalid("spacings must be positive".into()));
        }
        let coverage = n_bins as f64 * det_spacing;
        let diagonal = std::f64::consts::SQRT_2 * n as f64 * pixel_spacing;
        if coverage < diagonal {
            return Err(Error::Invalid(format!(
                "detector span {coverage:.3} cm does not cover the image diagonal {diagonal:.3} cm"
            )));
        }
        Ok(ScanGeometry {
            n_views,
            n_bins,
            det_spacing,
            n,
            pixel_spacing,
            filter,
        })
    }

    #[inline]
    pub fn view_angle(&self, view: usize) -> f64 {
        std::f64::consts::PI * view as f64 / self.n_views as f64
    }

    /// Signed detector offset of a bin from the rotation center (cm).
    #[inline]
    pub fn bin_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.det_spacing
    }
}

/// Line integrals, shape (n_views, n_bins), row-major by view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geom: ScanGeometry,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geom: ScanGeometry) -> Self {
        let len = geom.n_views * geom.n_bins;
        Sinogram {
            geom,
            data: vec![0.0; len],
        }
    }

    #[inline]
    pub fn get(&self, view: usize, bin: usize) -> f64 {
        self.data[view * self.geom.n_bins + bin]
    }

    #[inline]
    pub fn set(&mut self, view: usize, bin: usize, value: f64) {
        self.data[view * self.geom.n_bins + bin] = value;
    }

    pub fn view_row(&self, view: usize) -> &[f64] {
        let w = self.geom.n_bins;
        &self.data[view * w..(view + 1) * w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Forward-project by sampling the image with bilinear interpolation at
/// steps of half a pixel along each ray.
pub fn radon(image: &Image2D, geom: &ScanGeometry) -> Result<Sinogram> {
    if image.height() != geom.n || image.width() != geom.n {
        return Err(Error::shape(
            "radon input image",
            format!("{0}x{0}", geom.n),
            format!("{}x{}", image.height(), image.width()),
        ));
    }
    if image.spacing() != geom.pixel_spacing {
        return Err(Error::Invalid(format!(
            "image pixel spacing {} differs from geometry {}",
            image.spacing(),
            geom.pixel_spacing
        )));
    }
    let n = geom.n as isize;
    let dx = geom.pixel_spacing;
    let step = dx / 2.0;
    // sample positions are symmetric about the detector foot point so that
    // traversing a ray in either direction visits the same points
    let half_len = std::f64::consts::SQRT_2 * geom.n as f64 * dx / 2.0;
    let k_max = (half_len / step).ceil() as i64;
    let center = (geom.n as f64 - 1.0) / 2.0;
    let data = image.data();

    let mut sino = Sinogram::zeros(geom.clone());
    for view in 0..geom.n_views {
        let theta = geom.view_angle(view);
        let (sin_t, cos_t) = theta.sin_cos();
        for bin in 0..geom.n_bins {
            let s = geom.bin_offset(bin);
            // ray passes through (s cos, s sin) with direction (-sin, cos)
            let mut acc = 0.0;
            for i in -k_max..=k_max {
                let tau = i as f64 * step;
                let x = s * cos_t - tau * sin_t;
                let y = s * sin_t + tau * cos_t;
                // fractional pixel coordinates (row grows downward)
                let cf = x / dx + center;
                let rf = center - y / dx;
                let r0 = rf.floor();
                let c0 = cf.floor();
                let fr = rf - r0;
                let fc = cf - c0;
                let (r0, c0) = (r0 as isize, c0 as isize);
                let mut sample = 0.0;
                for (ri, wr) in [(r0, 1.0 - fr), (r0 + 1, fr)] {
                    if ri < 0 || ri >= n || wr == 0.0 {
                        continue;
                    }
                    let row_base = ri as usize * geom.n;
                    for (ci, wc) in [(c0, 1.0 - fc), (c0 + 1, fc)] {
                        if ci < 0 || ci >= n || wc == 0.0 {
                            continue;
                        }
                        sample += wr * wc * data[row_base + ci as usize];
                    }
                }
                acc += sample;
            }
            sino.set(view, bin, acc * step);
        }
    }
    Ok(sino)
}

/// Frequency response of the discrete ramp kernel, zero-padded to `m` and
/// optionally Hann-apodized. The spatial kernel is supported on
/// |offset| <= n_bins - 1, so with m >= 2*n_bins the circular convolution
/// reproduces the linear one exactly on the first n_bins samples.
fn ramp_response(n_bins: usize, det_spacing: f64, m: usize, filter: FilterKind) -> Vec<Complex<f64>> {
    let mut kernel = vec![Complex::new(0.0, 0.0); m];
    kernel[0] = Complex::new(1.0 / (4.0 * det_spacing * det_spacing), 0.0);
    for k in (1..n_bins).step_by(2) {
        let v = -1.0 / (std::f64::consts::PI * std::f64::consts::PI * (k * k) as f64
            * det_spacing
            * det_spacing);
        kernel[k] = Complex::new(v, 0.0);
        kernel[m - k] = Complex::new(v, 0.0);
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut kernel);
    if filter == FilterKind::HannApodized {
        for (k, h) in kernel.iter_mut().enumerate() {
            let freq_idx = k.min(m - k) as f64;
            *h *= 0.5 * (1.0 + (std::f64::consts::TAU * freq_idx / m as f64).cos());
        }
    }
    kernel
}

/// Ramp-filter each view in the frequency domain, then backproject with
/// linear interpolation, scaled by pi/n_views.
pub fn fbp(sino: &Sinogram) -> Result<Image2D> {
    if !sino.is_finite() {
        return Err(Error::Invalid(
            "sinogram contains non-finite values".into(),
        ));
    }
    let geom = &sino.geom;
    let nb = geom.n_bins;
    let m = (2 * nb).next_power_of_two();
    let response = ramp_response(nb, geom.det_spacing, m, geom.filter);
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(m);
    let inverse = planner.plan_fft_inverse(m);

    // filtered[view][bin], scaled by det spacing for the convolution integral
    let mut filtered = vec![0.0; geom.n_views * nb];
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for view in 0..geom.n_views {
        buf.fill(Complex::new(0.0, 0.0));
        for (b, &p) in buf.iter_mut().zip(sino.view_row(view)) {
            *b = Complex::new(p, 0.0);
        }
        forward.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&response) {
            *b *= h;
        }
        inverse.process(&mut buf);
        let scale = geom.det_spacing / m as f64;
        for (q, b) in filtered[view * nb..(view + 1) * nb].iter_mut().zip(&buf) {
            *q = b.re * scale;
        }
    }

    let mut img = Image2D::zeros(geom.n, geom.n, geom.pixel_spacing);
    let bin_center = (nb as f64 - 1.0) / 2.0;
    for view in 0..geom.n_views {
        let theta = geom.view_angle(view);
        let (sin_t, cos_t) = theta.sin_cos();
        let row_q = &filtered[view * nb..(view + 1) * nb];
        for row in 0..geom.n {
            let y = img.y_of(row);
            for col in 0..geom.n {
                let x = img.x_of(col);
                let u = (x * cos_t + y * sin_t) / geom.det_spacing + bin_center;
                let j = u.floor();
                let f = u - j;
                let j = j as isize;
                let mut v = 0.0;
                if j >= 0 && (j as usize) < nb {
                    v += (1.0 - f) * row_q[j as usize];
                }
                if j + 1 >= 0 && ((j + 1) as usize) < nb {
                    v += f * row_q[(j + 1) as usize];
                }
                img.set(row, col, img.get(row, col) + v);
            }
        }
    }
    let scale = std::f64::consts::PI / geom.n_views as f64;
    Ok(img.scale(scale))
}
