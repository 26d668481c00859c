//! Image-quality statistics: noise index (ROI standard deviation) and the
//! noise power spectrum with radial averaging.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image2D;

/// Standard deviation of CT numbers over a centered circular ROI, the
/// scanner-style scalar noise readout.
pub fn noise_index(image: &Image2D, roi_radius_frac: f64) -> Result<f64> {
    let roi = image.disk_indices(roi_radius_frac);
    if roi.len() < 100 {
        return Err(Error::Invalid(format!(
            "noise-index ROI has {} pixels; need at least 100",
            roi.len()
        )));
    }
    Ok(image.std_over(&roi))
}

/// Where the expected (noise-free) patch content comes from when forming
/// noise-only differences.
pub enum MeanSource<'a> {
    /// Average the realizations themselves (repeated-scan protocol).
    Ensemble,
    /// Subtract a known clean image instead.
    Reference(&'a Image2D),
}

#[derive(Debug, Clone)]
pub struct NpsResult {
    pub patch: usize,
    pub realizations: usize,
    /// power density over the DFT grid, row-major (v, u), in value^2 * cm^2
    pub nps2d: Vec<f64>,
    /// frequency spacing along u and v (cycles/cm)
    pub du: f64,
    pub dv: f64,
    /// annular bin centers (cycles/cm) and mean power per bin
    pub radial_freq: Vec<f64>,
    pub radial_power: Vec<f64>,
    pub radial_count: Vec<usize>,
}

fn transpose_square(buf: &mut [Complex<f64>], n: usize) {
    for r in 0..n {
        for c in (r + 1)..n {
            buf.swap(r * n + c, c * n + r);
        }
    }
}

/// Signed DFT frequency index: 0..=n/2 stay positive, the rest wrap negative.
fn signed_index(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Ensemble noise power spectrum over square patches cropped at `locations`
/// (top-left corners) from every realization. Each patch is reduced to a
/// noise-only difference against the mean source, DFT'd, and accumulated as
/// (dx*dy/(N*N))*|DFT|^2 averaged over all patches and realizations.
pub fn nps(
    realizations: &[Image2D],
    mean: MeanSource,
    locations: &[(usize, usize)],
    patch: usize,
) -> Result<NpsResult> {
    if realizations.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 noise realizations, got {}",
            realizations.len()
        )));
    }
    if locations.is_empty() || patch < 2 {
        return Err(Error::Invalid("need at least one patch of size >= 2".into()));
    }
    let first = &realizations[0];
    for img in realizations.iter().skip(1) {
        if !img.same_shape(first) {
            return Err(Error::shape(
                "nps realization",
                format!("{}x{}", first.height(), first.width()),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
    }
    if let MeanSource::Reference(r) = &mean {
        if !r.same_shape(first) {
            return Err(Error::shape(
                "nps reference image",
                format!("{}x{}", first.height(), first.width()),
                format!("{}x{}", r.height(), r.width()),
            ));
        }
    }
    for &(r0, c0) in locations {
        if r0 + patch > first.height() || c0 + patch > first.width() {
            return Err(Error::Invalid(format!(
                "patch at ({r0}, {c0}) of size {patch} exceeds the {}x{} image",
                first.height(),
                first.width()
            )));
        }
    }

    let fft = FftPlanner::new().plan_fft_forward(patch);
    let npx = patch * patch;
    let spacing = first.spacing();
    let mut accum = vec![0.0; npx];
    let mut buf = vec![Complex::new(0.0, 0.0); npx];
    for &loc in locations {
        let mean_patch: Image2D = match &mean {
            MeanSource::Reference(r) => r.crop(loc.0, loc.1, patch).unwrap(),
            MeanSource::Ensemble => {
                let mut m = Image2D::zeros(patch, patch, spacing);
                for img in realizations {
                    m = m.add(&img.crop(loc.0, loc.1, patch).unwrap()).unwrap();
                }
                m.scale(1.0 / realizations.len() as f64)
            }
        };
        for img in realizations {
            let diff = img.crop(loc.0, loc.1, patch).unwrap().sub(&mean_patch).unwrap();
            for (b, &d) in buf.iter_mut().zip(diff.data()) {
                *b = Complex::new(d, 0.0);
            }
            for row in 0..patch {
                fft.process(&mut buf[row * patch..(row + 1) * patch]);
            }
            transpose_square(&mut buf, patch);
            for row in 0..patch {
                fft.process(&mut buf[row * patch..(row + 1) * patch]);
            }
            transpose_square(&mut buf, patch);
            for (a, b) in accum.iter_mut().zip(&buf) {
                *a += b.norm_sqr();
            }
        }
    }
    let samples = (locations.len() * realizations.len()) as f64;
    let norm = spacing * spacing / npx as f64 / samples;
    let nps2d: Vec<f64> = accum.iter().map(|&a| a * norm).collect();

    // annular average with bin width du; bins cover every grid frequency up
    // to the Nyquist-disk corner, so binned power accounts for all 2D power
    let du = 1.0 / (patch as f64 * spacing);
    let half = patch as f64 / 2.0;
    let n_bins = (half * half * 2.0).sqrt().floor() as usize + 1;
    let mut power = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for ki in 0..patch {
        let v = signed_index(ki, patch) as f64;
        for kj in 0..patch {
            let u = signed_index(kj, patch) as f64;
            let bin = (u * u + v * v).sqrt().floor() as usize;
            power[bin] += nps2d[ki * patch + kj];
            count[bin] += 1;
        }
    }
    let mut radial_freq = Vec::with_capacity(n_bins);
    let mut radial_power = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        radial_freq.push((b as f64 + 0.5) * du);
        radial_power.push(if count[b] > 0 {
            power[b] / count[b] as f64
        } else {
            0.0
        });
    }
    Ok(NpsResult {
        patch,
        realizations: realizations.len(),
        nps2d,
        du,
        dv: du,
        radial_freq,
        radial_power,
        radial_count: count,
    })
}

/// Pearson correlation between two radial NPS profiles on matching axes.
pub fn nps_similarity(a: &NpsResult, b: &NpsResult) -> Result<f64> {
    if a.radial_freq.len() != b.radial_freq.len()
        || (a.du - b.du).abs() > 1e-9 * a.du.max(b.du)
    {
        return Err(Error::Invalid(format!(
            "radial frequency axes differ: {} bins at {} vs {} bins at {}",
            a.radial_freq.len(),
            a.du,
            b.radial_freq.len(),
            b.du
        )));
    }
    pearson(&a.radial_power, &b.radial_power)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Invalid(
            "constant radial profile has no defined correlation".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_image(n: usize, spacing: f64, sigma: f64, seed: u64) -> Image2D {
        let mut rng = rng::stream(seed, 0x6d65747269, 0, 0);
        let mut img = Image2D::zeros(n, n, spacing);
        for v in img.data_mut() {
            *v = sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        img
    }

    #[test]
    fn constant_image_has_zero_noise_index() {
        let img = Image2D::zeros(64, 64, 0.1).map(|_| 40.0);
        assert_eq!(noise_index(&img, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn tiny_roi_is_rejected() {
        let img = Image2D::zeros(16, 16, 0.1);
        assert_eq!(noise_index(&img, 0.5).unwrap_err().category(), "invalid");
    }

    #[test]
    fn noise_index_recovers_gaussian_sigma() {
        let img = gaussian_image(128, 0.1, 10.0, 7).map(|v| v + 50.0);
        assert!(img.disk_indices(0.9).len() >= 10_000);
        let ni = noise_index(&img, 0.9).unwrap();
        assert!((ni - 10.0).abs() < 0.5, "noise index {ni}");
    }

    #[test]
    fn nps_input_validation() {
        let imgs = vec![gaussian_image(32, 0.1, 1.0, 0)];
        assert_eq!(
            nps(&imgs, MeanSource::Ensemble, &[(0, 0)], 16)
                .unwrap_err()
                .category(),
            "invalid"
        );
        let imgs = vec![gaussian_image(32, 0.1, 1.0, 0), gaussian_image(16, 0.1, 1.0, 1)];
        assert_eq!(
            nps(&imgs, MeanSource::Ensemble, &[(0, 0)], 16)
                .unwrap_err()
                .category(),
            "shape"
        );
        let imgs = vec![gaussian_image(32, 0.1, 1.0, 0), gaussian_image(32, 0.1, 1.0, 1)];
        assert_eq!(
            nps(&imgs, MeanSource::Ensemble, &[(20, 0)], 16)
                .unwrap_err()
                .category(),
            "invalid"
        );
    }

    #[test]
    fn identical_realizations_have_zero_nps() {
        let img = gaussian_image(32, 0.1, 2.0, 3);
        let res = nps(
            &[img.clone(), img],
            MeanSource::Ensemble,
            &[(0, 0), (0, 16)],
            16,
        )
        .unwrap();
        assert!(res.nps2d.iter().all(|&p| p == 0.0));
    }

    fn white_noise_set(sigma: f64, count: usize) -> Vec<Image2D> {
        (0..count)
            .map(|i| gaussian_image(64, 0.1, sigma, 100 + i as u64))
            .collect()
    }

    #[test]
    fn white_noise_spectrum_is_flat_and_parseval_holds() {
        let sigma = 3.0;
        let imgs = white_noise_set(sigma, 50);
        let res = nps(&imgs, MeanSource::Ensemble, &[(0, 0)], 64).unwrap();
        let mean = res.radial_power.iter().sum::<f64>() / res.radial_power.len() as f64;
        let var = res
            .radial_power
            .iter()
            .map(|&p| (p - mean) * (p - mean))
            .sum::<f64>()
            / res.radial_power.len() as f64;
        let cov = var.sqrt() / mean;
        assert!(cov < 0.15, "radial profile coefficient of variation {cov}");

        let integral: f64 = res.nps2d.iter().sum::<f64>() * res.du * res.dv;
        assert!(
            (integral - sigma * sigma).abs() < 0.05 * sigma * sigma,
            "Parseval integral {integral} vs variance {}",
            sigma * sigma
        );
    }

    #[test]
    fn parseval_matches_ensemble_pixel_variance_exactly() {
        let imgs = white_noise_set(2.0, 8);
        let res = nps(&imgs, MeanSource::Ensemble, &[(0, 0)], 64).unwrap();
        // recompute the ensemble pixel variance the definition way
        let mut mean = Image2D::zeros(64, 64, 0.1);
        for img in &imgs {
            mean = mean.add(img).unwrap();
        }
        let mean = mean.scale(1.0 / imgs.len() as f64);
        let mut var = 0.0;
        for img in &imgs {
            for (&x, &m) in img.data().iter().zip(mean.data()) {
                var += (x - m) * (x - m);
            }
        }
        var /= (imgs.len() * 64 * 64) as f64;
        let integral: f64 = res.nps2d.iter().sum::<f64>() * res.du * res.dv;
        assert!(
            (integral - var).abs() <= 1e-10 * var,
            "{integral} vs {var}"
        );
    }

    #[test]
    fn binned_power_accounts_for_all_power() {
        let res = nps(&white_noise_set(1.5, 6), MeanSource::Ensemble, &[(0, 0)], 64).unwrap();
        let binned: f64 = res
            .radial_power
            .iter()
            .zip(&res.radial_count)
            .map(|(&p, &c)| p * c as f64)
            .sum();
        let total: f64 = res.nps2d.iter().sum();
        assert!((binned - total).abs() <= 1e-10 * total);
        assert_eq!(res.radial_count.iter().sum::<usize>(), 64 * 64);
    }

    #[test]
    fn nps_scales_quadratically_and_ignores_offsets() {
        let imgs = white_noise_set(1.0, 10);
        let base = nps(&imgs, MeanSource::Ensemble, &[(0, 0)], 32).unwrap();
        let scaled: Vec<Image2D> = imgs.iter().map(|i| i.scale(3.0)).collect();
        let shifted: Vec<Image2D> = imgs.iter().map(|i| i.map(|v| v + 5.0)).collect();
        let res3 = nps(&scaled, MeanSource::Ensemble, &[(0, 0)], 32).unwrap();
        let res_off = nps(&shifted, MeanSource::Ensemble, &[(0, 0)], 32).unwrap();
        let peak = base.nps2d.iter().cloned().fold(0.0, f64::max);
        for i in 0..base.nps2d.len() {
            assert!((res3.nps2d[i] - 9.0 * base.nps2d[i]).abs() <= 1e-10 * peak);
            assert!((res_off.nps2d[i] - base.nps2d[i]).abs() <= 1e-10 * peak);
        }
    }

    #[test]
    fn reference_mean_matches_known_clean_content() {
        // noise around a fixed ramp: with the clean ramp as reference the
        // spectrum must match the noise-only spectrum
        let ramp = Image2D::zeros(32, 32, 0.1).map(|_| 0.0);
        let mut ramp = ramp;
        for r in 0..32 {
            for c in 0..32 {
                ramp.set(r, c, 0.3 * c as f64);
            }
        }
        let noise = white_noise_set(1.0, 12);
        let noisy: Vec<Image2D> = noise
            .iter()
            .map(|n| n.crop(0, 0, 32).unwrap().add(&ramp).unwrap())
            .collect();
        let res = nps(&noisy, MeanSource::Reference(&ramp), &[(0, 0)], 32).unwrap();
        let integral: f64 = res.nps2d.iter().sum::<f64>() * res.du * res.dv;
        assert!((integral - 1.0).abs() < 0.1, "integral {integral}");
    }

    fn synthetic_profile(power: Vec<f64>) -> NpsResult {
        let n = power.len();
        NpsResult {
            patch: 2 * n,
            realizations: 2,
            nps2d: vec![],
            du: 0.5,
            dv: 0.5,
            radial_freq: (0..n).map(|b| (b as f64 + 0.5) * 0.5).collect(),
            radial_power: power,
            radial_count: vec![1; n],
        }
    }

    #[test]
    fn similarity_of_identical_profiles_is_one() {
        let imgs = white_noise_set(1.0, 5);
        let res = nps(&imgs, MeanSource::Ensemble, &[(0, 0)], 32).unwrap();
        let sim = nps_similarity(&res, &res).unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_separates_flat_from_ramp_profiles() {
        // near-flat spectrum with measurement jitter vs a rising ramp
        let flat = synthetic_profile(
            (0..40)
                .map(|i| 1.0 + if i % 2 == 0 { 0.01 } else { -0.01 })
                .collect(),
        );
        let ramp = synthetic_profile((0..40).map(|i| 0.05 * i as f64).collect());
        let sim = nps_similarity(&flat, &ramp).unwrap();
        assert!(sim < 0.5, "similarity {sim}");
    }

    #[test]
    fn similarity_rejects_mismatched_axes() {
        let a = synthetic_profile(vec![1.0, 2.0, 3.0]);
        let b = synthetic_profile(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(nps_similarity(&a, &b).unwrap_err().category(), "invalid");
    }
}
