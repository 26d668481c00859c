//! Splitting a higher-dose CT image into a clean image x0 and a noise image
//! n0 with x0 + n0 reproducing the input bit for bit.
//!
//! Two schemes are provided. The simulation scheme treats a known clean image
//! as ground truth and scans it virtually at the reference dose; both images
//! are snapped to a dyadic value grid first so the subtraction and the
//! round-trip addition are exact in f64. The denoiser scheme estimates the
//! clean image with a regression network (the entangling generator's topology
//! minus its noise channel) and repairs the residual per pixel until the
//! addition reproduces the input exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

use crate::container::{self, Entry};
use crate::ct::{self, ScanGeometry};
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::negan::model::{self, ArchConfig, Window};
use crate::negan::train::{meta_scalar, meta_vec};
use crate::nn::{Adam, Graph, ModelParams, Scalar};
use crate::noise::DoseSpec;
use crate::rng;

/// Pixel values are snapped to multiples of 2^-12 (about 1.2 HU at the 0.2/cm
/// attenuation of water, comparable to clinical integer-HU storage). On this
/// grid f64 sums and differences of image-scale values are exact.
pub const VALUE_GRID: f64 = 1.0 / 4096.0;

const DENOISE_TAG: u64 = 0x64656e6f; // per-epoch shuffle/crop streams

/// Snap every pixel to the dyadic value grid. Negative zeros are normalized
/// away so grid arithmetic stays bit-reproducible.
pub fn quantize(img: &Image2D) -> Image2D {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v / VALUE_GRID).round() * VALUE_GRID + 0.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    /// virtual scan of a known clean image at the given noise seed
    Simulation { seed: u64 },
    /// network estimate of the clean image from the named checkpoint
    Denoiser { checkpoint: String },
}

#[derive(Debug, Clone)]
pub struct DecompositionPair {
    pub x0: Image2D,
    pub n0: Image2D,
    pub scheme: Scheme,
    /// identifier of the image the pair was derived from
    pub source: String,
}

impl DecompositionPair {
    /// The decomposed image, reassembled; equals the decomposition input bit
    /// for bit.
    pub fn hdct(&self) -> Image2D {
        self.x0.add(&self.n0).expect("pair images are co-registered")
    }
}

/// Scan the clean image virtually at the reference dose. The clean CT image
/// x0 is the noiseless reconstruction of the input — the scan-domain image
/// the scanner would produce without noise — so the noise image is exactly
/// the inserted counting noise, free of reconstruction error. Both images
/// are value-grid quantized, which makes x0 + n0 == hdct exact.
pub fn simulation_scheme(
    clean: &Image2D,
    geom: &ScanGeometry,
    hd_dose: &DoseSpec,
    source: &str,
) -> Result<DecompositionPair> {
    let sino = ct::radon(clean, geom)?;
    let (noisy, _) = crate::noise::insert_noise(&sino, hd_dose)?;
    let hdct = quantize(&ct::fbp(&noisy)?);
    let x0 = quantize(&ct::fbp(&sino)?);
    let mut n0 = hdct.clone();
    for (n, (&h, &x)) in n0.data_mut().iter_mut().zip(hdct.data().iter().zip(x0.data())) {
        *n = h - x;
        debug_assert_eq!((x + *n).to_bits(), h.to_bits());
    }
    Ok(DecompositionPair {
        x0,
        n0,
        scheme: Scheme::Simulation { seed: hd_dose.seed },
        source: source.to_string(),
    })
}

/// The paper's reference baseline: scale the extracted noise and add it back.
pub fn scaled_addition_baseline(pair: &DecompositionPair, k: f64) -> Result<Image2D> {
    if !(k >= 0.0) {
        return Err(Error::Invalid(format!("noise scale must be >= 0, got {k}")));
    }
    pair.x0.add(&pair.n0.scale(k))
}

fn ulp_step(x: f64, steps: i64) -> f64 {
    // total-order mapping: monotone integer line over all finite doubles
    let u = x.to_bits();
    let m = if u >> 63 == 1 { !u } else { u | (1 << 63) };
    let m = m.wrapping_add(steps as u64);
    f64::from_bits(if m >> 63 == 1 { m & !(1 << 63) } else { !m })
}

/// Find (a, n) with (a + n) == total bit-exactly and a as close to `want` as
/// floating point allows. Rounding can make the naive residual miss by an
/// ulp, so the candidate is refined and then nudged; when no representable
/// residual exists (wildly mismatched magnitudes) the pixel degrades to
/// (total, -0.0), which re-adds exactly for every finite total.
fn exact_split_pixel(total: f64, want: f64) -> (f64, f64) {
    let mut a = want;
    for _ in 0..3 {
        let n = total - a;
        if (a + n).to_bits() == total.to_bits() {
            return (a, n);
        }
        a = total - n;
    }
    for da in [1i64, -1, 2, -2, 3, -3] {
        let a2 = ulp_step(a, da);
        let n = total - a2;
        if (a2 + n).to_bits() == total.to_bits() {
            return (a2, n);
        }
    }
    (total, -0.0)
}

/// Regression network that maps a reference-dose image toward its clean
/// content; same encoder-decoder as the entangling generator but with a
/// single input channel.
#[derive(Debug, Clone)]
pub struct Denoiser<S: Scalar> {
    pub arch: ArchConfig,
    pub window: Window,
    pub params: ModelParams<S>,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserCfg {
    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// epochs at the base rate, then a linear decay to zero over `lr_decay`;
    /// the decay settles the mean-abs level equilibrium instead of letting
    /// the optimizer random-walk around it
    pub lr_flat: usize,
    pub lr_decay: usize,
    pub seed: u64,
}

impl Default for DenoiserCfg {
    fn default() -> Self {
        DenoiserCfg {
            epochs: 60,
            batch: 8,
            patch: 32,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lr_flat: 30,
            lr_decay: 30,
            seed: 0,
        }
    }
}

/// Fit the network on (reference-dose, lower-dose) image pairs of the same
/// anatomy under a mean-abs loss. With independent noise in input and target
/// the regression converges toward the shared clean content, so no clean
/// images are needed.
pub fn train_denoiser<S: Scalar>(
    pairs: &[(Image2D, Image2D)],
    arch: ArchConfig,
    window: Window,
    cfg: &DenoiserCfg,
) -> Result<Denoiser<S>> {
    if pairs.is_empty() {
        return Err(Error::Train("no training pairs".into()));
    }
    if cfg.batch == 0 || cfg.patch < 4 || cfg.patch % 4 != 0 {
        return Err(Error::Train(format!(
            "need batch >= 1 and a patch size divisible by 4, got batch {} patch {}",
            cfg.batch, cfg.patch
        )));
    }
    for (i, (hd, ld)) in pairs.iter().enumerate() {
        if !hd.same_shape(ld) {
            return Err(Error::Train(format!("pair {i} images are not co-registered")));
        }
        if hd.height() < cfg.patch || hd.width() < cfg.patch {
            return Err(Error::Train(format!(
                "pair {i} is {}x{}, smaller than the {} patch",
                hd.height(),
                hd.width(),
                cfg.patch
            )));
        }
    }
    let mut den = Denoiser {
        params: model::init_generator::<S>(&arch, cfg.seed, 1),
        arch,
        window,
        epoch: 0,
    };
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let steps = pairs.len().div_ceil(cfg.batch);
    for epoch in 0..cfg.epochs {
        let lr = crate::nn::lr_schedule(cfg.lr, cfg.lr_flat, cfg.lr_decay, epoch);
        let mut erng = rng::stream(cfg.seed, DENOISE_TAG, epoch as u64, 0);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut erng);
        for step in 0..steps {
            let mut inputs = Vec::with_capacity(cfg.batch);
            let mut targets = Vec::with_capacity(cfg.batch);
            for b in 0..cfg.batch {
                let (hd, ld) = &pairs[order[(step * cfg.batch + b) % pairs.len()]];
                let r0 = erng.random_range(0..=hd.height() - cfg.patch);
                let c0 = erng.random_range(0..=hd.width() - cfg.patch);
                inputs.push(hd.crop(r0, c0, cfg.patch).unwrap());
                targets.push(ld.crop(r0, c0, cfg.patch).unwrap());
            }
            let input_refs: Vec<&Image2D> = inputs.iter().collect();
            let target_refs: Vec<&Image2D> = targets.iter().collect();
            let mut g = Graph::new();
            let x = g.input(model::image_batch(&window, &input_refs));
            let t = g.input(model::image_batch(&window, &target_refs));
            let y = model::generator_forward(&mut g, &den.params, &den.arch, x);
            let loss = g.mean_abs_diff(y, t);
            g.backward(loss);
            adam.step(&mut den.params, &g.named_grads(), lr);
        }
        den.epoch = epoch + 1;
    }
    Ok(den)
}

/// Run the network on one image.
pub fn denoise<S: Scalar>(den: &Denoiser<S>, img: &Image2D) -> Result<Image2D> {
    if !img.is_finite() {
        return Err(Error::Invalid("image contains non-finite values".into()));
    }
    if img.height() % 4 != 0 || img.width() % 4 != 0 {
        return Err(Error::Invalid(format!(
            "image sides must be divisible by 4, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut g = Graph::new();
    let x = g.input(model::image_batch(&den.window, &[img]));
    let y = model::generator_forward(&mut g, &den.params, &den.arch, x);
    let out = g.value(y);
    let mut result = Image2D::zeros(img.height(), img.width(), img.spacing());
    for (dst, &v) in result.data_mut().iter_mut().zip(out.data()) {
        *dst = den.window.denorm(v.as_f64());
    }
    Ok(result)
}

/// Estimate the clean image with the network and keep the residual as the
/// noise image; the residual is repaired pixelwise so x0 + n0 == hdct holds
/// bit-exactly for any finite input.
pub fn denoiser_scheme<S: Scalar>(
    hdct: &Image2D,
    den: &Denoiser<S>,
    source: &str,
    checkpoint: &str,
) -> Result<DecompositionPair> {
    let estimate = quantize(&denoise(den, hdct)?);
    let mut x0 = estimate;
    let mut n0 = hdct.clone();
    for ((x, n), &h) in x0.data_mut().iter_mut().zip(n0.data_mut()).zip(hdct.data()) {
        let (a, r) = exact_split_pixel(h, *x);
        *x = a;
        *n = r;
    }
    Ok(DecompositionPair {
        x0,
        n0,
        scheme: Scheme::Denoiser {
            checkpoint: checkpoint.to_string(),
        },
        source: source.to_string(),
    })
}

pub fn save_denoiser<S: Scalar>(den: &Denoiser<S>, path: &Path) -> Result<()> {
    let mut entries = vec![
        Entry::scalar("meta.den.version", 1.0),
        Entry::f64(
            "meta.den.window",
            vec![2],
            vec![den.window.center, den.window.width],
        ),
        Entry::f64(
            "meta.den.arch",
            vec![4],
            vec![
                den.arch.base_width as f64,
                den.arch.res_blocks as f64,
                den.arch.disc_layers as f64,
                den.arch.disc_width as f64,
            ],
        ),
        Entry::scalar("meta.den.epoch", den.epoch as f64),
    ];
    entries.extend(den.params.to_entries("den."));
    container::write(path, &entries)
}

pub fn load_denoiser<S: Scalar>(path: &Path) -> Result<Denoiser<S>> {
    let entries = container::read(path)?;
    let version = meta_scalar(&entries, "meta.den.version")?;
    if version != 1.0 {
        return Err(Error::Format(format!("unsupported denoiser version {version}")));
    }
    let win = meta_vec(&entries, "meta.den.window")?;
    let arch_v = meta_vec(&entries, "meta.den.arch")?;
    if win.len() != 2 || arch_v.len() != 4 {
        return Err(Error::Format("denoiser metadata is malformed".into()));
    }
    Ok(Denoiser {
        arch: ArchConfig {
            base_width: arch_v[0] as usize,
            res_blocks: arch_v[1] as usize,
            disc_layers: arch_v[2] as usize,
            disc_width: arch_v[3] as usize,
        },
        window: Window::new(win[0], win[1])?,
        params: ModelParams::from_entries("den.", &entries)?,
        epoch: meta_scalar(&entries, "meta.den.epoch")? as usize,
    })
}
