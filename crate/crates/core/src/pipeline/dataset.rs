//! Multi-dose dataset synthesis: render each phantom, scan it once, then
//! reconstruct a clean image plus one noisy image per dose from that shared
//! sinogram, so every image of a sample is perfectly co-registered.

use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::container;
use crate::ct;
use crate::decompose::quantize;
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::negan::{set_noise_factors, DoseLevels};
use crate::noise::DoseSpec;
use crate::phantom::{self, RandomPhantomCfg};
use crate::pipeline::config::SimulateCfg;
use crate::pipeline::manifest::{LevelSpec, Manifest, SampleSpec, WindowSpec, MANIFEST_VERSION};
use crate::rng;

/// seed-derivation tags: one stream family for phantom shapes,
/// one for scan noise
const PHANTOM_SEEDS: u64 = 0x64617461;
const SCAN_SEEDS: u64 = 0x7363616e;

fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    rng::stream(master, tag, a, b).next_u64()
}

pub(crate) fn render_phantom(kind: &str, seed: u64, n: usize, spacing: f64) -> Image2D {
    match kind {
        "shepp" => phantom::shepp_logan(n, spacing).image,
        _ => phantom::random_phantom(seed, &RandomPhantomCfg::default(), n, spacing).image,
    }
}

/// Build the dataset under `out` and return its manifest (also written to
/// `out/manifest.toml`). Per sample: `clean.ldct` (noiseless reconstruction,
/// which doubles as the decomposition's clean half) and `level{j}.ldct` per
/// dose, plus `n0.ldct`, the reference-dose noise image. Same seed, same
/// bytes.
pub fn make_multidose_set(cfg: &SimulateCfg, seed: u64, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let geom = cfg.geometry.to_geometry().expect("validated above");
    let factors = set_noise_factors(
        &DoseLevels::TubeCurrents(cfg.doses_ma.clone()),
        cfg.round_factors,
    )
    .map_err(|e| Error::Config(format!("simulate.doses_ma: {e}")))?;
    let mut levels = vec![LevelSpec {
        ma: cfg.doses_ma[0],
        k: 1.0,
    }];
    levels.extend(
        cfg.doses_ma[1..]
            .iter()
            .zip(&factors)
            .map(|(&ma, &k)| LevelSpec { ma, k }),
    );

    let total = cfg.phantoms + cfg.test_count;
    let mut samples = Vec::with_capacity(total);
    let mut images: Vec<(PathBuf, Image2D)> = Vec::new();
    for i in 0..total {
        let id = format!("s{i:03}");
        let dir = format!("images/{id}");
        let phantom_seed = derive_seed(seed, PHANTOM_SEEDS, i as u64, 0);
        let truth = render_phantom(&cfg.kind, phantom_seed, geom.n, geom.pixel_spacing);
        let sino = ct::radon(&truth, &geom)?;
        let clean = quantize(&ct::fbp(&sino)?);

        let mut ldct = Vec::with_capacity(levels.len() - 1);
        let mut hdct = None;
        for (j, level) in levels.iter().enumerate() {
            let dose = DoseSpec::new(level.ma, derive_seed(seed, SCAN_SEEDS, i as u64, j as u64))?
                .with_alpha(cfg.alpha)?
                .with_sigma_e(cfg.sigma_e)?;
            let (noisy, _) = crate::noise::insert_noise(&sino, &dose)?;
            let recon = quantize(&ct::fbp(&noisy)?);
            let rel = format!("{dir}/level{j}.ldct");
            if j == 0 {
                hdct = Some(recon.clone());
            } else {
                ldct.push(rel.clone());
            }
            images.push((rel.into(), recon));
        }
        // reference-dose noise image; both operands sit on the value grid,
        // so clean + n0 reassembles level0 bit for bit
        let n0 = hdct.expect("levels are non-empty").sub(&clean)?;
        images.push((format!("{dir}/clean.ldct").into(), clean));
        images.push((format!("{dir}/n0.ldct").into(), n0));

        samples.push(SampleSpec {
            id,
            phantom_seed,
            split: if i < cfg.phantoms { "train" } else { "test" }.into(),
            clean: format!("{dir}/clean.ldct"),
            hdct: format!("{dir}/level0.ldct"),
            ldct,
            x0: Some(format!("{dir}/clean.ldct")),
            n0: Some(format!("{dir}/n0.ldct")),
        });
    }

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        phantom_kind: cfg.kind.clone(),
        seed,
        alpha: cfg.alpha,
        sigma_e: cfg.sigma_e,
        round_factors: cfg.round_factors,
        geometry: cfg.geometry.clone(),
        window: WindowSpec {
            center: cfg.window.center,
            width: cfg.window.width,
        },
        levels,
        samples,
    };
    manifest.validate()?;

    for (rel, img) in &images {
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
        }
        container::write_image(&path, img)?;
    }
    manifest.save(&out.join("manifest.toml"))?;
    Ok(manifest)
}
