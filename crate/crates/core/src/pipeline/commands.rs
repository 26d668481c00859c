//! The four workflow verbs as library calls. Each validates everything it
//! can before touching the output directory, and returns a summary struct;
//! printing is the binary's job.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;

use crate::container;
use crate::ct::{self, ScanGeometry};
use crate::decompose::{self, quantize};
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::metrics::{self, MeanSource, NpsResult};
use crate::negan::{self, EpochStats, NeganModel, Trainer, TrainingSample, Window};
use crate::noise::DoseSpec;
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::{self, render_phantom};
use crate::pipeline::manifest::{Manifest, SampleSpec};
use crate::rng;

/// networks run in single precision end to end
type S = f32;

const EVAL_SEEDS: u64 = 0x6576616c;

fn read_rel(base: &Path, rel: &str) -> Result<Image2D> {
    container::read_image(&base.join(rel))
}

fn resolve_out(flag: Option<&Path>, cfg_out: &str) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(cfg_out))
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub out: PathBuf,
    pub manifest_path: PathBuf,
    pub samples: usize,
    pub levels: usize,
    pub images: usize,
    pub k: Vec<f64>,
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    seed_flag: Option<u64>,
    out_flag: Option<&Path>,
) -> Result<SimulateSummary> {
    cfg.validate()?;
    let seed = cfg.resolve_seed(seed_flag)?;
    let out = resolve_out(out_flag, &cfg.simulate.out);
    let manifest = dataset::make_multidose_set(&cfg.simulate, seed, &out)?;
    Ok(SimulateSummary {
        manifest_path: out.join("manifest.toml"),
        out,
        samples: manifest.samples.len(),
        levels: manifest.levels.len(),
        // per sample: one clean (doubling as x0), one per dose, one n0
        images: manifest.samples.len() * (manifest.levels.len() + 2),
        k: manifest.levels[1..].iter().map(|l| l.k).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub denoiser: Option<PathBuf>,
    pub scheme: String,
    pub epochs_run: usize,
    pub epochs_total: usize,
    pub last: Option<EpochStats>,
    pub warnings: Vec<String>,
}

fn window_warning(what: &str, manifest: Window, model: Window) -> Option<String> {
    (manifest != model).then(|| {
        format!(
            "manifest window (center {} width {}) differs from the {what} window \
             (center {} width {}); proceeding with the {what}'s",
            manifest.center, manifest.width, model.center, model.width
        )
    })
}

pub fn cmd_train(
    cfg: &RunConfig,
    manifest_path: &Path,
    seed_flag: Option<u64>,
    out_flag: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let seed = cfg.resolve_seed(seed_flag)?;
    let t = &cfg.train;
    let out = resolve_out(out_flag, &t.out);
    let (manifest, base) = Manifest::load(manifest_path)?;
    if manifest.levels.len() < 2 {
        return Err(Error::Manifest(
            "training needs at least one lower-dose level in the manifest".into(),
        ));
    }
    manifest.validate_files(&base)?;
    let window = manifest.window.to_window().expect("validated on load");
    let train_cfg = t.train_cfg(seed)?;
    let ks: Vec<f64> = manifest.levels[1..].iter().map(|l| l.k).collect();
    let train_split: Vec<&SampleSpec> = manifest
        .samples
        .iter()
        .filter(|s| s.split == "train")
        .collect();
    if train_split.is_empty() {
        return Err(Error::Manifest("manifest has no samples in the train split".into()));
    }

    let mut warnings = Vec::new();
    let mut trainer = match resume {
        Some(ck) => Trainer::<S>::load(ck, &train_cfg)?,
        None => Trainer::new(
            NeganModel::new(t.arch(), window, ks.clone(), seed)?,
            &train_cfg,
        ),
    };
    if trainer.model.k_train != ks {
        return Err(Error::Train(format!(
            "checkpoint was trained on factors {:?} but the manifest implies {:?}",
            trainer.model.k_train, ks
        )));
    }
    warnings.extend(window_warning("checkpoint", window, trainer.model.window));

    let mut denoiser_path = None;
    // (x0, n0) per training sample, by scheme
    let pairs: Vec<(Image2D, Image2D)> = match t.scheme.as_str() {
        "simulation" => train_split
            .iter()
            .map(|s| {
                let (x0, n0) = match (&s.x0, &s.n0) {
                    (Some(x0), Some(n0)) => (x0, n0),
                    _ => {
                        return Err(Error::Manifest(format!(
                            "sample {} carries no decomposition pair; re-simulate the \
                             dataset or switch train.scheme to \"denoiser\"",
                            s.id
                        )))
                    }
                };
                Ok((read_rel(&base, x0)?, read_rel(&base, n0)?))
            })
            .collect::<Result<_>>()?,
        _ => {
            let target = match t.denoiser_target_ma {
                None => manifest.levels.len() - 1,
                Some(ma) => manifest
                    .levels
                    .iter()
                    .position(|l| l.ma == ma)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "train.denoiser_target_ma = {ma} matches no manifest dose level"
                        ))
                    })?,
            };
            if target == 0 {
                return Err(Error::Config(
                    "train.denoiser_target_ma names the reference level; pick a lower dose"
                        .into(),
                ));
            }
            let noisy_pairs: Vec<(Image2D, Image2D)> = train_split
                .iter()
                .map(|s| Ok((read_rel(&base, &s.hdct)?, read_rel(&base, &s.ldct[target - 1])?)))
                .collect::<Result<_>>()?;
            let den = decompose::train_denoiser::<S>(
                &noisy_pairs,
                t.arch(),
                window,
                &t.denoiser_cfg(seed),
            )?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.clone(), e))?;
            let dpath = out.join("denoiser.ldct");
            decompose::save_denoiser(&den, &dpath)?;
            let result = train_split
                .iter()
                .zip(&noisy_pairs)
                .map(|(s, (hd, _))| {
                    let pair = decompose::denoiser_scheme(hd, &den, &s.id, "denoiser.ldct")?;
                    Ok((pair.x0, pair.n0))
                })
                .collect::<Result<_>>()?;
            denoiser_path = Some(dpath);
            result
        }
    };

    let mut samples = Vec::with_capacity(train_split.len() * ks.len());
    for (spec, (x0, n0)) in train_split.iter().zip(&pairs) {
        for (level, &k) in ks.iter().enumerate() {
            samples.push(TrainingSample {
                x0: x0.clone(),
                n0: n0.clone(),
                level,
                k,
                target: read_rel(&base, &spec.ldct[level])?,
            });
        }
    }

    trainer.run(&samples, &train_cfg)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.clone(), e))?;
    let checkpoint = out.join("checkpoint.ldct");
    trainer.save(&checkpoint)?;
    let log_path = out.join("loss_log.tsv");
    let mut log = String::new();
    // resuming appends so the log keeps one row per epoch overall
    if !(resume.is_some() && log_path.exists()) {
        log.push_str("epoch\tlr\td_loss\tg_loss\tfid\trec\n");
    }
    for row in &trainer.log {
        log.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            row.epoch, row.lr, row.d_loss, row.g_loss, row.fid, row.rec
        ));
    }
    if resume.is_some() && log_path.exists() {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(log_path.clone(), e))?;
        f.write_all(log.as_bytes()).map_err(|e| Error::io(log_path.clone(), e))?;
    } else {
        std::fs::write(&log_path, log).map_err(|e| Error::io(log_path.clone(), e))?;
    }

    Ok(TrainSummary {
        out,
        checkpoint,
        log_path,
        denoiser: denoiser_path,
        scheme: t.scheme.clone(),
        epochs_run: trainer.log.len(),
        epochs_total: trainer.model.epoch,
        last: trainer.log.last().copied(),
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub out: PathBuf,
    pub inputs: usize,
    pub images: usize,
    pub k: Vec<f64>,
    pub seconds: f64,
    pub images_per_second: f64,
    pub warnings: Vec<String>,
}

pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    out_flag: Option<&Path>,
    k_flag: Option<&[f64]>,
) -> Result<GenerateSummary> {
    cfg.validate()?;
    let out = resolve_out(out_flag, &cfg.generate.out);
    let model = negan::load_model::<S>(checkpoint)?;
    let (manifest, base) = Manifest::load(manifest_path)?;
    let ks: Vec<f64> = k_flag
        .map(<[f64]>::to_vec)
        .or_else(|| cfg.generate.k.clone())
        .unwrap_or_else(|| model.k_train.clone());
    if ks.iter().any(|&k| !(k >= 0.0)) {
        return Err(Error::Invalid(format!(
            "noise factors must be finite and >= 0: {ks:?}"
        )));
    }
    let mut warnings = Vec::new();
    warnings.extend(window_warning(
        "checkpoint",
        manifest.window.to_window().expect("validated on load"),
        model.window,
    ));
    let inputs: Vec<&SampleSpec> = manifest.samples.iter().filter(|s| s.x0.is_some()).collect();
    if inputs.is_empty() {
        return Err(Error::Manifest(
            "no sample in the manifest carries a decomposition pair".into(),
        ));
    }
    manifest.validate_files(&base)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.clone(), e))?;
    let started = Instant::now();
    let mut images = 0usize;
    for s in &inputs {
        let x0 = read_rel(&base, s.x0.as_ref().expect("filtered on x0"))?;
        let n0 = read_rel(&base, s.n0.as_ref().expect("x0 and n0 come in pairs"))?;
        for &k in &ks {
            let img = negan::generate(&model, &x0, &n0, k)?;
            container::write_image(&out.join(format!("{}_k{k}.ldct", s.id)), &img)?;
            images += 1;
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    Ok(GenerateSummary {
        out,
        inputs: inputs.len(),
        images,
        k: ks,
        seconds,
        images_per_second: images as f64 / seconds.max(1e-9),
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateSummary {
    pub out: PathBuf,
    pub report_path: PathBuf,
    pub profiles_path: PathBuf,
    pub rows: usize,
    pub realizations: usize,
    pub test_samples: usize,
    pub warnings: Vec<String>,
}

/// Reference ensembles for one held-out sample: `refs[j][r]` is realization
/// r of dose level j, re-simulated from the sample's phantom seed; `n0s[r]`
/// is the reference-dose noise image extracted from `refs[0][r]`.
struct SampleEnsembles {
    x0: Image2D,
    refs: Vec<Vec<Image2D>>,
    n0s: Vec<Image2D>,
}

fn simulate_ensembles(
    manifest: &Manifest,
    base: &Path,
    spec: &SampleSpec,
    sample_idx: usize,
    geom: &ScanGeometry,
    seed: u64,
    realizations: usize,
) -> Result<SampleEnsembles> {
    let truth = render_phantom(&manifest.phantom_kind, spec.phantom_seed, geom.n, geom.pixel_spacing);
    let sino = ct::radon(&truth, geom)?;
    let x0 = match &spec.x0 {
        Some(rel) => read_rel(base, rel)?,
        None => quantize(&ct::fbp(&sino)?),
    };
    let mut refs = Vec::with_capacity(manifest.levels.len());
    for (j, level) in manifest.levels.iter().enumerate() {
        let mut imgs = Vec::with_capacity(realizations);
        for r in 0..realizations {
            let scan_seed = rng::stream(
                seed,
                EVAL_SEEDS,
                sample_idx as u64,
                ((j as u64) << 32) | r as u64,
            )
            .next_u64();
            let dose = DoseSpec::new(level.ma, scan_seed)?
                .with_alpha(manifest.alpha)?
                .with_sigma_e(manifest.sigma_e)?;
            let (noisy, _) = crate::noise::insert_noise(&sino, &dose)?;
            imgs.push(quantize(&ct::fbp(&noisy)?));
        }
        refs.push(imgs);
    }
    let n0s = refs[0].iter().map(|hd| hd.sub(&x0)).collect::<Result<_>>()?;
    Ok(SampleEnsembles { x0, refs, n0s })
}

/// Mean noise index over every realization of every sample.
fn mean_ni(per_sample: &[Vec<Image2D>], roi: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for imgs in per_sample {
        for img in imgs {
            acc += metrics::noise_index(img, roi)?;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Per-sample ensemble NPS, then radial profiles averaged across samples.
fn ensemble_nps(per_sample: &[Vec<Image2D>], patch: usize) -> Result<NpsResult> {
    let n = per_sample[0][0].height();
    let corner = (n - patch) / 2;
    let mut merged: Option<NpsResult> = None;
    for imgs in per_sample {
        let one = metrics::nps(imgs, MeanSource::Ensemble, &[(corner, corner)], patch)?;
        merged = Some(match merged {
            None => one,
            Some(mut m) => {
                for (dst, src) in m.radial_power.iter_mut().zip(&one.radial_power) {
                    *dst += src;
                }
                for (dst, src) in m.nps2d.iter_mut().zip(&one.nps2d) {
                    *dst += src;
                }
                m
            }
        });
    }
    let mut m = merged.expect("at least one test sample");
    let scale = 1.0 / per_sample.len() as f64;
    for v in &mut m.radial_power {
        *v *= scale;
    }
    for v in &mut m.nps2d {
        *v *= scale;
    }
    Ok(m)
}

struct ReportRow {
    level: Option<usize>,
    ma: Option<f64>,
    k: Option<f64>,
    ni_reference: Option<f64>,
    ni_negan: Option<f64>,
    ni_baseline: Option<f64>,
    nps_negan: Option<f64>,
    nps_baseline: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".into(),
    }
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    manifest_path: &Path,
    checkpoint: Option<&Path>,
    seed_flag: Option<u64>,
    out_flag: Option<&Path>,
    k_flag: Option<&[f64]>,
) -> Result<EvaluateSummary> {
    cfg.validate()?;
    let seed = cfg.resolve_seed(seed_flag)?;
    let e = &cfg.evaluate;
    let out = resolve_out(out_flag, &e.out);
    let (manifest, base) = Manifest::load(manifest_path)?;
    let geom = manifest.geometry.to_geometry().expect("validated on load");
    if e.nps_patch > geom.n {
        return Err(Error::Config(format!(
            "evaluate.nps_patch = {} exceeds the {} px image side",
            e.nps_patch, geom.n
        )));
    }
    let tests: Vec<(usize, &SampleSpec)> = manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == "test")
        .collect();
    if tests.is_empty() {
        return Err(Error::Manifest("manifest has no test split to evaluate on".into()));
    }
    for (_, s) in &tests {
        if let Some(rel) = &s.x0 {
            if !base.join(rel).is_file() {
                return Err(Error::Manifest(format!("missing image file {}", base.join(rel).display())));
            }
        }
    }
    let model = checkpoint.map(negan::load_model::<S>).transpose()?;
    let ks: Vec<f64> = match (k_flag.map(<[f64]>::to_vec).or_else(|| e.k.clone()), &model) {
        (Some(list), _) if list.is_empty() => list,
        (Some(list), Some(_)) => list,
        (Some(_), None) => {
            return Err(Error::Config(
                "evaluate received noise factors but no --checkpoint to synthesize them".into(),
            ))
        }
        (None, Some(m)) => std::iter::once(1.0).chain(m.k_train.iter().copied()).collect(),
        (None, None) => vec![],
    };
    if ks.iter().any(|&k| !(k >= 0.0)) {
        return Err(Error::Invalid(format!(
            "noise factors must be finite and >= 0: {ks:?}"
        )));
    }
    let mut warnings = Vec::new();
    if let Some(m) = &model {
        warnings.extend(window_warning(
            "checkpoint",
            manifest.window.to_window().expect("validated on load"),
            m.window,
        ));
    }

    // reference ensembles, re-simulated per held-out sample
    let ensembles: Vec<SampleEnsembles> = tests
        .iter()
        .map(|(idx, s)| simulate_ensembles(&manifest, &base, s, *idx, &geom, seed, e.realizations))
        .collect::<Result<_>>()?;

    let mut rows: Vec<ReportRow> = Vec::new();
    let mut profiles: Vec<(String, Option<f64>, Option<f64>, NpsResult)> = Vec::new();
    let mut ref_nps: Vec<NpsResult> = Vec::new();
    for (j, level) in manifest.levels.iter().enumerate() {
        let per_sample: Vec<Vec<Image2D>> =
            ensembles.iter().map(|s| s.refs[j].clone()).collect();
        let nps = ensemble_nps(&per_sample, e.nps_patch)?;
        rows.push(ReportRow {
            level: Some(j),
            ma: Some(level.ma),
            k: Some(level.k),
            ni_reference: Some(mean_ni(&per_sample, e.roi)?),
            ni_negan: None,
            ni_baseline: None,
            nps_negan: None,
            nps_baseline: None,
        });
        profiles.push(("reference".into(), Some(level.ma), Some(level.k), nps.clone()));
        ref_nps.push(nps);
    }

    for &k in &ks {
        let m = model.as_ref().expect("checked when resolving the k list");
        let mut negan_imgs: Vec<Vec<Image2D>> = Vec::with_capacity(ensembles.len());
        let mut baseline_imgs: Vec<Vec<Image2D>> = Vec::with_capacity(ensembles.len());
        for s in &ensembles {
            let mut gen = Vec::with_capacity(s.n0s.len());
            let mut bas = Vec::with_capacity(s.n0s.len());
            for n0 in &s.n0s {
                gen.push(negan::generate(m, &s.x0, n0, k)?);
                bas.push(s.x0.add(&n0.scale(k))?);
            }
            negan_imgs.push(gen);
            baseline_imgs.push(bas);
        }
        let negan_nps = ensemble_nps(&negan_imgs, e.nps_patch)?;
        let baseline_nps = ensemble_nps(&baseline_imgs, e.nps_patch)?;
        let matched = manifest.levels.iter().position(|l| l.k == k);
        let (nps_negan, nps_baseline) = match matched {
            Some(j) => (
                Some(metrics::nps_similarity(&negan_nps, &ref_nps[j])?),
                Some(metrics::nps_similarity(&baseline_nps, &ref_nps[j])?),
            ),
            None => (None, None),
        };
        let row = ReportRow {
            level: matched,
            ma: matched.map(|j| manifest.levels[j].ma),
            k: Some(k),
            ni_reference: None,
            ni_negan: Some(mean_ni(&negan_imgs, e.roi)?),
            ni_baseline: Some(mean_ni(&baseline_imgs, e.roi)?),
            nps_negan,
            nps_baseline,
        };
        match matched {
            // fold the synthesis columns into the level's reference row
            Some(j) => {
                let dst = &mut rows[j];
                dst.ni_negan = row.ni_negan;
                dst.ni_baseline = row.ni_baseline;
                dst.nps_negan = row.nps_negan;
                dst.nps_baseline = row.nps_baseline;
            }
            None => rows.push(row),
        }
        let ma = matched.map(|j| manifest.levels[j].ma);
        profiles.push(("negan".into(), ma, Some(k), negan_nps));
        profiles.push(("baseline".into(), ma, Some(k), baseline_nps));
    }
    // untrained factors last, in ascending order
    rows[manifest.levels.len()..].sort_by(|a, b| {
        a.k.partial_cmp(&b.k).expect("factors are finite")
    });

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.clone(), e))?;
    let report_path = out.join("report.tsv");
    let mut text = String::from(
        "level\tma\tk\tni_reference\tni_negan\tni_baseline\tnps_negan\tnps_baseline\n",
    );
    for r in &rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.level.map(|j| j.to_string()).unwrap_or_else(|| "-".into()),
            opt(r.ma),
            opt(r.k),
            opt(r.ni_reference),
            opt(r.ni_negan),
            opt(r.ni_baseline),
            opt(r.nps_negan),
            opt(r.nps_baseline),
        ));
    }
    std::fs::write(&report_path, text).map_err(|e| Error::io(report_path.clone(), e))?;

    let profiles_path = out.join("nps_profiles.tsv");
    let mut text = String::from("series\tma\tk\tfreq\tpower\n");
    for (series, ma, k, nps) in &profiles {
        for (f, p) in nps.radial_freq.iter().zip(&nps.radial_power) {
            text.push_str(&format!(
                "{series}\t{}\t{}\t{f:.6}\t{p:.9e}\n",
                opt(*ma),
                opt(*k),
            ));
        }
    }
    std::fs::write(&profiles_path, text).map_err(|e| Error::io(profiles_path.clone(), e))?;

    Ok(EvaluateSummary {
        out,
        report_path,
        profiles_path,
        rows: rows.len(),
        realizations: e.realizations,
        test_samples: tests.len(),
        warnings,
    })
}
