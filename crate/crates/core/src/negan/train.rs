//! Alternating adversarial training: per batch the level index cycles
//! round-robin, the level's discriminator takes one Adam step against fresh
//! fakes, then the generator takes one step on that level's loss plus the
//! zero-factor reconstruction term. All shuffling and cropping comes from
//! seed-keyed streams, so runs are bit-reproducible and resumable.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

use crate::container::{self, Entry};
use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::nn::{lr_schedule, Adam, Graph, ModelParams, Scalar, Tensor};
use crate::rng;

use super::loss::{self, LossWeights};
use super::model::{self, ArchConfig, NeganModel, Window};

const EPOCH_TAG: u64 = 0x747261696e; // per-epoch shuffle/crop streams

/// One co-registered training record: clean image, reference noise image,
/// and the real low-dose target at dose level `level`.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub x0: Image2D,
    pub n0: Image2D,
    pub level: usize,
    pub k: f64,
    pub target: Image2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCfg {
    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// epochs at the base rate, then a linear decay to zero over `lr_decay`
    pub lr_flat: usize,
    pub lr_decay: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            epochs: 400,
            batch: 8,
            patch: 128,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lr_flat: 200,
            lr_decay: 200,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    /// unweighted mean|x0 - G(x0, k n0)|
    pub fid: f64,
    /// unweighted mean|x0 - G(x0, 0)|
    pub rec: f64,
}

pub struct Trainer<S: Scalar> {
    pub model: NeganModel<S>,
    adam_g: Adam<S>,
    adam_d: Vec<Adam<S>>,
    pub log: Vec<EpochStats>,
}

fn validate_dataset<S: Scalar>(
    model: &NeganModel<S>,
    samples: &[TrainingSample],
    cfg: &TrainCfg,
) -> Result<Vec<Vec<usize>>> {
    if samples.is_empty() {
        return Err(Error::Train("no training samples".into()));
    }
    if cfg.batch == 0 || cfg.patch < 4 || cfg.patch % 4 != 0 {
        return Err(Error::Train(format!(
            "need batch >= 1 and a patch size divisible by 4, got batch {} patch {}",
            cfg.batch, cfg.patch
        )));
    }
    let s = model.s_levels();
    let mut by_level = vec![Vec::new(); s];
    for (i, smp) in samples.iter().enumerate() {
        if smp.level >= s {
            return Err(Error::Train(format!(
                "sample {i} uses level {} but the model has {s} discriminators",
                smp.level
            )));
        }
        if (smp.k - model.k_train[smp.level]).abs() > 1e-12 {
            return Err(Error::Train(format!(
                "sample {i} carries k = {} but level {} trains k = {}",
                smp.k, smp.level, model.k_train[smp.level]
            )));
        }
        if !smp.x0.same_shape(&smp.n0) || !smp.x0.same_shape(&smp.target) {
            return Err(Error::Train(format!("sample {i} images are not co-registered")));
        }
        if smp.x0.height() < cfg.patch || smp.x0.width() < cfg.patch {
            return Err(Error::Train(format!(
                "sample {i} is {}x{}, smaller than the {} patch",
                smp.x0.height(),
                smp.x0.width(),
                cfg.patch
            )));
        }
        by_level[smp.level].push(i);
    }
    if let Some(j) = by_level.iter().position(|v| v.is_empty()) {
        return Err(Error::Train(format!(
            "dose level {j} has no training samples but the model has a discriminator for it"
        )));
    }
    Ok(by_level)
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: NeganModel<S>, cfg: &TrainCfg) -> Self {
        let adam_d = (0..model.s_levels())
            .map(|_| Adam::new(cfg.beta1, cfg.beta2, cfg.eps))
            .collect();
        Trainer {
            adam_g: Adam::new(cfg.beta1, cfg.beta2, cfg.eps),
            adam_d,
            model,
            log: Vec::new(),
        }
    }

    /// Train from the model's current epoch up to cfg.epochs, appending one
    /// log row per epoch.
    pub fn run(&mut self, samples: &[TrainingSample], cfg: &TrainCfg) -> Result<()> {
        let by_level = validate_dataset(&self.model, samples, cfg)?;
        let s = self.model.s_levels();
        let steps_per_level = by_level
            .iter()
            .map(|q| q.len().div_ceil(cfg.batch))
            .max()
            .unwrap();

        for epoch in self.model.epoch..cfg.epochs {
            let lr = lr_schedule(cfg.lr, cfg.lr_flat, cfg.lr_decay, epoch);
            let mut erng = rng::stream(cfg.seed, EPOCH_TAG, epoch as u64, 0);
            let mut queues: Vec<Vec<usize>> = by_level.clone();
            for q in &mut queues {
                q.shuffle(&mut erng);
            }
            let mut cursors = vec![0usize; s];
            let (mut d_sum, mut g_sum, mut fid_sum, mut rec_sum) = (0.0, 0.0, 0.0, 0.0);
            let total_steps = steps_per_level * s;
            for step in 0..total_steps {
                let j = step % s;
                let queue = &queues[j];
                let mut x0s = Vec::with_capacity(cfg.batch);
                let mut n0s = Vec::with_capacity(cfg.batch);
                let mut targets = Vec::with_capacity(cfg.batch);
                for b in 0..cfg.batch {
                    let smp = &samples[queue[(cursors[j] + b) % queue.len()]];
                    let r0 = erng.random_range(0..=smp.x0.height() - cfg.patch);
                    let c0 = erng.random_range(0..=smp.x0.width() - cfg.patch);
                    x0s.push(smp.x0.crop(r0, c0, cfg.patch).unwrap());
                    n0s.push(smp.n0.crop(r0, c0, cfg.patch).unwrap());
                    targets.push(smp.target.crop(r0, c0, cfg.patch).unwrap());
                }
                cursors[j] += cfg.batch;
                let k = self.model.k_train[j];
                let window = self.model.window;
                let pairs: Vec<(&Image2D, &Image2D)> = x0s.iter().zip(&n0s).collect();
                let target_refs: Vec<&Image2D> = targets.iter().collect();
                let x0_refs: Vec<&Image2D> = x0s.iter().collect();

                // discriminator step: fakes are generated once and fed in as
                // constants so only D's parameters receive gradients
                let fake_t: Tensor<S> = {
                    let mut g = Graph::new();
                    let input = g.input(model::gan_input_batch(&window, &pairs, k));
                    let y = model::generator_forward(&mut g, &self.model.gen, &self.model.arch, input);
                    g.value(y).clone()
                };
                {
                    let mut g = Graph::new();
                    let real = g.input(model::image_batch(&window, &target_refs));
                    let fake = g.input(fake_t);
                    let d_loss = loss::discriminator_loss(&mut g, &self.model, j, real, fake)?;
                    g.backward(d_loss);
                    let grads = g.named_grads();
                    self.adam_d[j].step(&mut self.model.discs[j], &grads, lr);
                    d_sum += g.value_scalar(d_loss);
                }

                // generator step: fidelity on level j plus the k = 0
                // reconstruction pin; discriminator gradients are discarded
                {
                    let mut g = Graph::new();
                    let in_k = g.input(model::gan_input_batch(&window, &pairs, k));
                    let in_0 = g.input(model::gan_input_batch(&window, &pairs, 0.0));
                    let x0v = g.input(model::image_batch(&window, &x0_refs));
                    let terms =
                        loss::generator_loss_terms(&mut g, &self.model, j, in_k, in_0, x0v, &cfg.weights)?;
                    g.backward(terms.total);
                    let grads: Vec<_> = g
                        .named_grads()
                        .into_iter()
                        .filter(|(n, _)| n.starts_with("g."))
                        .collect();
                    self.adam_g.step(&mut self.model.gen, &grads, lr);
                    g_sum += g.value_scalar(terms.total);
                    fid_sum += g.value_scalar(terms.fid);
                    rec_sum += g.value_scalar(terms.rec);
                }
            }
            let n = total_steps as f64;
            self.model.epoch = epoch + 1;
            self.log.push(EpochStats {
                epoch,
                lr,
                d_loss: d_sum / n,
                g_loss: g_sum / n,
                fid: fid_sum / n,
                rec: rec_sum / n,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.model;
        let mut entries = vec![
            Entry::scalar("meta.version", 1.0),
            Entry::scalar("meta.s", m.s_levels() as f64),
            Entry::f64("meta.k", vec![m.k_train.len() as u64], m.k_train.clone()),
            Entry::f64("meta.window", vec![2], vec![m.window.center, m.window.width]),
            Entry::f64(
                "meta.arch",
                vec![4],
                vec![
                    m.arch.base_width as f64,
                    m.arch.res_blocks as f64,
                    m.arch.disc_layers as f64,
                    m.arch.disc_width as f64,
                ],
            ),
            Entry::scalar("meta.epoch", m.epoch as f64),
        ];
        entries.extend(m.gen.to_entries("gen."));
        for (j, d) in m.discs.iter().enumerate() {
            entries.extend(d.to_entries(&format!("disc{j}.")));
        }
        entries.extend(adam_entries("adam_g", &self.adam_g));
        for (j, a) in self.adam_d.iter().enumerate() {
            entries.extend(adam_entries(&format!("adam_d{j}"), a));
        }
        container::write(path, &entries)
    }

    /// Rebuild a trainer (model plus optimizer state) from a checkpoint.
    pub fn load(path: &Path, cfg: &TrainCfg) -> Result<Trainer<S>> {
        let entries = container::read(path)?;
        let model = model_from_entries::<S>(&entries)?;
        let mut trainer = Trainer::new(model, cfg);
        restore_adam(&mut trainer.adam_g, "adam_g", &entries)?;
        for j in 0..trainer.model.s_levels() {
            let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
            restore_adam(&mut adam, &format!("adam_d{j}"), &entries)?;
            trainer.adam_d[j] = adam;
        }
        Ok(trainer)
    }
}

fn adam_entries<S: Scalar>(prefix: &str, adam: &Adam<S>) -> Vec<Entry> {
    let (m, v, t) = adam.state();
    let mut entries = vec![Entry::scalar(format!("meta.{prefix}.t"), t as f64)];
    for (name, tensor) in m {
        entries.push(Entry::f64(
            format!("{prefix}.m.{name}"),
            tensor.shape().iter().map(|&d| d as u64).collect(),
            tensor.to_f64().data().to_vec(),
        ));
    }
    for (name, tensor) in v {
        entries.push(Entry::f64(
            format!("{prefix}.v.{name}"),
            tensor.shape().iter().map(|&d| d as u64).collect(),
            tensor.to_f64().data().to_vec(),
        ));
    }
    entries
}

fn restore_adam<S: Scalar>(adam: &mut Adam<S>, prefix: &str, entries: &[Entry]) -> Result<()> {
    let t = meta_scalar(entries, &format!("meta.{prefix}.t"))? as u64;
    if t == 0 {
        return Ok(());
    }
    let m = moment_map::<S>(&format!("{prefix}.m."), entries)?;
    let v = moment_map::<S>(&format!("{prefix}.v."), entries)?;
    adam.restore(m, v, t);
    Ok(())
}

fn moment_map<S: Scalar>(prefix: &str, entries: &[Entry]) -> Result<IndexMap<String, Tensor<S>>> {
    let params = ModelParams::<S>::from_entries(prefix, entries)?;
    Ok(params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect())
}

pub(crate) fn meta_scalar(entries: &[Entry], name: &str) -> Result<f64> {
    let e = entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing '{name}'")))?;
    let v = e.payload.to_f64();
    if v.len() != 1 {
        return Err(Error::Format(format!("'{name}' is not a scalar")));
    }
    Ok(v[0])
}

pub(crate) fn meta_vec(entries: &[Entry], name: &str) -> Result<Vec<f64>> {
    let e = entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing '{name}'")))?;
    Ok(e.payload.to_f64())
}

fn model_from_entries<S: Scalar>(entries: &[Entry]) -> Result<NeganModel<S>> {
    let version = meta_scalar(entries, "meta.version")?;
    if version != 1.0 {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let s = meta_scalar(entries, "meta.s")? as usize;
    let k_train = meta_vec(entries, "meta.k")?;
    if k_train.len() != s || s == 0 {
        return Err(Error::Format(format!(
            "checkpoint declares {s} levels but carries {} factors",
            k_train.len()
        )));
    }
    let win = meta_vec(entries, "meta.window")?;
    if win.len() != 2 {
        return Err(Error::Format("checkpoint window needs [center, width]".into()));
    }
    let arch_v = meta_vec(entries, "meta.arch")?;
    if arch_v.len() != 4 {
        return Err(Error::Format("checkpoint arch needs 4 fields".into()));
    }
    let arch = ArchConfig {
        base_width: arch_v[0] as usize,
        res_blocks: arch_v[1] as usize,
        disc_layers: arch_v[2] as usize,
        disc_width: arch_v[3] as usize,
    };
    let gen = ModelParams::from_entries("gen.", entries)?;
    let mut discs = Vec::with_capacity(s);
    for j in 0..s {
        discs.push(ModelParams::from_entries(&format!("disc{j}."), entries)?);
    }
    Ok(NeganModel {
        arch,
        window: Window::new(win[0], win[1])?,
        k_train,
        gen,
        discs,
        epoch: meta_scalar(entries, "meta.epoch")? as usize,
    })
}

/// Load just the model for inference.
pub fn load_model<S: Scalar>(path: &Path) -> Result<NeganModel<S>> {
    model_from_entries(&container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::negan::loss::AdvMode;
    use tempfile::tempdir;

    fn pattern_image(n: usize, seed: u64, scale: f64, offset: f64) -> Image2D {
        let mut img = Image2D::zeros(n, n, 0.1);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            let t = ((i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 17;
            *v = offset + scale * (t as f64 / 16.0 - 0.5);
        }
        img
    }

    fn tiny_dataset(k_train: &[f64]) -> Vec<TrainingSample> {
        let mut out = Vec::new();
        for p in 0..4u64 {
            let x0 = pattern_image(8, p, 0.1, 0.2);
            let n0 = pattern_image(8, 40 + p, 0.04, 0.0);
            for (j, &k) in k_train.iter().enumerate() {
                let target = x0.add(&n0.scale(k)).unwrap();
                out.push(TrainingSample {
                    x0: x0.clone(),
                    n0: n0.clone(),
                    level: j,
                    k,
                    target,
                });
            }
        }
        out
    }

    fn tiny_model(k: Vec<f64>) -> NeganModel<f32> {
        NeganModel::new(
            ArchConfig {
                base_width: 2,
                res_blocks: 1,
                disc_layers: 2,
                disc_width: 2,
            },
            Window::new(0.2, 0.8).unwrap(),
            k,
            11,
        )
        .unwrap()
    }

    fn tiny_cfg(epochs: usize) -> TrainCfg {
        TrainCfg {
            epochs,
            batch: 2,
            patch: 8,
            lr: 1e-3,
            lr_flat: epochs,
            lr_decay: 0,
            seed: 5,
            ..TrainCfg::default()
        }
    }

    #[test]
    fn paper_scale_defaults_are_echoed() {
        let cfg = TrainCfg::default();
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!((cfg.beta1, cfg.beta2), (0.5, 0.999));
        assert_eq!(cfg.batch, 8);
        assert_eq!(cfg.patch, 128);
        assert_eq!((cfg.lr_flat, cfg.lr_decay), (200, 200));
        assert_eq!(cfg.epochs, 400);
        assert_eq!(cfg.weights.lambda_fid, 10.0);
        assert_eq!(cfg.weights.lambda_rec, 10.0);
        assert_eq!(cfg.weights.adv, AdvMode::NonSaturating);
    }

    #[test]
    fn rejects_mismatched_datasets() {
        let cfg = tiny_cfg(1);
        let model = tiny_model(vec![1.5, 3.0]);
        // level out of range
        let mut bad = tiny_dataset(&[1.5, 3.0]);
        bad[0].level = 2;
        let err = Trainer::new(model.clone(), &cfg).run(&bad, &cfg).unwrap_err();
        assert_eq!(err.category(), "train");
        // k disagrees with the declared grid
        let mut bad = tiny_dataset(&[1.5, 3.0]);
        bad[1].k = 9.0;
        let err = Trainer::new(model.clone(), &cfg).run(&bad, &cfg).unwrap_err();
        assert_eq!(err.category(), "train");
        // a level with no samples
        let only_first: Vec<_> = tiny_dataset(&[1.5, 3.0])
            .into_iter()
            .filter(|s| s.level == 0)
            .collect();
        let err = Trainer::new(model.clone(), &cfg)
            .run(&only_first, &cfg)
            .unwrap_err();
        assert_eq!(err.category(), "train");
        // empty dataset
        let err = Trainer::new(model, &cfg).run(&[], &cfg).unwrap_err();
        assert_eq!(err.category(), "train");
    }

    #[test]
    fn training_makes_progress_and_logs_every_epoch() {
        let cfg = tiny_cfg(6);
        let mut trainer = Trainer::new(tiny_model(vec![1.5, 3.0]), &cfg);
        trainer.run(&tiny_dataset(&[1.5, 3.0]), &cfg).unwrap();
        assert_eq!(trainer.log.len(), 6);
        for (e, row) in trainer.log.iter().enumerate() {
            assert_eq!(row.epoch, e);
            assert!(row.d_loss.is_finite() && row.g_loss.is_finite());
        }
        let first = trainer.log.first().unwrap();
        let last = trainer.log.last().unwrap();
        assert!(
            last.fid < first.fid,
            "fidelity did not improve: {} -> {}",
            first.fid,
            last.fid
        );
    }

    #[test]
    fn fixed_seed_reproduces_the_checkpoint_bit_for_bit() {
        let cfg = tiny_cfg(2);
        let data = tiny_dataset(&[2.0]);
        let mut a = Trainer::new(tiny_model(vec![2.0]), &cfg);
        a.run(&data, &cfg).unwrap();
        let mut b = Trainer::new(tiny_model(vec![2.0]), &cfg);
        b.run(&data, &cfg).unwrap();
        for (name, t) in a.model.gen.iter() {
            assert_eq!(t.data(), b.model.gen.get(name).data(), "{name}");
        }
        for (da, db) in a.model.discs.iter().zip(&b.model.discs) {
            for (name, t) in da.iter() {
                assert_eq!(t.data(), db.get(name).data(), "{name}");
            }
        }
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn resume_from_checkpoint_matches_an_uninterrupted_run() {
        let data = tiny_dataset(&[1.5, 3.0]);
        let dir = tempdir().unwrap();
        let ckpt = dir.path().join("mid.ldct");

        let full_cfg = tiny_cfg(4);
        let mut full = Trainer::new(tiny_model(vec![1.5, 3.0]), &full_cfg);
        full.run(&data, &full_cfg).unwrap();

        let half_cfg = tiny_cfg(2);
        let mut half = Trainer::new(tiny_model(vec![1.5, 3.0]), &half_cfg);
        half.run(&data, &half_cfg).unwrap();
        half.save(&ckpt).unwrap();

        let mut resumed = Trainer::<f32>::load(&ckpt, &full_cfg).unwrap();
        assert_eq!(resumed.model.epoch, 2);
        resumed.run(&data, &full_cfg).unwrap();

        for (name, t) in full.model.gen.iter() {
            assert_eq!(t.data(), resumed.model.gen.get(name).data(), "{name}");
        }
        for (da, db) in full.model.discs.iter().zip(&resumed.model.discs) {
            for (name, t) in da.iter() {
                assert_eq!(t.data(), db.get(name).data(), "{name}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_model_metadata() {
        let cfg = tiny_cfg(1);
        let mut t = Trainer::new(tiny_model(vec![1.3, 1.8, 3.0]), &cfg);
        t.run(&tiny_dataset(&[1.3, 1.8, 3.0]), &cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ldct");
        t.save(&path).unwrap();
        let m = load_model::<f32>(&path).unwrap();
        assert_eq!(m.k_train, vec![1.3, 1.8, 3.0]);
        assert_eq!(m.window, t.model.window);
        assert_eq!(m.arch, t.model.arch);
        assert_eq!(m.epoch, 1);
        assert_eq!(m.s_levels(), 3);
        for (name, tensor) in t.model.gen.iter() {
            assert_eq!(tensor.data(), m.gen.get(name).data(), "{name}");
        }
    }
}
