//! Run configuration: one TOML file with a `seed` plus optional per-command
//! sections. Every knob has a documented default; unknown keys are rejected
//! so typos fail loudly instead of silently running defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::negan::{AdvMode, ArchConfig, LossWeights};
use crate::pipeline::manifest::{GeometrySpec, WindowSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// master seed; may instead come from the CLI flag, but one of the two
    /// must be present
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub simulate: SimulateCfg,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub generate: GenerateCfg,
    #[serde(default)]
    pub evaluate: EvaluateCfg,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulate.validate()?;
        self.train.validate()?;
        self.generate.validate()?;
        self.evaluate.validate()
    }

    /// Seed precedence: explicit CLI flag, then the config file.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        flag.or(self.seed).ok_or_else(|| {
            Error::Config("no seed given; set `seed` in the config or pass --seed".into())
        })
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            simulate: SimulateCfg::default(),
            train: TrainSection::default(),
            generate: GenerateCfg::default(),
            evaluate: EvaluateCfg::default(),
        }
    }
}

/// `[simulate]` — dataset synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateCfg {
    /// output directory (default "data")
    pub out: String,
    /// training phantoms (default 64)
    pub phantoms: usize,
    /// extra held-out phantoms (default 4)
    pub test_count: usize,
    /// "random" (seeded ellipse collages, default) or "shepp"
    pub kind: String,
    /// tube currents, reference first, strictly decreasing (default 90/70/50/30)
    pub doses_ma: Vec<f64>,
    /// photons per mA; the desk-scale default keeps noise clearly visible
    /// on 64x64 grids (default 10)
    pub alpha: f64,
    /// electronic noise std in photon counts (default 0)
    pub sigma_e: f64,
    /// round noise factors to one decimal like protocol tables (default true)
    pub round_factors: bool,
    pub geometry: GeometrySpec,
    pub window: WindowSpec,
}

impl Default for SimulateCfg {
    fn default() -> Self {
        SimulateCfg {
            out: "data".into(),
            phantoms: 64,
            test_count: 4,
            kind: "random".into(),
            doses_ma: vec![90.0, 70.0, 50.0, 30.0],
            alpha: 10.0,
            sigma_e: 0.0,
            round_factors: true,
            geometry: GeometrySpec {
                n_views: 180,
                n_bins: 96,
                det_spacing: 0.032,
                n: 64,
                pixel_spacing: 2.0 / 64.0,
                filter: "hann".into(),
            },
            window: WindowSpec {
                center: 0.1,
                width: 0.5,
            },
        }
    }
}

impl SimulateCfg {
    pub fn validate(&self) -> Result<()> {
        if self.phantoms == 0 {
            return Err(Error::Config("simulate.phantoms must be at least 1".into()));
        }
        match self.kind.as_str() {
            "random" | "shepp" => {}
            other => {
                return Err(Error::Config(format!(
                    "simulate.kind {other:?} is not \"random\" or \"shepp\""
                )))
            }
        }
        if self.doses_ma.is_empty() {
            return Err(Error::Config("simulate.doses_ma is empty".into()));
        }
        if !(self.alpha > 0.0) || !(self.sigma_e >= 0.0) {
            return Err(Error::Config(format!(
                "simulate needs alpha > 0 and sigma_e >= 0, got {} and {}",
                self.alpha, self.sigma_e
            )));
        }
        self.geometry
            .to_geometry()
            .map_err(|e| Error::Config(format!("simulate.geometry: {e}")))?;
        self.window
            .to_window()
            .map_err(|e| Error::Config(format!("simulate.window: {e}")))?;
        Ok(())
    }
}

/// `[train]` — NE-GAN fitting, plus denoiser-scheme knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// output directory (default "run")
    pub out: String,
    /// "simulation" (use the dataset's stored x0/n0 pair, default) or
    /// "denoiser" (fit a denoiser, subtract its estimate)
    pub scheme: String,
    /// epochs (default 40)
    pub epochs: usize,
    /// minibatch size (default 4)
    pub batch: usize,
    /// square crop side; match the image side to keep train-time and
    /// inference-time instance-norm statistics aligned (default 64)
    pub patch: usize,
    /// Adam step size (default 2e-4)
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// epochs at full lr before the linear decay (default 20)
    pub lr_flat: usize,
    /// epochs the decay takes to reach zero (default 20)
    pub lr_decay: usize,
    /// fidelity weight on |x0 - G(x0, k n0)| (default 10)
    pub lambda_fid: f64,
    /// reconstruction weight on |x0 - G(x0, 0)| (default 10)
    pub lambda_rec: f64,
    /// "non-saturating" (default) or "minimax"
    pub adv: String,
    /// generator stem width (default 8)
    pub base_width: usize,
    /// residual blocks (default 2)
    pub res_blocks: usize,
    /// discriminator stride-2 depth (default 3)
    pub disc_layers: usize,
    /// discriminator stem width; wider than the generator because judging
    /// noise texture takes a larger filter bank than synthesizing it (default 24)
    pub disc_width: usize,
    /// denoiser scheme: epochs for the denoiser pre-fit (default 24)
    pub denoiser_epochs: usize,
    pub denoiser_batch: usize,
    pub denoiser_patch: usize,
    pub denoiser_lr: f64,
    pub denoiser_lr_flat: usize,
    pub denoiser_lr_decay: usize,
    /// dose the denoiser maps high-dose scans toward; defaults to the
    /// lowest current in the manifest
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoiser_target_ma: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            out: "run".into(),
            scheme: "simulation".into(),
            epochs: 40,
            batch: 4,
            patch: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lr_flat: 20,
            lr_decay: 20,
            lambda_fid: 10.0,
            lambda_rec: 10.0,
            adv: "non-saturating".into(),
            base_width: 8,
            res_blocks: 2,
            disc_layers: 3,
            disc_width: 24,
            denoiser_epochs: 24,
            denoiser_batch: 4,
            denoiser_patch: 64,
            denoiser_lr: 1e-3,
            denoiser_lr_flat: 10,
            denoiser_lr_decay: 14,
            denoiser_target_ma: None,
        }
    }
}

impl TrainSection {
    pub fn validate(&self) -> Result<()> {
        match self.scheme.as_str() {
            "simulation" | "denoiser" => {}
            other => {
                return Err(Error::Config(format!(
                    "train.scheme {other:?} is not \"simulation\" or \"denoiser\""
                )))
            }
        }
        self.adv_mode()?;
        if self.base_width == 0 || self.disc_layers == 0 || self.disc_width == 0 {
            return Err(Error::Config(
                "train.base_width, train.disc_layers, and train.disc_width must be at least 1"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn adv_mode(&self) -> Result<AdvMode> {
        match self.adv.as_str() {
            "non-saturating" => Ok(AdvMode::NonSaturating),
            "minimax" => Ok(AdvMode::Minimax),
            other => Err(Error::Config(format!(
                "train.adv {other:?} is not \"non-saturating\" or \"minimax\""
            ))),
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            base_width: self.base_width,
            res_blocks: self.res_blocks,
            disc_layers: self.disc_layers,
            disc_width: self.disc_width,
        }
    }

    pub fn weights(&self) -> Result<LossWeights> {
        Ok(LossWeights {
            lambda_fid: self.lambda_fid,
            lambda_rec: self.lambda_rec,
            adv: self.adv_mode()?,
        })
    }

    pub fn train_cfg(&self, seed: u64) -> Result<crate::negan::TrainCfg> {
        Ok(crate::negan::TrainCfg {
            epochs: self.epochs,
            batch: self.batch,
            patch: self.patch,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            lr_flat: self.lr_flat,
            lr_decay: self.lr_decay,
            weights: self.weights()?,
            seed,
        })
    }

    pub fn denoiser_cfg(&self, seed: u64) -> crate::decompose::DenoiserCfg {
        crate::decompose::DenoiserCfg {
            epochs: self.denoiser_epochs,
            batch: self.denoiser_batch,
            patch: self.denoiser_patch,
            lr: self.denoiser_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            lr_flat: self.denoiser_lr_flat,
            lr_decay: self.denoiser_lr_decay,
            seed,
        }
    }
}

/// `[generate]` — synthesis from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateCfg {
    /// output directory (default "generated")
    pub out: String,
    /// noise factors to synthesize; omitted means the checkpoint's trained
    /// grid (default omitted)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
}

impl Default for GenerateCfg {
    fn default() -> Self {
        GenerateCfg {
            out: "generated".into(),
            k: None,
        }
    }
}

impl GenerateCfg {
    pub fn validate(&self) -> Result<()> {
        if let Some(ks) = &self.k {
            if ks.iter().any(|&k| !(k >= 0.0)) {
                return Err(Error::Config(format!(
                    "generate.k values must be finite and >= 0: {ks:?}"
                )));
            }
        }
        Ok(())
    }
}

/// `[evaluate]` — noise index and NPS comparison on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateCfg {
    /// output directory (default "report")
    pub out: String,
    /// noise realizations per level (default 50)
    pub realizations: usize,
    /// NPS patch side (default 64)
    pub nps_patch: usize,
    /// central ROI radius as a fraction of the half-image (default 0.5)
    pub roi: f64,
    /// noise factors to synthesize and compare; omitted means the trained
    /// grid plus the reference level, and an explicitly empty list restricts
    /// the report to reference-simulator metrics (default omitted)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<f64>>,
}

impl Default for EvaluateCfg {
    fn default() -> Self {
        EvaluateCfg {
            out: "report".into(),
            realizations: 50,
            nps_patch: 64,
            roi: 0.5,
            k: None,
        }
    }
}

impl EvaluateCfg {
    pub fn validate(&self) -> Result<()> {
        if self.realizations < 2 {
            return Err(Error::Config(format!(
                "evaluate.realizations must be at least 2, got {}",
                self.realizations
            )));
        }
        if self.nps_patch < 2 {
            return Err(Error::Config(format!(
                "evaluate.nps_patch must be at least 2, got {}",
                self.nps_patch
            )));
        }
        if !(self.roi > 0.0 && self.roi <= 1.0) {
            return Err(Error::Config(format!(
                "evaluate.roi must lie in (0, 1], got {}",
                self.roi
            )));
        }
        if let Some(ks) = &self.k {
            if ks.iter().any(|&k| !(k >= 0.0)) {
                return Err(Error::Config(format!(
                    "evaluate.k values must be finite and >= 0: {ks:?}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_the_documented_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.simulate.phantoms, 64);
        assert_eq!(cfg.simulate.doses_ma, vec![90.0, 70.0, 50.0, 30.0]);
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!(cfg.train.lambda_fid, 10.0);
        assert_eq!(cfg.evaluate.realizations, 50);
        assert!(cfg.generate.k.is_none());
    }

    #[test]
    fn sections_merge_over_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 11\n[train]\nepochs = 3\nbase_width = 4\n[evaluate]\nroi = 0.4\n",
        )
        .unwrap();
        assert_eq!(cfg.resolve_seed(None).unwrap(), 11);
        assert_eq!(cfg.resolve_seed(Some(5)).unwrap(), 5);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.arch().base_width, 4);
        assert_eq!(cfg.train.batch, 4); // untouched default
        assert_eq!(cfg.evaluate.roi, 0.4);
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.resolve_seed(None).unwrap_err().category(), "config");
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for text in [
            "typo = 1\n",
            "[simulate]\nphantom_count = 3\n",
            "[train]\nlearning_rate = 0.1\n",
            "[generate]\nks = [1.0]\n",
            "[evaluate]\npatches = 2\n",
        ] {
            assert_eq!(
                RunConfig::from_toml(text).unwrap_err().category(),
                "config",
                "accepted {text:?}"
            );
        }
    }

    #[test]
    fn bad_values_are_rejected_with_config_errors() {
        for text in [
            "[simulate]\nphantoms = 0\n",
            "[simulate]\nkind = \"cube\"\n",
            "[simulate]\nalpha = -1.0\n",
            "[train]\nscheme = \"magic\"\n",
            "[train]\nadv = \"wasserstein\"\n",
            "[generate]\nk = [-1.0]\n",
            "[evaluate]\nrealizations = 1\n",
            "[evaluate]\nroi = 1.5\n",
        ] {
            assert_eq!(
                RunConfig::from_toml(text).unwrap_err().category(),
                "config",
                "accepted {text:?}"
            );
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(3);
        cfg.train.denoiser_target_ma = Some(50.0);
        cfg.generate.k = Some(vec![0.0, 1.3, 2.4]);
        cfg.evaluate.k = Some(vec![]);
        let text = toml::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
