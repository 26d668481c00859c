//! Dataset manifest: the TOML file written next to a simulated multi-dose
//! set that says what was scanned, at which doses, and where every image
//! lives. Paths are relative to the manifest's own directory so a dataset
//! can be moved wholesale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ct::{FilterKind, ScanGeometry};
use crate::error::{Error, Result};
use crate::negan::{set_noise_factors, DoseLevels, Window};

pub const MANIFEST_VERSION: u32 = 1;

/// Mirror of [`ScanGeometry`] with the filter as a string, so the manifest
/// stays readable in a text editor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub n_views: usize,
    pub n_bins: usize,
    pub det_spacing: f64,
    pub n: usize,
    pub pixel_spacing: f64,
    /// "ramlak" or "hann"
    pub filter: String,
}

impl GeometrySpec {
    pub fn from_geometry(g: &ScanGeometry) -> Self {
        GeometrySpec {
            n_views: g.n_views,
            n_bins: g.n_bins,
            det_spacing: g.det_spacing,
            n: g.n,
            pixel_spacing: g.pixel_spacing,
            filter: match g.filter {
                FilterKind::RamLak => "ramlak".into(),
                FilterKind::HannApodized => "hann".into(),
            },
        }
    }

    pub fn to_geometry(&self) -> Result<ScanGeometry> {
        let filter = match self.filter.as_str() {
            "ramlak" => FilterKind::RamLak,
            "hann" => FilterKind::HannApodized,
            other => {
                return Err(Error::Manifest(format!(
                    "unknown filter {other:?}, expected \"ramlak\" or \"hann\""
                )))
            }
        };
        ScanGeometry::new(
            self.n_views,
            self.n_bins,
            self.det_spacing,
            self.n,
            self.pixel_spacing,
            filter,
        )
        .map_err(|e| Error::Manifest(format!("bad geometry: {e}")))
    }
}

/// Display window the networks were (or will be) normalized with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub center: f64,
    pub width: f64,
}

impl WindowSpec {
    pub fn from_window(w: &Window) -> Self {
        WindowSpec {
            center: w.center,
            width: w.width,
        }
    }

    pub fn to_window(&self) -> Result<Window> {
        Window::new(self.center, self.width).map_err(|e| Error::Manifest(format!("bad window: {e}")))
    }
}

/// One dose level. The first level in a manifest is the reference (highest
/// current, k = 1); the rest carry the noise factor that maps reference
/// noise onto them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    /// tube current (mA)
    pub ma: f64,
    pub k: f64,
}

/// One scanned phantom and the images written for it. `ldct` holds the
/// lower-dose reconstructions in level order (levels\[1..\]); `x0`/`n0` are
/// the clean/noise decomposition images when the dataset carries them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub id: String,
    pub phantom_seed: u64,
    /// "train" or "test"
    pub split: String,
    pub clean: String,
    pub hdct: String,
    pub ldct: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// "shepp" or "random"
    pub phantom_kind: String,
    /// master seed the dataset was simulated from
    pub seed: u64,
    /// photons per mA unit in the noise model
    pub alpha: f64,
    /// electronic noise level in the noise model
    pub sigma_e: f64,
    /// whether noise factors were rounded to one decimal
    pub round_factors: bool,
    pub geometry: GeometrySpec,
    pub window: WindowSpec,
    pub levels: Vec<LevelSpec>,
    pub samples: Vec<SampleSpec>,
}

impl Manifest {
    /// Internal consistency: version, known kinds, constructible geometry
    /// and window, a strictly dose-descending level grid whose factors match
    /// the tube currents, unique sample ids, and co-sized path lists.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {}, expected {MANIFEST_VERSION}",
                self.version
            )));
        }
        match self.phantom_kind.as_str() {
            "shepp" | "random" => {}
            other => {
                return Err(Error::Manifest(format!(
                    "unknown phantom kind {other:?}, expected \"shepp\" or \"random\""
                )))
            }
        }
        if !(self.alpha > 0.0) || !(self.sigma_e >= 0.0) {
            return Err(Error::Manifest(format!(
                "noise model needs alpha > 0 and sigma_e >= 0, got {} and {}",
                self.alpha, self.sigma_e
            )));
        }
        self.geometry.to_geometry()?;
        self.window.to_window()?;
        if self.levels.is_empty() {
            return Err(Error::Manifest("manifest has no dose levels".into()));
        }
        if self.levels[0].k != 1.0 {
            return Err(Error::Manifest(format!(
                "reference level must have k = 1, got {}",
                self.levels[0].k
            )));
        }
        let mas: Vec<f64> = self.levels.iter().map(|l| l.ma).collect();
        let expect = set_noise_factors(&DoseLevels::TubeCurrents(mas), self.round_factors)
            .map_err(|e| Error::Manifest(format!("bad dose grid: {e}")))?;
        for (level, want) in self.levels[1..].iter().zip(&expect) {
            if level.k != *want {
                return Err(Error::Manifest(format!(
                    "level at {} mA carries k = {}, but the current grid implies {}",
                    level.ma, level.k, want
                )));
            }
        }
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Manifest("duplicate sample ids".into()));
        }
        for s in &self.samples {
            match s.split.as_str() {
                "train" | "test" => {}
                other => {
                    return Err(Error::Manifest(format!(
                        "sample {} has unknown split {other:?}",
                        s.id
                    )))
                }
            }
            if s.ldct.len() != self.levels.len() - 1 {
                return Err(Error::Manifest(format!(
                    "sample {} lists {} low-dose images for {} lower levels",
                    s.id,
                    s.ldct.len(),
                    self.levels.len() - 1
                )));
            }
            if s.x0.is_some() != s.n0.is_some() {
                return Err(Error::Manifest(format!(
                    "sample {} has only one of x0/n0; the decomposition comes in pairs",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// Every referenced image exists on disk under `base` (the manifest's
    /// directory).
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        let check = |rel: &str| -> Result<()> {
            let p = base.join(rel);
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::Manifest(format!("missing image file {}", p.display())))
            }
        };
        for s in &self.samples {
            check(&s.clean)?;
            check(&s.hdct)?;
            for rel in &s.ldct {
                check(rel)?;
            }
            if let Some(rel) = &s.x0 {
                check(rel)?;
            }
            if let Some(rel) = &s.n0 {
                check(rel)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Manifest(format!("serialize failed: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest =
            toml::from_str(text).map_err(|e| Error::Manifest(format!("parse failed: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    /// Load and validate; returns the manifest and its directory, which
    /// anchors all relative paths inside it.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        let m = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((m, base))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest() -> Manifest {
        let geom = ScanGeometry::new(120, 190, 0.125, 128, 0.125, FilterKind::HannApodized).unwrap();
        Manifest {
            version: MANIFEST_VERSION,
            phantom_kind: "random".into(),
            seed: 7,
            alpha: 1000.0,
            sigma_e: 0.0,
            round_factors: true,
            geometry: GeometrySpec::from_geometry(&geom),
            window: WindowSpec {
                center: 0.1,
                width: 0.5,
            },
            levels: vec![
                LevelSpec { ma: 90.0, k: 1.0 },
                LevelSpec { ma: 70.0, k: 1.3 },
                LevelSpec { ma: 50.0, k: 1.8 },
                LevelSpec { ma: 30.0, k: 3.0 },
            ],
            samples: (0..3)
                .map(|i| SampleSpec {
                    id: format!("s{i:03}"),
                    phantom_seed: 100 + i,
                    split: if i == 2 { "test".into() } else { "train".into() },
                    clean: format!("images/s{i:03}/clean.ldct"),
                    hdct: format!("images/s{i:03}/level0.ldct"),
                    ldct: (1..4).map(|j| format!("images/s{i:03}/level{j}.ldct")).collect(),
                    x0: Some(format!("images/s{i:03}/x0.ldct")),
                    n0: Some(format!("images/s{i:03}/n0.ldct")),
                })
                .collect(),
        }
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let m = sample_manifest();
        let text = m.to_toml().unwrap();
        let back = Manifest::from_toml(&text).unwrap();
        assert_eq!(back, m);
        // and once more through the serializer to pin byte stability
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn geometry_spec_round_trips_and_rejects_unknown_filters() {
        let geom = ScanGeometry::new(180, 96, 0.032, 64, 2.0 / 64.0, FilterKind::RamLak).unwrap();
        let spec = GeometrySpec::from_geometry(&geom);
        assert_eq!(spec.to_geometry().unwrap(), geom);
        let mut bad = spec.clone();
        bad.filter = "cosine".into();
        assert_eq!(bad.to_geometry().unwrap_err().category(), "manifest");
    }

    #[test]
    fn validation_checks_the_noise_factor_grid() {
        let mut m = sample_manifest();
        m.validate().unwrap();
        m.levels[2].k = 2.0; // 90/50 rounds to 1.8, not 2.0
        let err = m.validate().unwrap_err();
        assert_eq!(err.category(), "manifest");
        assert!(err.to_string().contains("implies 1.8"), "{err}");
    }

    #[test]
    fn validation_rejects_structural_mistakes() {
        let cases: Vec<(&str, Box<dyn Fn(&mut Manifest)>)> = vec![
            ("version", Box::new(|m| m.version = 99)),
            ("kind", Box::new(|m| m.phantom_kind = "cube".into())),
            ("alpha", Box::new(|m| m.alpha = 0.0)),
            ("reference k", Box::new(|m| m.levels[0].k = 1.1)),
            ("dose order", Box::new(|m| m.levels[1].ma = 95.0)),
            ("no levels", Box::new(|m| m.levels.clear())),
            ("duplicate id", Box::new(|m| m.samples[1].id = m.samples[0].id.clone())),
            ("split", Box::new(|m| m.samples[0].split = "val".into())),
            ("ldct count", Box::new(|m| { m.samples[0].ldct.pop(); })),
            ("lone x0", Box::new(|m| m.samples[0].n0 = None)),
        ];
        for (what, mutate) in cases {
            let mut m = sample_manifest();
            mutate(&mut m);
            let err = m.validate().unwrap_err();
            assert_eq!(err.category(), "manifest", "case {what}: {err}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = sample_manifest().to_toml().unwrap();
        text.push_str("\nextra_knob = 3\n");
        assert_eq!(Manifest::from_toml(&text).unwrap_err().category(), "manifest");
    }

    #[test]
    fn missing_files_name_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest();
        let err = m.validate_files(dir.path()).unwrap_err();
        assert!(err.to_string().contains("s000"), "{err}");
        assert_eq!(err.category(), "manifest");
    }
}
