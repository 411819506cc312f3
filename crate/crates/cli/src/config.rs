//! Pipeline configuration file (TOML).

use std::path::{Path, PathBuf};

use cfrc_core::crackpath::CrackParams;
use cfrc_core::material::MaterialParams;
use cfrc_core::microgen::LayoutConfig;
use cfrc_core::report::ReportParams;
use cfrc_surrogate::dataset::{DatasetParams, Stage};
use cfrc_surrogate::{ArchParams, RolloutParams, TrainParams};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: PathBuf,
    pub checkpoint_root: PathBuf,
    pub report_root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_root: "data".into(),
            checkpoint_root: "checkpoints".into(),
            report_root: "report".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicrogenSection {
    pub n_cases: usize,
    pub target_vf: f64,
    /// Grid side in pixels.
    pub resolution: usize,
    pub layout: LayoutConfig,
}

impl Default for MicrogenSection {
    fn default() -> Self {
        MicrogenSection {
            n_cases: 4,
            target_vf: 0.5,
            resolution: 256,
            layout: LayoutConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Cases held out for testing, taken after a seeded shuffle.
    pub n_test: usize,
    #[serde(flatten)]
    pub params: DatasetParams,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_test: 1,
            params: DatasetParams::default(),
        }
    }
}

/// Per-stage training hyperparameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub damage1: TrainParams,
    pub damage2: TrainParams,
    pub uts: TrainParams,
    pub necking: TrainParams,
}

impl TrainSection {
    pub fn get(&self, stage: Stage) -> &TrainParams {
        match stage {
            Stage::Damage1 => &self.damage1,
            Stage::Damage2 => &self.damage2,
            Stage::Uts => &self.uts,
            Stage::Necking => &self.necking,
        }
    }
}

/// Per-stage network size.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub damage1: ArchParams,
    pub damage2: ArchParams,
    pub uts: ArchParams,
    pub necking: ArchParams,
}

impl NetworkSection {
    pub fn get(&self, stage: Stage) -> &ArchParams {
        match stage {
            Stage::Damage1 => &self.damage1,
            Stage::Damage2 => &self.damage2,
            Stage::Uts => &self.uts,
            Stage::Necking => &self.necking,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub crack: CrackParams,
    pub report: ReportParams,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub microgen: MicrogenSection,
    pub material: MaterialParams,
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub rollout: RolloutParams,
    pub evaluate: EvaluateSection,
}

impl PipelineConfig {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for p in [
            &mut cfg.paths.data_root,
            &mut cfg.paths.checkpoint_root,
            &mut cfg.paths.report_root,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok((Self::from_toml_str(&text, base)?, text))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let m = &self.microgen;
        if m.n_cases == 0 {
            return bad("microgen.n_cases must be positive".into());
        }
        if !(m.target_vf > 0.0 && m.target_vf < std::f64::consts::PI / 4.0) {
            return bad(format!("microgen.target_vf {} out of range", m.target_vf));
        }
        if m.resolution < 2 {
            return bad("microgen.resolution must be at least 2".into());
        }
        self.material.validate().map_err(CliError::config)?;
        if !(self.dataset.params.damage_threshold > 0.0 && self.dataset.params.damage_threshold < 1.0) {
            return bad("dataset.damage_threshold must lie in (0, 1)".into());
        }
        for stage in Stage::ALL {
            cfrc_surrogate::stage_config(stage, self.network.get(stage), m.resolution).map_err(CliError::config)?;
            self.train.get(stage).validate().map_err(CliError::config)?;
        }
        self.rollout.validate().map_err(CliError::config)?;
        let drv = &self.material.driver;
        if (drv.d_eps - self.rollout.d_eps).abs() > 1e-15 || (drv.eps_f - self.rollout.eps_f).abs() > 1e-15 {
            return bad(format!(
                "rollout strain grid (d_eps {}, eps_f {}) differs from the simulation driver ({}, {})",
                self.rollout.d_eps, self.rollout.eps_f, drv.d_eps, drv.eps_f
            ));
        }
        Ok(())
    }

    pub fn micro_dir(&self) -> PathBuf {
        self.paths.data_root.join("micro")
    }

    pub fn cases_dir(&self) -> PathBuf {
        self.paths.data_root.join("cases")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.paths.data_root.join("dataset.json")
    }

    pub fn norm_stats_path(&self) -> PathBuf {
        self.paths.data_root.join("norm_stats.json")
    }

    pub fn rollout_dir(&self, backend: &str) -> PathBuf {
        self.paths.data_root.join("rollout").join(backend)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        let cfg = PipelineConfig::from_toml_str("", Path::new("/base")).unwrap();
        assert_eq!(cfg.paths.data_root, PathBuf::from("/base/data"));
        assert_eq!(cfg.rollout, RolloutParams::default());
        assert_eq!(cfg.microgen.resolution, 256);
    }

    #[test]
    fn shipped_desk_config_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let (cfg, _) = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.microgen.resolution, 32);
        assert_eq!(cfg.dataset.params.damage_threshold, 0.05);
        assert!(cfg.paths.report_root.ends_with("runs/desk/reports"));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let text = "seed = 3\n[microgen]\nresolution = 32\nn_cases = 2\n[network.uts]\nlevels = 3\n[train.uts]\nlearning_rate = 0.001\n[dataset]\ndamage_threshold = 0.05\n";
        let cfg = PipelineConfig::from_toml_str(text, Path::new(".")).unwrap_err();
        // The other stages still have 8 levels, too many for 32 pixels.
        assert!(matches!(cfg, CliError::Config(_)));
        let text = text.replace("[network.uts]\nlevels = 3\n", "[network.damage1]\nlevels = 3\n[network.damage2]\nlevels = 3\n[network.uts]\nlevels = 3\n[network.necking]\nlevels = 3\n");
        let cfg = PipelineConfig::from_toml_str(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.uts.learning_rate, 0.001);
        assert_eq!(cfg.train.uts.batch_size, 4);
        assert_eq!(cfg.dataset.params.damage_threshold, 0.05);
        assert_eq!(cfg.dataset.params.phase_overlap, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "bogus = 1",
            "[microgen]\nn_cases = 0",
            "[rollout]\nd_eps = -1.0",
            "[rollout]\nd_eps = 0.0004",
            "[train.uts]\nlearning_rate = 0.0",
        ] {
            assert!(
                matches!(PipelineConfig::from_toml_str(text, Path::new(".")), Err(CliError::Config(_))),
                "{text}"
            );
        }
    }
}
