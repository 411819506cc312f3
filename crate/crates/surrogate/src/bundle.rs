//! Composite-Net bundle: the four stage checkpoints, their shared
//! normalization statistics and the rollout constants.

use std::path::{Path, PathBuf};

use cfrc_core::mesh_ingest::NormStats;
use cfrc_core::{Error, Result};
use cfrc_unet::load_checkpoint;
use serde::{Deserialize, Serialize};

use crate::dataset::Stage;
use crate::models::{UNetFinalDamage, UNetIncrement};
use crate::rollout::RolloutParams;

/// On-disk manifest; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub damage1: PathBuf,
    pub damage2: PathBuf,
    pub uts: PathBuf,
    pub necking: PathBuf,
    pub norm_stats: PathBuf,
    pub rollout: RolloutParams,
}

impl BundleManifest {
    /// Manifest with the conventional file names `<stage>.cnet` and `norm_stats.json`.
    pub fn conventional(rollout: RolloutParams) -> Self {
        BundleManifest {
            damage1: checkpoint_name(Stage::Damage1),
            damage2: checkpoint_name(Stage::Damage2),
            uts: checkpoint_name(Stage::Uts),
            necking: checkpoint_name(Stage::Necking),
            norm_stats: PathBuf::from("norm_stats.json"),
            rollout,
        }
    }

    pub fn path(&self, stage: Stage) -> &Path {
        match stage {
            Stage::Damage1 => &self.damage1,
            Stage::Damage2 => &self.damage2,
            Stage::Uts => &self.uts,
            Stage::Necking => &self.necking,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn checkpoint_name(stage: Stage) -> PathBuf {
    PathBuf::from(format!("{}.cnet", stage.name()))
}

/// A loaded Composite-Net ready for rollout.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub damage: UNetFinalDamage,
    pub uts: UNetIncrement,
    pub necking: UNetIncrement,
    pub norm: NormStats,
    pub rollout: RolloutParams,
}

impl Bundle {
    /// Loads every stage, refusing incomplete bundles and checkpoints whose
    /// normalization differs from the bundle statistics.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = BundleManifest::load(manifest_path)?;
        manifest.rollout.validate()?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let missing: Vec<&str> = Stage::ALL
            .into_iter()
            .filter(|&s| !dir.join(manifest.path(s)).is_file())
            .map(Stage::name)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "incomplete bundle: missing checkpoints for {}",
                missing.join(", ")
            )));
        }
        let norm = NormStats::load(&dir.join(&manifest.norm_stats))?;
        let mut nets = Vec::new();
        for stage in Stage::ALL {
            let ck = load_checkpoint::<f32>(&dir.join(manifest.path(stage)))?;
            if ck.norm.as_ref() != Some(&norm) {
                return Err(Error::Validation(format!(
                    "{} checkpoint normalization does not match the bundle statistics",
                    stage.name()
                )));
            }
            nets.push(ck.model);
        }
        let necking = nets.pop().expect("four stages");
        let uts = nets.pop().expect("four stages");
        let stage2 = nets.pop().expect("four stages");
        let stage1 = nets.pop().expect("four stages");
        Ok(Bundle {
            damage: UNetFinalDamage::new(stage1, stage2, norm.clone())?,
            uts: UNetIncrement::new(uts, norm.clone(), Stage::Uts, None)?,
            necking: UNetIncrement::new(necking, norm.clone(), Stage::Necking, None)?,
            norm,
            rollout: manifest.rollout,
        })
    }
}
