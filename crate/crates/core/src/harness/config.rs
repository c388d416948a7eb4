use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::ScheduleConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::field::RenderConfig;
use crate::priors::{OracleConfig, ToyTrainConfig};
use crate::scene::GridParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Scene JSON to load; when absent the scene is generated from `seed`.
    pub path: Option<PathBuf>,
    pub seed: u64,
    /// Lattice resolution of the baked ground truth.
    pub gt_resolution: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { path: None, seed: 0, gt_resolution: 48 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Oracle,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub oracle: OracleConfig,
    /// Trained toy weights; when absent a toy prior is trained on the GT views.
    pub toy_weights: Option<PathBuf>,
    pub toy_train: ToyTrainConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { kind: PriorKind::Oracle, oracle: OracleConfig::default(), toy_weights: None, toy_train: ToyTrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write the held-out renders, final target sets and GT views as PPM.
    pub dump_images: bool,
    /// Row label in the CSV files; derived from strategy and seed when empty.
    pub run_id: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), dump_images: false, run_id: String::new() }
    }
}

/// One experiment. `seed` drives every random stream of the run: the distillation
/// and oracle seeds are overwritten with it when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub grid: GridParams,
    pub holdout: usize,
    pub render: RenderConfig,
    pub schedule: ScheduleConfig,
    pub prior: PriorConfig,
    pub distill: DistillConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            grid: GridParams::default(),
            holdout: 8,
            render: RenderConfig::default(),
            schedule: ScheduleConfig::default(),
            prior: PriorConfig::default(),
            distill: DistillConfig::desk(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Copies the experiment seed into every component config.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.distill.seed = c.seed;
        c.prior.oracle.seed = c.seed;
        c
    }

    pub fn run_id(&self) -> String {
        if self.output.run_id.is_empty() {
            format!("{}-seed{}", self.distill.strategy, self.seed)
        } else {
            self.output.run_id.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        self.prior.oracle.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.render.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.scene.gt_resolution < 8 {
            return Err(Error::Config("scene.gt_resolution must be >= 8".into()));
        }
        if self.grid.n_az == 0 || self.grid.n_el == 0 || self.grid.resolution == 0 {
            return Err(Error::Config("grid counts and resolution must be >= 1".into()));
        }
        if let Some(p) = &self.scene.path {
            if !p.is_file() {
                return Err(Error::Config(format!("scene file {} is not readable", p.display())));
            }
        }
        if let Some(p) = &self.prior.toy_weights {
            if !p.is_file() {
                return Err(Error::Config(format!("toy weights {} are not readable", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults, overlaid with the optional config file, then each `key=value`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Read { path: p.to_path_buf(), source })?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut doc, file);
        }
        for kv in overrides {
            apply_override(&mut doc, kv)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one dotted `key=value` override to this config.
    pub fn with_override(&self, kv: &str) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        apply_override(&mut doc, kv)?;
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c=value`. The value is parsed as JSON when possible, else taken as
/// a string. The path must already exist in the document.
pub fn apply_override(doc: &mut Value, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_replaces_nested_value() {
        let c = ExperimentConfig::load(None, &["distill.cfg_scale=7.5".into(), "distill.strategy=sds".into()]).unwrap();
        assert_eq!(c.distill.cfg_scale, 7.5);
        assert_eq!(c.distill.strategy, crate::distill::Strategy::Sds);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let e = ExperimentConfig::load(None, &["distill.nope=1".into()]).unwrap_err();
        assert!(e.is_usage());
        let e = ExperimentConfig::load(None, &["distill.cfg_scale".into()]).unwrap_err();
        assert!(e.is_usage());
    }

    #[test]
    fn optional_fields_accept_values() {
        let c = ExperimentConfig::load(None, &["distill.stage2_budget=5".into()]).unwrap();
        assert_eq!(c.distill.stage2_budget, Some(5));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut c = ExperimentConfig::default();
        c.distill.cfg_scale = 0.1 + 0.2;
        c.scene.path = Some("a/b.json".into());
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
