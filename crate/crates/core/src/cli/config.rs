//! Experiment configuration: a strict JSON document with one section per
//! pipeline stage.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::AeConfig;
use crate::dataset::SHAPE_CLASSES;
use crate::error::{Error, Result};
use crate::fiber::{
    make_config_grid, ChannelSelection, FiberConfiguration, IlluminationMode, ARM_RANGE_MM, DAMPING_EXPERIMENT_1,
    DAMPING_EXPERIMENT_2, ROTATION_RANGE_DEG,
};
use crate::gmvae::GmvaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    /// Patterns per configuration.
    #[serde(rename = "M")]
    pub patterns: usize,
    /// Image side; images have `side²` pixels.
    pub side: usize,
    /// Points on the configuration grid from `C_10` to `C_0`.
    pub configs: usize,
    pub mode: IlluminationMode,
    pub decorrelation_scale: f64,
    pub seed: u64,
}

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// Generated geometric shapes; class names come from the shape list.
    Shapes {},
    /// An IDX image/label pair. `label_names[i]` names label value `i`;
    /// without it labels are named by their decimal value. Test images
    /// come from the optional second pair, else from the first pair after
    /// the training images.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        label_names: Option<Vec<String>>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerClassCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceSpec,
    /// Trained classes, in label order.
    pub classes: Vec<String>,
    /// Classes that only appear in the test sets.
    #[serde(default)]
    pub new_classes: Vec<String>,
    pub per_class_counts: PerClassCounts,
    pub noise_std: f64,
    /// Collection-fiber damping factor.
    pub s: f64,
    #[serde(default)]
    pub channels: ChannelSelection,
    pub train_configs: Vec<String>,
    pub unseen_configs: Vec<String>,
    pub seed: u64,
}

impl DataSection {
    /// Trained classes followed by new classes.
    pub fn all_classes(&self) -> Vec<String> {
        self.classes.iter().chain(&self.new_classes).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub out_dir: PathBuf,
    /// Configurations pooled for the latent projection; defaults to the
    /// first training and the first unseen configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca_configs: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ensemble: EnsembleSection,
    pub data: DataSection,
    pub gmvae: GmvaeConfig,
    pub ae: AeConfig,
    pub eval: EvalSection,
}

fn config_err(pointer: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.to_string(),
        reason: reason.into(),
    }
}

/// `a.b[2].c` to `/a/b/2/c`.
fn json_pointer(path: &str) -> String {
    if path.is_empty() || path == "." {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let (head, rest) = part.split_once('[').unwrap_or((part, ""));
        if !head.is_empty() {
            out.push('/');
            out.push_str(&head.replace('~', "~0").replace('/', "~1"));
        }
        for idx in rest.split('[').filter(|s| !s.is_empty()) {
            out.push('/');
            out.push_str(idx.trim_end_matches(']'));
        }
    }
    out
}

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(&e.path().to_string());
            config_err(&pointer, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingPrerequisite(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hex SHA-256 of the compact serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Copy with every section seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.ensemble.seed = seed;
        c.data.seed = seed;
        c.gmvae.seed = seed;
        c.ae.seed = seed;
        c
    }

    /// Copy set up for experiment 1 (wavefront-shaped illumination) or
    /// experiment 2 (random illumination). Only the illumination mode and
    /// the damping factor change.
    pub fn for_experiment(&self, experiment: u8) -> Result<Self> {
        let mut c = self.clone();
        match experiment {
            1 => {
                c.ensemble.mode = IlluminationMode::WavefrontShaped;
                c.data.s = DAMPING_EXPERIMENT_1;
            }
            2 => {
                c.ensemble.mode = IlluminationMode::Random;
                c.data.s = DAMPING_EXPERIMENT_2;
            }
            other => return Err(Error::invalid(format!("experiment must be 1 or 2, got {other}"))),
        }
        Ok(c)
    }

    /// Experiment number implied by the illumination mode.
    pub fn experiment(&self) -> u8 {
        match self.ensemble.mode {
            IlluminationMode::WavefrontShaped => 1,
            IlluminationMode::Random => 2,
        }
    }

    pub fn grid(&self) -> Result<Vec<FiberConfiguration>> {
        make_config_grid(self.ensemble.configs, ARM_RANGE_MM, ROTATION_RANGE_DEG)
    }

    /// Number of trained classes.
    pub fn k(&self) -> usize {
        self.data.classes.len()
    }

    /// Configurations pooled in the latent projection.
    pub fn pca_configs(&self) -> Vec<String> {
        self.eval.pca_configs.clone().unwrap_or_else(|| {
            self.data
                .train_configs
                .iter()
                .take(1)
                .chain(self.data.unseen_configs.iter().take(1))
                .cloned()
                .collect()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.ensemble;
        if e.side < 8 || !e.side.is_power_of_two() {
            return Err(config_err(
                "/ensemble/side",
                format!("must be a power of two >= 8, got {}", e.side),
            ));
        }
        if e.patterns != e.side * e.side {
            return Err(config_err(
                "/ensemble/M",
                format!(
                    "must equal side² = {} so measurements reshape to the image grid",
                    e.side * e.side
                ),
            ));
        }
        if !(e.decorrelation_scale > 0.0 && e.decorrelation_scale.is_finite()) {
            return Err(config_err("/ensemble/decorrelation_scale", "must be positive"));
        }
        let grid = self
            .grid()
            .map_err(|err| config_err("/ensemble/configs", err.to_string()))?;
        let ids: HashSet<&str> = grid.iter().map(|c| c.id.as_str()).collect();

        let d = &self.data;
        if d.classes.len() < 2 {
            return Err(config_err("/data/classes", "need at least 2 trained classes"));
        }
        let all = d.all_classes();
        let mut seen = HashSet::new();
        for (i, c) in all.iter().enumerate() {
            if !seen.insert(c) {
                let ptr = if i < d.classes.len() {
                    format!("/data/classes/{i}")
                } else {
                    format!("/data/new_classes/{}", i - d.classes.len())
                };
                return Err(config_err(&ptr, format!("duplicate class `{c}`")));
            }
        }
        let available: Vec<String> = match &d.source {
            SourceSpec::Shapes {} => SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
            SourceSpec::Idx { label_names, .. } => label_names
                .clone()
                .unwrap_or_else(|| (0..256).map(|i: usize| i.to_string()).collect()),
        };
        for (i, c) in all.iter().enumerate() {
            if !available.contains(c) {
                let ptr = if i < d.classes.len() {
                    format!("/data/classes/{i}")
                } else {
                    format!("/data/new_classes/{}", i - d.classes.len())
                };
                return Err(config_err(&ptr, format!("unknown class `{c}` for this image source")));
            }
        }
        if let SourceSpec::Idx {
            test_images,
            test_labels,
            ..
        } = &d.source
        {
            if test_images.is_some() != test_labels.is_some() {
                return Err(config_err("/data/source", "test_images and test_labels go together"));
            }
        }
        if d.per_class_counts.train == 0 {
            return Err(config_err("/data/per_class_counts/train", "must be positive"));
        }
        if d.per_class_counts.test == 0 {
            return Err(config_err("/data/per_class_counts/test", "must be positive"));
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return Err(config_err("/data/noise_std", "must be finite and non-negative"));
        }
        if !(d.s > 0.0 && d.s.is_finite()) {
            return Err(config_err("/data/s", "must be positive"));
        }
        if d.train_configs.len() < 2 {
            return Err(config_err(
                "/data/train_configs",
                "need at least 2 training configurations",
            ));
        }
        if d.unseen_configs.is_empty() {
            return Err(config_err(
                "/data/unseen_configs",
                "need at least 1 unseen configuration",
            ));
        }
        let mut used = HashSet::new();
        for (field, list) in [
            ("train_configs", &d.train_configs),
            ("unseen_configs", &d.unseen_configs),
        ] {
            for (i, id) in list.iter().enumerate() {
                let ptr = format!("/data/{field}/{i}");
                if !ids.contains(id.as_str()) {
                    return Err(config_err(&ptr, format!("`{id}` is not on the configuration grid")));
                }
                if !used.insert(id.as_str()) {
                    return Err(config_err(&ptr, format!("`{id}` listed twice")));
                }
            }
        }
        if let Some(list) = &self.eval.pca_configs {
            for (i, id) in list.iter().enumerate() {
                if !used.contains(id.as_str()) {
                    return Err(config_err(
                        &format!("/eval/pca_configs/{i}"),
                        format!("`{id}` is neither a training nor an unseen configuration"),
                    ));
                }
            }
        }
        self.gmvae
            .validate()
            .map_err(|err| config_err("/gmvae", err.to_string()))?;
        self.ae.validate().map_err(|err| config_err("/ae", err.to_string()))?;
        Ok(())
    }
}
