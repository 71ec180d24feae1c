//! Experiment configuration: parsing, validation and hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterOptions, SetSizes};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    /// Optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeFlags {
    pub incremental: bool,
    pub agnostic: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        ModeFlags {
            incremental: true,
            agnostic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorSettings {
    pub lr: f32,
    /// Spread of the noise added to a new descriptor.
    pub init_noise: f32,
    /// Samples of the first dataset averaged into its descriptor.
    pub fit_subset: usize,
    /// Constant c in `w_jk = c · (number of frozen descriptors)`.
    pub repulsion_norm: f32,
}

impl Default for DescriptorSettings {
    fn default() -> Self {
        DescriptorSettings {
            lr: 0.1,
            init_noise: 1e-3,
            fit_subset: 64,
            repulsion_norm: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    /// Dataset directories in training order; the first one pretrains the backbone.
    pub datasets: Vec<PathBuf>,
    pub pretrain: StageSchedule,
    pub adapt: StageSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub grad_clip: Option<f32>,
    #[serde(default)]
    pub modes: ModeFlags,
    #[serde(default)]
    pub descriptor: DescriptorSettings,
    /// Ground-truth depth interval scored by the metrics; defaults to the backbone range.
    #[serde(default)]
    pub eval_range: Option<[f32; 2]>,
}

fn default_momentum() -> f32 {
    0.9
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    #[serde(rename = "disable_global_A")]
    pub disable_global_a: bool,
    #[serde(rename = "free_keys_no_W")]
    pub free_keys_no_w: bool,
    pub no_stop_grad: bool,
}

impl AblationFlags {
    pub fn key_strategy(&self) -> &'static str {
        if self.free_keys_no_w {
            "free"
        } else if self.no_stop_grad {
            "projected-no-stop-grad"
        } else {
            "projected"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterInit {
    pub init_std: f32,
}

impl Default for AdapterInit {
    fn default() -> Self {
        AdapterInit { init_std: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub set_sizes: SetSizes,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub adapter: AdapterInit,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("protodepth-run")
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative dataset and output paths
    /// are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for d in &mut self.sequence.datasets {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sequence;
        if s.datasets.len() < 2 {
            return Err(Error::Config(format!(
                "sequence.datasets needs at least 2 entries, got {}",
                s.datasets.len()
            )));
        }
        for (name, st) in [("pretrain", &s.pretrain), ("adapt", &s.adapt)] {
            if st.batch_size == 0 {
                return Err(Error::Config(format!("sequence.{name}.batch_size must be at least 1")));
            }
            if !(st.lr >= 0.0 && st.lr.is_finite()) {
                return Err(Error::Config(format!("sequence.{name}.lr must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(Error::Config("sequence.momentum must lie in [0, 1)".into()));
        }
        if let Some(c) = s.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("sequence.grad_clip must be positive".into()));
            }
        }
        if !s.modes.incremental && !s.modes.agnostic {
            return Err(Error::Config("at least one evaluation mode must be enabled".into()));
        }
        let d = &s.descriptor;
        if !(d.lr >= 0.0 && d.lr.is_finite() && d.init_noise >= 0.0 && d.fit_subset > 0 && d.repulsion_norm > 0.0 && d.repulsion_norm.is_finite()) {
            return Err(Error::Config(
                "sequence.descriptor needs lr ≥ 0, init_noise ≥ 0, fit_subset ≥ 1 and repulsion_norm > 0".into(),
            ));
        }
        if let Some([lo, hi]) = s.eval_range {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::Config("sequence.eval_range must satisfy 0 < lo < hi".into()));
            }
        }
        if self.ablation.free_keys_no_w && self.ablation.no_stop_grad {
            return Err(Error::Config(
                "free_keys_no_W and no_stop_grad cannot be combined: free keys have no projection to detach".into(),
            ));
        }
        if !(self.adapter.init_std >= 0.0 && self.adapter.init_std.is_finite()) {
            return Err(Error::Config("adapter.init_std must be finite and non-negative".into()));
        }
        self.loss.validate()?;
        if self.loss.w_co + self.loss.w_st <= 0.0 {
            return Err(Error::Config("w_co + w_st must be positive".into()));
        }
        self.set_sizes.validate()?;
        self.backbone.validate()
    }

    pub fn adapter_options(&self) -> AdapterOptions {
        AdapterOptions {
            sizes: self.set_sizes,
            key_strategy: self.ablation.key_strategy().into(),
            use_global: !self.ablation.disable_global_a,
            init_std: self.adapter.init_std,
        }
    }

    pub fn eval_range(&self) -> [f32; 2] {
        self.sequence
            .eval_range
            .unwrap_or([self.backbone.d_min, self.backbone.d_max])
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
