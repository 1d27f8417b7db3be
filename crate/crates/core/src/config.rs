//! Run configuration: one JSON document with every knob, defaults filled in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::trainer::{GradCheckConfig, TrainConfig};

pub const DEFAULT_LAMBDAS: [f64; 7] = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeConfig {
    /// Validation sample whose attention is rendered.
    pub sample: usize,
    pub upscale: usize,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self {
            sample: 0,
            upscale: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Existing dataset file to use instead of generating one.
    pub dataset: Option<PathBuf>,
    /// Checkpoint directory for `eval` and `visualize`; defaults to `<dir>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            dataset: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck: GradCheckConfig,
    pub sweep: SweepConfig,
    pub visualize: VisualizeConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let schema = serde_json::to_value(RunConfig::default())?;
        check_keys(&value, &schema, "")?;
        let cfg: RunConfig =
            serde_path_to_error::deserialize(value).map_err(|e| Error::InvalidConfig {
                field: e.path().to_string(),
                reason: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.k != self.data.k {
            return Err(Error::config(
                "model.k",
                format!("{} does not match data.k = {}", self.model.k, self.data.k),
            ));
        }
        for (name, s) in [
            ("model.cfp", &self.model.cfp),
            ("model.ifp", &self.model.ifp),
        ] {
            if (s.height, s.width, s.channels)
                != (self.data.height, self.data.width, self.data.channels)
            {
                return Err(Error::config(
                    format!("{name}.height"),
                    format!(
                        "stream expects {}x{}x{} images, data produces {}x{}x{}",
                        s.height,
                        s.width,
                        s.channels,
                        self.data.height,
                        self.data.width,
                        self.data.channels
                    ),
                ));
            }
        }
        for &l in &self.sweep.lambdas {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(
                    "sweep.lambdas",
                    format!("{l} is outside [0, 1]"),
                ));
            }
        }
        if self.sweep.lambdas.is_empty() {
            return Err(Error::config("sweep.lambdas", "must not be empty"));
        }
        if self.visualize.upscale == 0 {
            return Err(Error::config("visualize.upscale", "must be positive"));
        }
        Ok(())
    }

    /// Pretty JSON with every default resolved.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output.dir.join("checkpoint"))
    }
}

/// Rejects keys absent from the default document, suggesting the closest known key.
fn check_keys(value: &Value, schema: &Value, path: &str) -> Result<()> {
    let (Value::Object(given), Value::Object(known)) = (value, schema) else {
        return Ok(());
    };
    for (key, v) in given {
        let here = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match known.get(key) {
            Some(s) => check_keys(v, s, &here)?,
            None => {
                let nearest = known
                    .keys()
                    .map(|k| (strsim::damerau_levenshtein(key, k), k))
                    .min()
                    .map(|(_, k)| k.clone());
                let reason = match nearest {
                    Some(k) => format!("unknown key `{key}`; did you mean `{k}`?"),
                    None => format!("unknown key `{key}`"),
                };
                return Err(Error::InvalidConfig {
                    field: here,
                    reason,
                });
            }
        }
    }
    Ok(())
}
