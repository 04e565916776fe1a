//! Versioned JSON checkpoints with bit-exact round trips.

use super::adam::AdamState;
use super::mlp::{Arch, ScoreNet};
use super::tape::Mat;
use crate::rng::RngState;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_SCHEME: &str = "uniform_fan_in";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_mat(name: impl Into<String>, m: &Mat) -> Self {
        Self { name: name.into(), shape: [m.nrows(), m.ncols()], data: m.iter().copied().collect() }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        Mat::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::Shape(format!("{}: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: Vec<NamedArray>,
    pub second_moment: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: Arch,
    pub init: String,
    pub params: Vec<NamedArray>,
    pub adam: AdamSnapshot,
    pub rng: RngState,
    pub iteration: u64,
    /// Task metadata needed to rebuild samplers (schedule, space, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn capture(net: &ScoreNet, adam: &AdamState, rng: RngState, iteration: u64, meta: serde_json::Value) -> Self {
        let names = net.arch().param_names();
        let named = |ms: &[Mat]| -> Vec<NamedArray> {
            names.iter().zip(ms).map(|(n, m)| NamedArray::from_mat(n.clone(), m)).collect()
        };
        Self {
            version: CHECKPOINT_VERSION,
            arch: net.arch().clone(),
            init: INIT_SCHEME.into(),
            params: named(net.params()),
            adam: AdamSnapshot {
                step_count: adam.step_count,
                learning_rate: adam.learning_rate,
                beta1: adam.beta1,
                beta2: adam.beta2,
                epsilon: adam.epsilon,
                first_moment: named(&adam.first_moment),
                second_moment: named(&adam.second_moment),
            },
            rng,
            iteration,
            meta,
        }
    }

    pub fn net(&self) -> Result<ScoreNet> {
        let params = self.params.iter().map(NamedArray::to_mat).collect::<Result<Vec<_>>>()?;
        ScoreNet::from_params(self.arch.clone(), params)
    }

    pub fn adam(&self) -> Result<AdamState> {
        let a = &self.adam;
        Ok(AdamState {
            first_moment: a.first_moment.iter().map(NamedArray::to_mat).collect::<Result<_>>()?,
            second_moment: a.second_moment.iter().map(NamedArray::to_mat).collect::<Result<_>>()?,
            step_count: a.step_count,
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Domain(format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Atomic file replacement: temp file in the same directory plus rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Domain(format!("bad path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
