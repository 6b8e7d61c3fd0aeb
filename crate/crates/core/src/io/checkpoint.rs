//! Checkpoints: a directory holding one TSR1 file per tensor and a
//! `manifest.json`:
//!
//! ```json
//! {
//!   "format": "clipseg-checkpoint-1",
//!   "hyperparameters": { "hidden": "64", ... },
//!   "tensors": [ { "group": "param", "name": "encoder.0.norm1.gamma", "shape": [64] }, ... ]
//! }
//! ```
//!
//! Tensor `name` of group `g` lives at `<dir>/<g>/<name>.tsr`.

use std::collections::BTreeMap;
use std::path::Path;

use clipseg_tensor::{io as tsr, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::ParamStore;

pub const FORMAT: &str = "clipseg-checkpoint-1";
pub const MANIFEST: &str = "manifest.json";

/// Model parameters plus optimizer state and the run's hyperparameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub state: BTreeMap<String, Tensor>,
    pub hyperparameters: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    hyperparameters: BTreeMap<String, String>,
    tensors: Vec<Entry>,
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    if ok {
        Ok(())
    } else {
        Err(CoreError::Format {
            what: "checkpoint",
            msg: format!("tensor name {name:?} is not a safe file name"),
        })
    }
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let groups: [(&str, Vec<(&String, &Tensor)>); 2] = [
            ("param", self.params.iter().collect()),
            ("state", self.state.iter().collect()),
        ];
        let mut tensors = Vec::new();
        for (group, items) in &groups {
            std::fs::create_dir_all(dir.join(group))?;
            for (name, t) in items {
                check_name(name)?;
                tsr::save(dir.join(group).join(format!("{name}.tsr")), t)?;
                tensors.push(Entry {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                });
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            hyperparameters: self.hyperparameters.clone(),
            tensors,
        };
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
        let bad = |msg: String| CoreError::Format { what: "checkpoint", msg };
        if manifest.format != FORMAT {
            return Err(bad(format!("unknown format {:?}", manifest.format)));
        }
        let mut ck = Checkpoint {
            hyperparameters: manifest.hyperparameters,
            ..Self::default()
        };
        for e in manifest.tensors {
            check_name(&e.name)?;
            let t = tsr::load(dir.join(&e.group).join(format!("{}.tsr", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(bad(format!("{} has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape)));
            }
            match e.group.as_str() {
                "param" => ck.params.insert(e.name, t),
                "state" => {
                    ck.state.insert(e.name, t);
                }
                g => return Err(bad(format!("unknown group {g:?}"))),
            }
        }
        Ok(ck)
    }
}
