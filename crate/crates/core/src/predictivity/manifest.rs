use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::FunctionSuite;
use crate::error::{Error, Result};
use crate::predictivity::ActivationRecord;
use crate::util::write_file;

/// Describes a batch of activation records written by an external exporter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub model_id: String,
    pub layers: Vec<usize>,
    /// Declared feedforward width per exported layer.
    pub d_ff: BTreeMap<usize, usize>,
    pub suite: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub dtype: String,
    #[serde(default)]
    pub tool_versions: BTreeMap<String, String>,
}

pub const EXPORT_DTYPE: &str = "float32";

impl ExportManifest {
    pub fn validate(&self) -> Result<()> {
        if self.dtype != EXPORT_DTYPE {
            return Err(Error::Input(format!("unsupported dtype {:?}, expected {EXPORT_DTYPE}", self.dtype)));
        }
        if self.layers.is_empty() || self.layers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input("layers must be non-empty and strictly increasing".into()));
        }
        let declared: Vec<usize> = self.d_ff.keys().copied().collect();
        if declared != self.layers {
            return Err(Error::Input(format!("d_ff declared for layers {declared:?}, exported {:?}", self.layers)));
        }
        if self.outputs.is_empty() {
            return Err(Error::Input("manifest lists no output files".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut m.suite);
            m.outputs.iter_mut().for_each(fix);
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json()?.as_bytes())
    }

    /// Loads the listed records and checks them against the declared shapes.
    pub fn load_records(&self) -> Result<Vec<ActivationRecord>> {
        let records = self
            .outputs
            .iter()
            .map(ActivationRecord::load)
            .collect::<Result<Vec<_>>>()?;
        for (r, p) in records.iter().zip(&self.outputs) {
            let want = self
                .d_ff
                .get(&r.layer)
                .ok_or_else(|| Error::Input(format!("{}: layer {} is not in the manifest", p.display(), r.layer)))?;
            if r.d_ff() != *want {
                return Err(Error::Input(format!(
                    "{}: width {} but the manifest declares d_ff = {want} for layer {}",
                    p.display(),
                    r.d_ff(),
                    r.layer
                )));
            }
        }
        Ok(records)
    }

    /// Checks that the records cover every (sub-function, layer) pair of the
    /// suite once, with matching instance counts and labels.
    pub fn check_against(&self, suite: &FunctionSuite, records: &[ActivationRecord]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in records {
            let d = suite
                .get(&r.sub_function)
                .ok_or_else(|| Error::Input(format!("record for unknown sub-function {}", r.sub_function)))?;
            if !seen.insert((r.sub_function.clone(), r.layer)) {
                return Err(Error::Input(format!("duplicate record for {} layer {}", r.sub_function, r.layer)));
            }
            if r.labels != d.labels() {
                return Err(Error::Input(format!(
                    "record {} layer {}: {} instances or labels differ from the suite ({})",
                    r.sub_function,
                    r.layer,
                    r.labels.len(),
                    d.instances.len()
                )));
            }
        }
        let expected = suite.sub_functions.len() * self.layers.len();
        if seen.len() != expected {
            return Err(Error::Input(format!("{} records, expected {expected}", seen.len())));
        }
        Ok(())
    }
}
