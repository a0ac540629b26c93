//! Sub-function datasets: binary classification problems over token-id
//! sequences, grouped into function categories.
//!
//! On disk a suite is a line-delimited JSON file (optionally gzip-compressed),
//! one instance per line:
//!
//! ```text
//! {"sub_function":"sense-bank","category":"semantic","tokens":[4,17,9],"label":1}
//! ```
//!
//! Sub-functions appear in order of first occurrence; instances keep file
//! order. [`FunctionSuite::to_jsonl`] writes the canonical form.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{read_maybe_gz, rng, write_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionCategory {
    Semantic,
    Knowledge,
    Task,
    Custom,
}

impl FunctionCategory {
    pub const ALL: [FunctionCategory; 4] = [
        FunctionCategory::Semantic,
        FunctionCategory::Knowledge,
        FunctionCategory::Task,
        FunctionCategory::Custom,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FunctionCategory::Semantic => "semantic",
            FunctionCategory::Knowledge => "knowledge",
            FunctionCategory::Task => "task",
            FunctionCategory::Custom => "custom",
        }
    }
}

impl fmt::Display for FunctionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FunctionCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FunctionCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown function category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<u32>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubFunctionDataset {
    pub id: String,
    pub category: FunctionCategory,
    pub instances: Vec<Instance>,
}

impl SubFunctionDataset {
    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.instances.iter().filter(|i| i.label == 1).count();
        [self.instances.len() - pos, pos]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.instances.iter().position(|i| i.label > 1) {
            return Err(Error::Input(format!("{}: instance {i} has label outside {{0,1}}", self.id)));
        }
        if let Some(i) = self.instances.iter().position(|i| i.tokens.is_empty()) {
            return Err(Error::Input(format!("{}: instance {i} has no tokens", self.id)));
        }
        let [neg, pos] = self.class_counts();
        if neg == 0 || pos == 0 {
            return Err(Error::Input(format!("{}: both labels must be present", self.id)));
        }
        Ok(())
    }
}

/// A collection of sub-functions with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FunctionSuite {
    pub sub_functions: Vec<SubFunctionDataset>,
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    sub_function: std::borrow::Cow<'a, str>,
    category: std::borrow::Cow<'a, str>,
    tokens: std::borrow::Cow<'a, [u32]>,
    label: serde_json::Value,
}

impl FunctionSuite {
    pub fn new(sub_functions: Vec<SubFunctionDataset>) -> Result<Self> {
        let suite = FunctionSuite { sub_functions };
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for sf in &self.sub_functions {
            if seen.insert(sf.id.as_str(), ()).is_some() {
                return Err(Error::Input(format!("duplicate sub-function id {:?}", sf.id)));
            }
            sf.validate()?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SubFunctionDataset> {
        self.sub_functions.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.sub_functions.iter().map(|s| s.id.clone()).collect()
    }

    /// Number of sub-functions per represented category.
    pub fn category_counts(&self) -> BTreeMap<FunctionCategory, usize> {
        let mut m = BTreeMap::new();
        for sf in &self.sub_functions {
            *m.entry(sf.category).or_insert(0) += 1;
        }
        m
    }

    /// Sub-function ids grouped by category, in suite order.
    pub fn by_category(&self) -> BTreeMap<FunctionCategory, Vec<String>> {
        let mut m: BTreeMap<FunctionCategory, Vec<String>> = BTreeMap::new();
        for sf in &self.sub_functions {
            m.entry(sf.category).or_default().push(sf.id.clone());
        }
        m
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_maybe_gz(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Validation {
            path: path.display().to_string(),
            line: 0,
            message: format!("not UTF-8: {e}"),
        })?;
        Self::parse_jsonl(text, &path.display().to_string())
    }

    pub fn parse_jsonl(text: &str, source: &str) -> Result<Self> {
        let mut order: Vec<SubFunctionDataset> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Validation {
                path: source.to_string(),
                line: line_no,
                message,
            };
            let rec: Record = serde_json::from_str(line).map_err(|e| err(format!("malformed record: {e}")))?;
            let category: FunctionCategory = rec.category.parse().map_err(|e: Error| err(e.to_string()))?;
            let label = match rec.label.as_u64() {
                Some(l @ (0 | 1)) => l as u8,
                _ => return Err(err(format!("label {} is not 0 or 1", rec.label))),
            };
            if rec.tokens.is_empty() {
                return Err(err("empty token sequence".into()));
            }
            let id = rec.sub_function.into_owned();
            let slot = match index.get(&id) {
                Some(&i) => i,
                None => {
                    index.insert(id.clone(), order.len());
                    order.push(SubFunctionDataset {
                        id: id.clone(),
                        category,
                        instances: Vec::new(),
                    });
                    order.len() - 1
                }
            };
            if order[slot].category != category {
                return Err(err(format!(
                    "sub-function {id:?} declared as {} earlier, {} here",
                    order[slot].category, category
                )));
            }
            order[slot].instances.push(Instance {
                tokens: rec.tokens.into_owned(),
                label,
            });
        }
        let suite = FunctionSuite { sub_functions: order };
        suite.validate().map_err(|e| Error::Validation {
            path: source.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(suite)
    }

    /// Canonical line-delimited encoding.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for sf in &self.sub_functions {
            for inst in &sf.instances {
                let rec = Record {
                    sub_function: sf.id.as_str().into(),
                    category: sf.category.as_str().into(),
                    tokens: inst.tokens.as_slice().into(),
                    label: inst.label.into(),
                };
                out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_jsonl().as_bytes())
    }
}

/// Keeps at most `per_class` uniformly sampled instances of each label,
/// preserving their original relative order.
pub fn balanced_subsample(dataset: &SubFunctionDataset, per_class: usize, seed: u64) -> Result<SubFunctionDataset> {
    if per_class == 0 {
        return Err(Error::Input("per_class must be at least 1".into()));
    }
    let mut r = rng(seed);
    let mut keep = vec![false; dataset.instances.len()];
    for label in [0u8, 1] {
        let members: Vec<usize> = (0..dataset.instances.len())
            .filter(|&i| dataset.instances[i].label == label)
            .collect();
        if members.is_empty() {
            return Err(Error::Input(format!("{}: no instances with label {label}", dataset.id)));
        }
        if members.len() <= per_class {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in index::sample(&mut r, members.len(), per_class) {
                keep[members[j]] = true;
            }
        }
    }
    Ok(SubFunctionDataset {
        id: dataset.id.clone(),
        category: dataset.category,
        instances: dataset
            .instances
            .iter()
            .zip(keep)
            .filter_map(|(inst, k)| k.then(|| inst.clone()))
            .collect(),
    })
}
