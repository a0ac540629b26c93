use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use modscope::ErrorClass;

/// A failed run, classified for the exit status.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Compute(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Compute(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn class(&self) -> &'static str {
        match self {
            Failure::Validation(_) => "validation",
            Failure::Compute(_) => "compute",
            Failure::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Compute(m) | Failure::Io(m) => m,
        }
    }

    /// One-line JSON error report for stderr.
    pub fn report(&self) -> String {
        json!({ "error": { "class": self.class(), "exit_code": self.exit_code(), "message": self.message() } }).to_string()
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.class(), self.message())
    }
}

impl From<modscope::Error> for Failure {
    fn from(e: modscope::Error) -> Self {
        let m = e.to_string();
        match e.class() {
            ErrorClass::Validation => Failure::Validation(m),
            ErrorClass::Compute => Failure::Compute(m),
            ErrorClass::Io => Failure::Io(m),
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Outcome<String> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Output directory, input digests and written reports of one invocation.
pub struct Run {
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(out: &Path) -> Outcome<Self> {
        std::fs::create_dir_all(out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
        let probe = out.join(".modscope-write-test");
        std::fs::write(&probe, b"").map_err(|e| Failure::Io(format!("output directory {} is not writable: {e}", out.display())))?;
        let _ = std::fs::remove_file(probe);
        Ok(Run {
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    /// Records an input file's digest.
    pub fn input(&mut self, path: &Path) -> Outcome<()> {
        let d = digest_file(path)?;
        self.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Outcome<()> {
        let p = self.out.join(name);
        std::fs::write(&p, bytes).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Outcome<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Compute(e.to_string()))? + "\n";
        self.write(name, text.as_bytes())
    }

    /// Registers a file some library call already wrote into the output
    /// directory.
    pub fn written(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Checks inputs are unchanged and writes `manifest.json`.
    pub fn finish(mut self, command: &str, config: &impl Serialize) -> Outcome<()> {
        for (p, d) in &self.inputs {
            if digest_file(Path::new(p))? != *d {
                return Err(Failure::Io(format!("input {p} changed during the run")));
            }
        }
        let config = serde_json::to_value(config).map_err(|e| Failure::Compute(e.to_string()))?;
        let config_sha256 = sha256_hex(config.to_string().as_bytes());
        self.outputs.sort();
        self.outputs.dedup();
        let outputs = self
            .outputs
            .iter()
            .map(|name| Ok((name.clone(), digest_file(&self.out.join(name))?)))
            .collect::<Outcome<BTreeMap<_, _>>>()?;
        let manifest = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
            "config_sha256": config_sha256,
            "inputs": self.inputs,
            "outputs": outputs,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Compute(e.to_string()))? + "\n";
        let p = self.out.join("manifest.json");
        std::fs::write(&p, text).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
    }
}
