use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub updates: usize,
    pub train_loss: f64,
    pub train_ppl: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    /// Fraction of updates whose gradient was rescaled by clipping.
    pub clipped: f64,
    pub checkpoint: Option<String>,
    pub wall_secs: f64,
}

/// Header line followed by one line per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub kind: String,
    pub optimizer: String,
    pub model: serde_json::Value,
    pub train: serde_json::Value,
    pub train_examples: usize,
    pub valid_examples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub header: ManifestHeader,
    pub epochs: Vec<EpochRecord>,
}

impl RunManifest {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("serializable");
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<RunManifest, ModelError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |e: serde_json::Error| ModelError::Config(format!("manifest: {e}"));
        let header = serde_json::from_str(lines.next().ok_or(ModelError::Empty("manifest"))?).map_err(bad)?;
        let epochs = lines.map(|l| serde_json::from_str(l).map_err(bad)).collect::<Result<_, _>>()?;
        Ok(RunManifest { header, epochs })
    }

    /// Appends one line to a manifest file, creating it if needed.
    pub fn append_line(path: &Path, value: &impl Serialize) -> Result<(), ModelError> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let line = serde_json::to_string(value).expect("serializable");
        writeln!(f, "{line}")?;
        Ok(())
    }
}
