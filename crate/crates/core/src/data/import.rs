//! Ingestion of externally computed feature sequences.
//!
//! The JSON layout mirrors the container:
//!
//! ```json
//! {
//!   "concepts": [{"name": "juggling", "token": "juggles"}],
//!   "instances": [
//!     {"label": 0,
//!      "a": {"features": [[0.1, 0.2]], "labels": [0]},
//!      "b": {"features": [[0.3, 0.4], [0.5, 0.6]]}}
//!   ]
//! }
//! ```
//!
//! Position labels default to the instance label; the label defaults to the
//! mode of the A position labels. Prototypes are unknown and stored as zeros.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

use super::generate::dominant_label;
use super::{Concept, FeatureSequence, PairedDataset, PairedInstance};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportedConcept {
    pub name: String,
    #[serde(default)]
    pub token: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportedSequence {
    pub features: Vec<Vec<f32>>,
    #[serde(default)]
    pub labels: Option<Vec<u16>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportedInstance {
    #[serde(default)]
    pub label: Option<u16>,
    pub a: ImportedSequence,
    pub b: ImportedSequence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportedDataset {
    pub concepts: Vec<ImportedConcept>,
    pub instances: Vec<ImportedInstance>,
}

impl ImportedDataset {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Format(FormatError::Json {
                line: e.line(),
                column: e.column(),
                reason: e.to_string(),
            })
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Converts to a dataset with ids `0..n`.
    pub fn into_dataset(self) -> Result<PairedDataset> {
        let d_in = self
            .instances
            .first()
            .and_then(|i| i.a.features.first())
            .map(Vec::len)
            .ok_or(Error::Empty("import without instances or positions"))?;
        if self.concepts.is_empty() {
            return Err(Error::Empty("import without concepts"));
        }
        let concepts = self
            .concepts
            .into_iter()
            .enumerate()
            .map(|(i, c)| Concept {
                id: i as u16,
                token: c.token.unwrap_or_else(|| c.name.clone()),
                name: c.name,
                prototype_a: vec![0.0; d_in],
                prototype_b: vec![0.0; d_in],
            })
            .collect();
        let mut instances = Vec::with_capacity(self.instances.len());
        for (id, inst) in self.instances.into_iter().enumerate() {
            let label = match inst.label {
                Some(l) => l,
                None => inst
                    .a
                    .labels
                    .as_deref()
                    .and_then(dominant_label)
                    .ok_or_else(|| Error::Config(format!("instance {id} has neither a label nor position labels")))?,
            };
            let a = convert(inst.a, label, d_in, id)?;
            let b = convert(inst.b, label, d_in, id)?;
            instances.push(PairedInstance {
                id: id as u64,
                label,
                a,
                b,
            });
        }
        PairedDataset::new(d_in, concepts, instances, None)
    }
}

fn convert(seq: ImportedSequence, label: u16, d_in: usize, id: usize) -> Result<FeatureSequence> {
    let len = seq.features.len();
    let labels = seq.labels.unwrap_or_else(|| vec![label; len]);
    if labels.len() != len {
        return Err(Error::dim("import", format!("instance {id}: {} labels for {len} positions", labels.len())));
    }
    let mut features = Vec::with_capacity(len * d_in);
    for row in seq.features {
        if row.len() != d_in {
            return Err(Error::dim("import", format!("instance {id}: row of width {} (expected {d_in})", row.len())));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("instance {id}: imported feature")));
        }
        features.extend(row);
    }
    Ok(FeatureSequence { features, labels })
}
