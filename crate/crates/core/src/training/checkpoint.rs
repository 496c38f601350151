//! `CMCK` container.
//!
//! ```text
//! "CMCK" u16:version u64:config_hash u64:step long_str:metadata(JSON)
//! f64[...] tensor payload, little-endian, in table-of-contents order
//! ```
//! The metadata holds the training configuration, scalar state, and a table
//! of contents mapping tensor names to shapes and payload offsets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::codebook::Codebook;
use crate::encoders::{config_hash, Model};
use crate::error::{Error, FormatError, Result};
use crate::modality::Modality;
use crate::numerics::Tensor;

use super::{Adam, AdamHyper, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: u64,
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TocEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    epoch: u64,
    optimizer_t: u64,
    optimizer: AdamHyper,
    norm_counts: [u64; 2],
    inactive_steps: Vec<u64>,
    tensors: Vec<TocEntry>,
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let params = self.model.parameters();
        for (name, _, t) in &params {
            out.push((name.clone(), (*t).clone()));
        }
        for m in Modality::BOTH {
            let s = &self.model.encoder(m).norm;
            let prefix = m.to_string().to_lowercase();
            out.push((format!("{prefix}.norm.mean"), Tensor::new(vec![s.mean.len()], s.mean.clone()).expect("1-d")));
            out.push((format!("{prefix}.norm.var"), Tensor::new(vec![s.var.len()], s.var.clone()).expect("1-d")));
        }
        let cb = &self.model.codebook;
        out.push(("codebook.codewords".into(), cb.codewords().clone()));
        out.push((
            "codebook.ema_count".into(),
            Tensor::new(vec![cb.size()], cb.ema_count().to_vec()).expect("1-d"),
        ));
        out.push(("codebook.ema_sum".into(), cb.ema_sum().clone()));
        for (i, (name, _, _)) in params.iter().enumerate() {
            out.push((format!("optimizer.first.{name}"), self.optimizer.first[i].clone()));
            out.push((format!("optimizer.second.{name}"), self.optimizer.second[i].clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.named_tensors();
        let mut toc = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, t) in &tensors {
            toc.push(TocEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let meta = Metadata {
            config: self.config.clone(),
            epoch: self.epoch,
            optimizer_t: self.optimizer.t,
            optimizer: self.optimizer.hyper(),
            norm_counts: [self.model.a.norm.count, self.model.b.norm.count],
            inactive_steps: self.model.codebook.inactive_steps().to_vec(),
            tensors: toc,
        };
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u64(self.config_hash);
        w.u64(self.step);
        w.long_str(&serde_json::to_string(&meta).expect("metadata serializes"))?;
        for (_, t) in &tensors {
            w.f64s(t.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let stored_hash = r.u64()?;
        let step = r.u64()?;
        let meta_at = r.offset;
        let text = r.long_str()?;
        let meta: Metadata = serde_json::from_str(&text).map_err(|e| FormatError::Malformed {
            offset: meta_at,
            reason: format!("metadata: {e}"),
        })?;
        let payload_at = r.offset;
        let total: usize = meta.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let values = r.f64s(total)?;
        r.finish()?;

        let want = config_hash(&meta.config.model);
        if want != stored_hash {
            return Err(Error::Incompatible(format!(
                "stored hash {stored_hash:016x} does not match its configuration ({want:016x})"
            )));
        }
        let mut by_name: BTreeMap<&str, Tensor> = BTreeMap::new();
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset + n > values.len() {
                return Err(FormatError::Malformed {
                    offset: payload_at,
                    reason: format!("tensor {} overruns the payload", e.name),
                }
                .into());
            }
            by_name.insert(&e.name, Tensor::new(e.shape.clone(), values[e.offset..e.offset + n].to_vec())?);
        }
        let mut take = |name: &str| -> Result<Tensor> {
            by_name.remove(name).ok_or_else(|| {
                FormatError::Malformed {
                    offset: meta_at,
                    reason: format!("missing tensor {name}"),
                }
                .into()
            })
        };

        let mut model = Model::new(meta.config.model.clone(), 0)?;
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _, _)| n).collect();
        let mut params = Vec::with_capacity(names.len());
        for name in &names {
            params.push(take(name)?);
        }
        for (slot, t) in model.parameters_mut().into_iter().zip(&params) {
            slot.same_shape(t, "checkpoint")?;
            *slot = t.clone();
        }
        for (m, count) in Modality::BOTH.into_iter().zip(meta.norm_counts) {
            let prefix = m.to_string().to_lowercase();
            let mean = take(&format!("{prefix}.norm.mean"))?;
            let var = take(&format!("{prefix}.norm.var"))?;
            let s = &mut model.encoder_mut(m).norm;
            if mean.len() != s.mean.len() || var.len() != s.var.len() {
                return Err(Error::dim("checkpoint", "normalization statistics width"));
            }
            s.mean = mean.into_data();
            s.var = var.into_data();
            s.count = count;
        }
        model.codebook = Codebook::from_parts(
            meta.config.model.codebook.clone(),
            take("codebook.codewords")?,
            take("codebook.ema_count")?.into_data(),
            take("codebook.ema_sum")?,
            meta.inactive_steps,
        )?;
        let mut optimizer = Adam::new(&params.iter().map(|t| t.shape()).collect::<Vec<_>>());
        optimizer.t = meta.optimizer_t;
        optimizer.beta1 = meta.optimizer.beta1;
        optimizer.beta2 = meta.optimizer.beta2;
        optimizer.eps = meta.optimizer.eps;
        for (i, name) in names.iter().enumerate() {
            let first = take(&format!("optimizer.first.{name}"))?;
            let second = take(&format!("optimizer.second.{name}"))?;
            first.same_shape(&params[i], "checkpoint")?;
            second.same_shape(&params[i], "checkpoint")?;
            optimizer.first[i] = first;
            optimizer.second[i] = second;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(FormatError::Malformed {
                offset: meta_at,
                reason: format!("unexpected tensor {extra}"),
            }
            .into());
        }
        Ok(Self {
            config: meta.config,
            config_hash: stored_hash,
            model,
            optimizer,
            step,
            epoch: meta.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}
