//! `CMDS` container.
//!
//! ```text
//! "CMDS" u16:version u16:d_in u16:concepts u64:instances u8:flags
//! concepts:  short_str name, short_str token, f32[d_in] proto_a, f32[d_in] proto_b
//! instances: for A then B:
//!            u64:id u16:len u16:d_in u16:label  u16[len] position labels
//!            f32[len * d_in] features
//! flags & 1: long_str generator config (JSON)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, FormatError, Result};

use super::{Concept, FeatureSequence, GeneratorConfig, PairedDataset, PairedInstance};

pub const DATASET_MAGIC: &[u8; 4] = b"CMDS";
pub const DATASET_VERSION: u16 = 1;

const HAS_GENERATION: u8 = 1;

impl PairedDataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u16(DATASET_VERSION);
        w.u16(self.d_in as u16);
        w.u16(u16::try_from(self.concepts.len()).map_err(|_| Error::Config("too many concepts".into()))?);
        w.u64(self.instances.len() as u64);
        w.u8(if self.generation.is_some() { HAS_GENERATION } else { 0 });
        for c in &self.concepts {
            w.short_str(&c.name)?;
            w.short_str(&c.token)?;
            w.f32s(&c.prototype_a);
            w.f32s(&c.prototype_b);
        }
        for inst in &self.instances {
            for seq in [&inst.a, &inst.b] {
                w.u64(inst.id);
                w.u16(seq.len() as u16);
                w.u16(self.d_in as u16);
                w.u16(inst.label);
                for &l in &seq.labels {
                    w.u16(l);
                }
                w.f32s(&seq.features);
            }
        }
        if let Some(g) = &self.generation {
            w.long_str(&serde_json::to_string(g).expect("generator config serializes"))?;
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(DATASET_MAGIC, DATASET_VERSION)?;
        let d_in = r.u16()? as usize;
        let n_concepts = r.u16()? as usize;
        let n_instances = r.u64()?;
        let flags_at = r.offset;
        let flags = r.u8()?;
        if flags & !HAS_GENERATION != 0 {
            return Err(FormatError::Malformed {
                offset: flags_at,
                reason: format!("unknown flags {flags:#04x}"),
            }
            .into());
        }
        let mut concepts = Vec::with_capacity(n_concepts);
        for id in 0..n_concepts {
            concepts.push(Concept {
                id: id as u16,
                name: r.short_str()?,
                token: r.short_str()?,
                prototype_a: r.f32s(d_in)?,
                prototype_b: r.f32s(d_in)?,
            });
        }
        let mut instances = Vec::new();
        for _ in 0..n_instances {
            let start = r.offset;
            let (id, label, a) = read_sequence(&mut r, d_in)?;
            let (id_b, label_b, b) = read_sequence(&mut r, d_in)?;
            if id_b != id || label_b != label {
                return Err(FormatError::Malformed {
                    offset: start,
                    reason: format!("modality records disagree: ids {id}/{id_b}, labels {label}/{label_b}"),
                }
                .into());
            }
            instances.push(PairedInstance { id, label, a, b });
        }
        let generation = if flags & HAS_GENERATION != 0 {
            let at = r.offset;
            let text = r.long_str()?;
            let cfg: GeneratorConfig = serde_json::from_str(&text).map_err(|e| FormatError::Malformed {
                offset: at,
                reason: format!("generator config: {e}"),
            })?;
            Some(cfg)
        } else {
            None
        };
        r.finish()?;
        PairedDataset::new(d_in, concepts, instances, generation)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

fn read_sequence(r: &mut Reader<'_>, d_in: usize) -> Result<(u64, u16, FeatureSequence)> {
    let id = r.u64()?;
    let len = r.u16()? as usize;
    let width_at = r.offset;
    let width = r.u16()? as usize;
    if width != d_in {
        return Err(FormatError::Malformed {
            offset: width_at,
            reason: format!("record width {width} differs from dataset width {d_in}"),
        }
        .into());
    }
    let label = r.u16()?;
    let labels = (0..len).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
    let features = r.f32s(len * d_in)?;
    Ok((id, label, FeatureSequence { features, labels }))
}
