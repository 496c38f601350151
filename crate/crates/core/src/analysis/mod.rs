//! Retrieval evaluation and analysis of the discrete representation.

mod codewords;
mod retrieval;

use crate::codebook::{CodeAssignment, NormMode};
use crate::data::PairedDataset;
use crate::encoders::{EmbedFlags, Model};
use crate::error::Result;
use crate::modality::Modality;
use crate::numerics::{Graph, Tensor};

pub use codewords::{
    conditional_probability, conditional_probability_csv, correspondence_csv, correspondence_table,
    format_correspondence_row, label_agreement, localize, partition_statistic, CodewordStats, CorrespondenceRow,
    Hypothesis, LabelAgreement, LabelSource, LocalizationMask, CORRESPONDENCE_HEADER, DEFAULT_PARTITION_THRESHOLD,
};
pub use retrieval::{
    ranks, report_from_ranks, retrieval_csv, retrieval_metrics, Direction, RetrievalReport, RETRIEVAL_HEADER,
};

/// Instances encoded in evaluation mode.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub z_a: Tensor,
    pub z_b: Tensor,
    /// Per-instance codeword assignments, when the discrete path is enabled.
    pub codes_a: Vec<CodeAssignment>,
    pub codes_b: Vec<CodeAssignment>,
}

impl Encoding {
    pub fn codes(&self, m: Modality) -> &[CodeAssignment] {
        match m {
            Modality::A => &self.codes_a,
            Modality::B => &self.codes_b,
        }
    }

    pub fn all_codes(&self) -> impl Iterator<Item = &CodeAssignment> {
        self.codes_a.iter().chain(&self.codes_b)
    }
}

const ENCODE_CHUNK: usize = 256;

/// Encodes every instance of `ds` with running normalization statistics.
/// Assignments are always computed from the shared-space projection, even
/// when `flags` leaves the quantized path out of the embedding.
pub fn encode(model: &Model, ds: &PairedDataset, flags: EmbedFlags) -> Result<Encoding> {
    flags.validate()?;
    let mut model = model.clone();
    let vq_flags = EmbedFlags { use_vq: true, ..flags };
    let mut za = Vec::with_capacity(ds.len());
    let mut zb = Vec::with_capacity(ds.len());
    let mut codes_a = Vec::new();
    let mut codes_b = Vec::new();
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(ENCODE_CHUNK) {
        let ba = ds.batch(chunk, Modality::A)?;
        let bb = ds.batch(chunk, Modality::B)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let out = model.forward(&mut g, &bound, &ba, &bb, flags, NormMode::Eval, None)?;
        za.push(g.value(out.a.z).clone());
        zb.push(g.value(out.b.z).clone());

        let (a, b) = if flags.use_vq {
            (out.a, out.b)
        } else {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let out = model.forward(&mut g, &bound, &ba, &bb, vq_flags, NormMode::Eval, None)?;
            (out.a, out.b)
        };
        for (m, emb, batch, sink) in [
            (Modality::A, a, &ba, &mut codes_a),
            (Modality::B, b, &bb, &mut codes_b),
        ] {
            let codes = emb.codes.expect("quantized path enabled");
            let grid = model.encoder(m).grid.clone();
            for (k, w) in batch.offsets.windows(2).enumerate() {
                sink.push(CodeAssignment {
                    instance: batch.ids[k],
                    modality: m,
                    codes: codes[w[0]..w[1]].to_vec(),
                    grid: grid.fit(w[1] - w[0]),
                });
            }
        }
    }
    Ok(Encoding {
        z_a: Tensor::vstack(&za.iter().collect::<Vec<_>>())?,
        z_b: Tensor::vstack(&zb.iter().collect::<Vec<_>>())?,
        codes_a,
        codes_b,
    })
}

/// Retrieval reports in both directions.
pub fn evaluate(encoding: &Encoding) -> Result<[RetrievalReport; 2]> {
    Ok([
        retrieval_metrics(&encoding.z_a, &encoding.z_b, Direction::AToB)?,
        retrieval_metrics(&encoding.z_a, &encoding.z_b, Direction::BToA)?,
    ])
}

/// Codeword statistics of an encoded dataset.
pub fn codeword_stats(model: &Model, ds: &PairedDataset, encoding: &Encoding, source: LabelSource) -> Result<CodewordStats> {
    let mut stats = CodewordStats::for_dataset(model.codebook.size(), ds);
    stats.inactive_steps = model.codebook.inactive_steps().to_vec();
    stats.accumulate(ds, &encoding.codes_a, source)?;
    stats.accumulate(ds, &encoding.codes_b, source)?;
    Ok(stats)
}
