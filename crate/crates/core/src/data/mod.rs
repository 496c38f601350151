//! Paired two-modality datasets: synthetic generation with ground-truth
//! concept labels, the binary container, external import, and batching.

mod format;
mod generate;
mod import;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::SequenceBatch;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::numerics::Tensor;

pub use format::{DATASET_MAGIC, DATASET_VERSION};
pub use generate::{generate, GeneratorConfig};
pub use import::{ImportedDataset, ImportedInstance, ImportedSequence};

/// A latent concept shared by both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: u16,
    /// Label used by the analysis tables (stands in for an action class).
    pub name: String,
    /// Word emitted in modality B token streams.
    pub token: String,
    pub prototype_a: Vec<f32>,
    pub prototype_b: Vec<f32>,
}

/// One modality's view of an instance: `len x d_in` row-major features and a
/// concept label per position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Vec<f32>,
    pub labels: Vec<u16>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, l: usize, d_in: usize) -> &[f32] {
        &self.features[l * d_in..(l + 1) * d_in]
    }

    pub fn to_tensor(&self, d_in: usize) -> Tensor {
        Tensor::matrix(self.len(), d_in, self.features.iter().map(|&x| f64::from(x)).collect())
            .expect("sequence length checked on construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedInstance {
    pub id: u64,
    /// Dominant concept.
    pub label: u16,
    pub a: FeatureSequence,
    pub b: FeatureSequence,
}

impl PairedInstance {
    pub fn sequence(&self, m: Modality) -> &FeatureSequence {
        match m {
            Modality::A => &self.a,
            Modality::B => &self.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub d_in: usize,
    pub concepts: Vec<Concept>,
    pub instances: Vec<PairedInstance>,
    /// Present for generated datasets.
    pub generation: Option<GeneratorConfig>,
}

impl PairedDataset {
    /// Builds a dataset after checking every structural invariant.
    pub fn new(
        d_in: usize,
        concepts: Vec<Concept>,
        instances: Vec<PairedInstance>,
        generation: Option<GeneratorConfig>,
    ) -> Result<Self> {
        let ds = Self {
            d_in,
            concepts,
            instances,
            generation,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_in > u16::MAX as usize {
            return Err(Error::Config(format!("feature width {} out of range", self.d_in)));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Config(format!("concept {i} carries id {}", c.id)));
            }
            if c.prototype_a.len() != self.d_in || c.prototype_b.len() != self.d_in {
                return Err(Error::dim("dataset", format!("concept {i} prototype width differs from {}", self.d_in)));
            }
        }
        let n_concepts = self.concepts.len();
        let first = self.instances.first().map_or(0, |x| x.id);
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.id != first + k as u64 {
                return Err(Error::Config(format!(
                    "instance ids must be contiguous: position {k} has id {}",
                    inst.id
                )));
            }
            if inst.label as usize >= n_concepts {
                return Err(Error::Index {
                    index: inst.label as usize,
                    limit: n_concepts,
                });
            }
            for seq in [&inst.a, &inst.b] {
                if seq.is_empty() || seq.len() > u16::MAX as usize {
                    return Err(Error::Config(format!("instance {} has sequence length {}", inst.id, seq.len())));
                }
                if seq.features.len() != seq.len() * self.d_in {
                    return Err(Error::dim(
                        "dataset",
                        format!("instance {}: {} values for {} positions", inst.id, seq.features.len(), seq.len()),
                    ));
                }
                if let Some(&bad) = seq.labels.iter().find(|&&l| l as usize >= n_concepts) {
                    return Err(Error::Index {
                        index: bad as usize,
                        limit: n_concepts,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    /// First `n` instances and the rest, sharing concepts.
    pub fn split_at(&self, n: usize) -> Result<(PairedDataset, PairedDataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!("cannot split {} instances at {n}", self.len())));
        }
        let part = |range: &[PairedInstance]| PairedDataset {
            d_in: self.d_in,
            concepts: self.concepts.clone(),
            instances: range.to_vec(),
            generation: self.generation.clone(),
        };
        Ok((part(&self.instances[..n]), part(&self.instances[n..])))
    }

    /// Stacks the chosen instances of one modality for the encoders.
    pub fn batch(&self, indices: &[usize], m: Modality) -> Result<SequenceBatch> {
        let mut data = Vec::new();
        let mut offsets = vec![0];
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let inst = self.instances.get(i).ok_or(Error::Index {
                index: i,
                limit: self.len(),
            })?;
            let seq = inst.sequence(m);
            data.extend(seq.features.iter().map(|&x| f64::from(x)));
            offsets.push(offsets.last().expect("nonempty") + seq.len());
            ids.push(inst.id);
        }
        let rows = *offsets.last().expect("nonempty");
        Ok(SequenceBatch {
            features: Tensor::matrix(rows, self.d_in, data)?,
            offsets,
            ids,
        })
    }

    /// Every instance, in order.
    pub fn full_batch(&self, m: Modality) -> Result<SequenceBatch> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all, m)
    }
}

/// Shuffled index batches for one epoch. The order depends only on
/// `(seed, epoch)`; a trailing short batch is dropped so every batch has the
/// same number of negatives.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if batch_size > n {
        return Err(Error::Config(format!("batch size {batch_size} exceeds dataset size {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests;
