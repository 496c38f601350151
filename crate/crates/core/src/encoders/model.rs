use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, CodebookConfig, NormMode};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::numerics::{Graph, Tensor};

use super::{BoundEncoder, EmbedFlags, EmbedOutput, EncoderConfig, ModalityEncoder, ParamGroup, Quantization, SequenceBatch};

/// Architecture of a model: everything that must agree between a checkpoint
/// and the code that loads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub codebook: CodebookConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.codebook.validate()?;
        if self.codebook.dim != self.encoder.d_shared {
            return Err(Error::Config(format!(
                "codeword dim {} differs from shared-space dim {}",
                self.codebook.dim, self.encoder.d_shared
            )));
        }
        Ok(())
    }
}

/// FNV-1a over the canonical JSON form of the architecture.
pub fn config_hash(config: &ModelConfig) -> u64 {
    let text = serde_json::to_string(config).expect("model config serializes");
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Both encoders and the shared codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub a: ModalityEncoder,
    pub b: ModalityEncoder,
    pub codebook: Codebook,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub a: EmbedOutput,
    pub b: EmbedOutput,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ModalityEncoder::new(Modality::A, &config.encoder, &mut rng)?;
        let b = ModalityEncoder::new(Modality::B, &config.encoder, &mut rng)?;
        let codebook = Codebook::new(config.codebook.clone(), seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
        Ok(Self { config, a, b, codebook })
    }

    pub fn encoder(&self, m: Modality) -> &ModalityEncoder {
        match m {
            Modality::A => &self.a,
            Modality::B => &self.b,
        }
    }

    pub fn encoder_mut(&mut self, m: Modality) -> &mut ModalityEncoder {
        match m {
            Modality::A => &mut self.a,
            Modality::B => &mut self.b,
        }
    }

    /// All trainable parameters as `(name, group, tensor)`; the codebook is
    /// not among them.
    pub fn parameters(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("a", &self.a), ("b", &self.b)] {
            for (name, group, t) in enc.parameters() {
                out.push((format!("{prefix}.{name}"), group, t));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.a.parameters_mut();
        out.extend(self.b.parameters_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph) -> (BoundEncoder, BoundEncoder) {
        (self.a.bind(g), self.b.bind(g))
    }

    /// Forward both modalities. `frozen` supplies fixed quantization offsets
    /// for A and B (see [`Quantization::Frozen`]).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &(BoundEncoder, BoundEncoder),
        batch_a: &SequenceBatch,
        batch_b: &SequenceBatch,
        flags: EmbedFlags,
        mode: NormMode,
        frozen: Option<(&Tensor, &Tensor)>,
    ) -> Result<ModelOutput> {
        if batch_a.len() != batch_b.len() {
            return Err(Error::dim(
                "forward",
                format!("{} A sequences vs {} B sequences", batch_a.len(), batch_b.len()),
            ));
        }
        let (qa, qb) = match frozen {
            Some((fa, fb)) => (Quantization::Frozen(fa), Quantization::Frozen(fb)),
            None => (Quantization::Nearest, Quantization::Nearest),
        };
        let cb = flags.use_vq.then_some(&self.codebook);
        let a = self.a.embed(g, &bound.0, batch_a, cb, flags, mode, qa)?;
        let b = self.b.embed(g, &bound.1, batch_b, cb, flags, mode, qb)?;
        Ok(ModelOutput { a, b })
    }
}
