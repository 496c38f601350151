//! Modality-specific encoders.
//!
//! Each encoder maps a feature sequence to fine-grained vectors with a small
//! per-position network, summarizes them into a retrieval embedding, and,
//! when the discrete path is enabled, projects the fine-grained vectors into
//! the shared space, standardizes them, quantizes them against the codebook,
//! and adds a summary of the quantized sequence to the embedding.

mod model;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{normalize, Codebook, ModalityNormStats, NormMode};
use crate::error::{Error, Result};
use crate::modality::{GridShape, Modality};
use crate::numerics::{Graph, Tensor, Var};

pub use model::{config_hash, Model, ModelConfig, ModelOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_shared: usize,
    pub d_embed: usize,
    /// Linear layers in the per-position network; `tanh` between layers.
    pub fine_layers: usize,
    pub grid_a: GridShape,
    pub grid_b: GridShape,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 12,
            d_hidden: 32,
            d_shared: 16,
            d_embed: 32,
            fine_layers: 2,
            grid_a: GridShape(vec![3, 3]),
            grid_b: GridShape(vec![6]),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.d_in, self.d_hidden, self.d_shared, self.d_embed].contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.fine_layers == 0 {
            return Err(Error::Config("fine network needs at least one layer".into()));
        }
        Ok(())
    }

    pub fn grid(&self, m: Modality) -> &GridShape {
        match m {
            Modality::A => &self.grid_a,
            Modality::B => &self.grid_b,
        }
    }
}

/// Parameter groups, used to freeze parts of an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Fine,
    High,
    Proj,
    Code,
}

/// Affine map `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[d_in, d_out], bound, rng),
            bias: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::identity(n),
            bias: Tensor::zeros(&[1, n]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    fn bind(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: g.leaf(self.weight.clone()),
            bias: g.leaf(self.bias.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        g.add_row(xw, self.bias)
    }
}

/// Graph handles for every parameter of one encoder, in
/// [`ModalityEncoder::parameters`] order.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub fine: Vec<BoundLinear>,
    pub high: BoundLinear,
    pub proj: BoundLinear,
    pub code: BoundLinear,
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in self.fine.iter().chain([&self.high, &self.proj, &self.code]) {
            out.push(l.weight);
            out.push(l.bias);
        }
        out
    }

    /// Mutable handles in the same order as [`BoundEncoder::vars`].
    pub fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out = Vec::new();
        for l in self.fine.iter_mut().chain([&mut self.high, &mut self.proj, &mut self.code]) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }
}

/// Stacked feature sequences: rows `offsets[i]..offsets[i + 1]` of
/// `features` belong to instance `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub features: Tensor,
    pub offsets: Vec<usize>,
    pub ids: Vec<u64>,
}

impl SequenceBatch {
    pub fn single(id: u64, features: Tensor) -> Self {
        let rows = features.rows();
        Self {
            features,
            offsets: vec![0, rows],
            ids: vec![id],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.features.rows()
    }
}

/// Switches of the combined embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedFlags {
    /// Add the summary of the quantized sequence.
    pub use_vq: bool,
    /// Add the summary of the continuous fine-grained sequence.
    pub use_continuous: bool,
}

impl Default for EmbedFlags {
    fn default() -> Self {
        Self {
            use_vq: true,
            use_continuous: true,
        }
    }
}

impl EmbedFlags {
    pub const CONTINUOUS_ONLY: EmbedFlags = EmbedFlags {
        use_vq: false,
        use_continuous: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.use_vq && !self.use_continuous {
            return Err(Error::Config(
                "embedding needs the continuous path, the quantized path, or both".into(),
            ));
        }
        Ok(())
    }
}

/// How the quantized rows are formed.
#[derive(Debug, Clone, Copy)]
pub enum Quantization<'a> {
    /// Nearest codeword with straight-through gradients.
    Nearest,
    /// `h + offsets` with fixed offsets. With offsets `e_v - h0` taken at a
    /// base point this has the value of [`Quantization::Nearest`] there and
    /// its true derivative equals the straight-through gradient, which makes
    /// the discrete path checkable by finite differences.
    Frozen(&'a Tensor),
}

/// Graph nodes produced by [`ModalityEncoder::embed`].
#[derive(Debug, Clone)]
pub struct EmbedOutput {
    /// `N x d_embed` combined embeddings.
    pub z: Var,
    /// Fine-grained vectors, one row per position.
    pub fine: Var,
    /// Projected and standardized rows (shared space), when the discrete
    /// path is enabled.
    pub shared: Option<Var>,
    /// Quantized rows.
    pub quantized: Option<Var>,
    /// `N x V` codeword distributions of each sequence.
    pub distributions: Option<Var>,
    /// Codeword index per position.
    pub codes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoder {
    pub modality: Modality,
    pub fine: Vec<Linear>,
    pub high: Linear,
    pub proj: Linear,
    pub code: Linear,
    pub grid: GridShape,
    pub norm: ModalityNormStats,
}

impl ModalityEncoder {
    pub fn new<R: Rng + ?Sized>(modality: Modality, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut fine = Vec::with_capacity(cfg.fine_layers);
        let mut width = cfg.d_in;
        for _ in 0..cfg.fine_layers {
            fine.push(Linear::init(width, cfg.d_hidden, rng));
            width = cfg.d_hidden;
        }
        Ok(Self {
            modality,
            fine,
            high: Linear::init(cfg.d_hidden, cfg.d_embed, rng),
            proj: Linear::init(cfg.d_hidden, cfg.d_shared, rng),
            code: Linear::init(cfg.d_shared, cfg.d_embed, rng),
            grid: cfg.grid(modality).clone(),
            norm: ModalityNormStats::new(modality, cfg.d_shared),
        })
    }

    pub fn d_in(&self) -> usize {
        self.fine[0].d_in()
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.fine.iter().enumerate() {
            out.push((format!("fine.{i}.weight"), ParamGroup::Fine, &l.weight));
            out.push((format!("fine.{i}.bias"), ParamGroup::Fine, &l.bias));
        }
        for (name, group, l) in [
            ("high", ParamGroup::High, &self.high),
            ("proj", ParamGroup::Proj, &self.proj),
            ("code", ParamGroup::Code, &self.code),
        ] {
            out.push((format!("{name}.weight"), group, &l.weight));
            out.push((format!("{name}.bias"), group, &l.bias));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.fine.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in [&mut self.high, &mut self.proj, &mut self.code] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BoundEncoder {
        BoundEncoder {
            fine: self.fine.iter().map(|l| l.bind(g)).collect(),
            high: self.high.bind(g),
            proj: self.proj.bind(g),
            code: self.code.bind(g),
        }
    }

    /// Per-position network: `L x d_in` to `L x d_hidden`.
    pub fn encode_fine(&self, g: &mut Graph, p: &BoundEncoder, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2("encode_fine")?;
        if d != self.d_in() {
            return Err(Error::dim(
                "encode_fine",
                format!("{} features per position, encoder expects {}", d, self.d_in()),
            ));
        }
        let mut h = x;
        for (i, layer) in p.fine.iter().enumerate() {
            if i > 0 {
                h = g.tanh(h);
            }
            h = layer.apply(g, h)?;
        }
        Ok(h)
    }

    /// Combined embedding of every sequence in `batch`.
    ///
    /// `codebook` is only read when `flags.use_vq` is set. In
    /// [`NormMode::Train`] the running standardization statistics are
    /// updated.
    pub fn embed(
        &mut self,
        g: &mut Graph,
        p: &BoundEncoder,
        batch: &SequenceBatch,
        codebook: Option<&Codebook>,
        flags: EmbedFlags,
        mode: NormMode,
        quantization: Quantization<'_>,
    ) -> Result<EmbedOutput> {
        flags.validate()?;
        if batch.is_empty() {
            return Err(Error::Empty("embed of an empty batch"));
        }
        let x = g.constant(batch.features.clone());
        let fine = self.encode_fine(g, p, x)?;

        let mut z = None;
        if flags.use_continuous {
            let pooled = g.segment_mean(fine, &batch.offsets)?;
            z = Some(p.high.apply(g, pooled)?);
        }

        let mut out = EmbedOutput {
            z: fine,
            fine,
            shared: None,
            quantized: None,
            distributions: None,
            codes: None,
        };

        if flags.use_vq {
            let cb = codebook.ok_or_else(|| {
                Error::Config("quantized path enabled without a codebook".into())
            })?;
            let projected = p.proj.apply(g, fine)?;
            let shared = normalize(g, projected, &mut self.norm, mode)?;
            let (quantized, codes) = match quantization {
                Quantization::Nearest => cb.quantize(g, shared)?,
                Quantization::Frozen(offsets) => {
                    let codes = cb.nearest_rows(g.value(shared))?;
                    let c = g.constant(offsets.clone());
                    (g.add(shared, c)?, codes)
                }
            };
            let pooled = g.segment_mean(quantized, &batch.offsets)?;
            let zc = p.code.apply(g, pooled)?;
            z = Some(match z {
                Some(zh) => g.add(zh, zc)?,
                None => zc,
            });
            out.distributions = Some(cb.sequence_distributions(g, shared, &batch.offsets)?);
            out.shared = Some(shared);
            out.quantized = Some(quantized);
            out.codes = Some(codes);
        }
        out.z = z.expect("flags validated");
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
