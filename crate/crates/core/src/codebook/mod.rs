//! The shared discrete embedding space.
//!
//! Codewords are learned only through exponential moving averages of the
//! projected vectors assigned to them; they never receive gradients. Inputs
//! are standardized per modality before quantization, and codewords that go
//! unused for `reset_patience` consecutive steps are re-seeded from codewords
//! that were used in the current step.

mod norm;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{GridShape, Modality};
use crate::numerics::{squared_distance, Graph, Tensor, Var};

pub use norm::{normalize, ModalityNormStats, NormMode, NORM_EPS};

/// Decay of the codeword moving averages.
pub const DEFAULT_DECAY: f64 = 0.99;
/// Consecutive unused steps after which a codeword is re-seeded.
pub const DEFAULT_RESET_PATIENCE: u64 = 100;
/// Codebook size used on the full-size retrieval benchmarks.
pub const BENCHMARK_CODEBOOK_SIZE: usize = 1024;
/// Codebook size for the synthetic desk-scale setup.
pub const TOY_CODEBOOK_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub size: usize,
    pub dim: usize,
    pub decay: f64,
    pub reset_patience: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            size: TOY_CODEBOOK_SIZE,
            dim: 16,
            decay: DEFAULT_DECAY,
            reset_patience: DEFAULT_RESET_PATIENCE,
        }
    }
}

impl CodebookConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!("codebook size must be >= 2, got {}", self.size)));
        }
        if self.dim < 1 {
            return Err(Error::Config("codeword dimension must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        Ok(())
    }
}

/// Codeword indices chosen for each position of one encoded sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeAssignment {
    pub instance: u64,
    pub modality: Modality,
    pub codes: Vec<usize>,
    pub grid: GridShape,
}

impl CodeAssignment {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn coords(&self) -> Vec<Vec<usize>> {
        (0..self.codes.len()).map(|l| self.grid.coords(l)).collect()
    }
}

/// Which codewords [`Codebook::reset_dead`] re-seeded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResetOutcome {
    /// `(reset index, source index)` pairs.
    pub reset: Vec<(usize, usize)>,
    /// Set when no codeword was activated in the last update, so nothing
    /// could be used as a source.
    pub no_active_source: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    config: CodebookConfig,
    codewords: Tensor,
    ema_count: Vec<f64>,
    ema_sum: Tensor,
    inactive_steps: Vec<u64>,
    activated: Vec<bool>,
}

impl Codebook {
    pub fn new(config: CodebookConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ema_sum = Tensor::randn(&[config.size, config.dim], &mut rng);
        Ok(Self {
            codewords: ema_sum.clone(),
            ema_count: vec![1.0; config.size],
            ema_sum,
            inactive_steps: vec![0; config.size],
            activated: vec![false; config.size],
            config,
        })
    }

    pub fn init(size: usize, dim: usize, decay: f64, reset_patience: u64, seed: u64) -> Result<Self> {
        Self::new(
            CodebookConfig {
                size,
                dim,
                decay,
                reset_patience,
            },
            seed,
        )
    }

    /// Rebuild from stored state.
    pub fn from_parts(
        config: CodebookConfig,
        codewords: Tensor,
        ema_count: Vec<f64>,
        ema_sum: Tensor,
        inactive_steps: Vec<u64>,
    ) -> Result<Self> {
        config.validate()?;
        let shape = [config.size, config.dim];
        if codewords.shape() != shape || ema_sum.shape() != shape {
            return Err(Error::dim("codebook", "stored codeword tables do not match config"));
        }
        if ema_count.len() != config.size || inactive_steps.len() != config.size {
            return Err(Error::dim("codebook", "stored counters do not match config"));
        }
        if let Some(v) = ema_count.iter().position(|&n| !(n > 0.0)) {
            return Err(Error::Config(format!("codeword {v} has non-positive EMA count")));
        }
        Ok(Self {
            activated: vec![false; config.size],
            config,
            codewords,
            ema_count,
            ema_sum,
            inactive_steps,
        })
    }

    pub fn config(&self) -> &CodebookConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn codewords(&self) -> &Tensor {
        &self.codewords
    }

    pub fn codeword(&self, v: usize) -> &[f64] {
        self.codewords.row(v)
    }

    pub fn ema_count(&self) -> &[f64] {
        &self.ema_count
    }

    pub fn ema_sum(&self) -> &Tensor {
        &self.ema_sum
    }

    pub fn inactive_steps(&self) -> &[u64] {
        &self.inactive_steps
    }

    /// Codewords that received at least one vector in the last update.
    pub fn activated(&self) -> &[bool] {
        &self.activated
    }

    /// Index of the closest codeword; ties go to the lowest index.
    pub fn nearest(&self, h: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for v in 0..self.config.size {
            let d = squared_distance(h, self.codewords.row(v));
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }

    pub fn nearest_rows(&self, h: &Tensor) -> Result<Vec<usize>> {
        let (rows, d) = h.dims2("nearest_rows")?;
        if d != self.config.dim {
            return Err(Error::dim("quantize", format!("row width {d}, codebook dim {}", self.config.dim)));
        }
        Ok((0..rows).map(|l| self.nearest(h.row(l))).collect())
    }

    /// Replace each row by its nearest codeword. The forward value is the
    /// codeword itself; the backward pass copies the incoming gradient to
    /// `h_proj` unchanged.
    pub fn quantize(&self, g: &mut Graph, h_proj: Var) -> Result<(Var, Vec<usize>)> {
        let codes = self.nearest_rows(g.value(h_proj))?;
        let replacement = self.gather(&codes)?;
        let q = g.straight_through(h_proj, replacement)?;
        Ok((q, codes))
    }

    /// Codeword rows for the given indices, stacked.
    pub fn gather(&self, codes: &[usize]) -> Result<Tensor> {
        let d = self.config.dim;
        let mut data = Vec::with_capacity(codes.len() * d);
        for &v in codes {
            if v >= self.config.size {
                return Err(Error::Index { index: v, limit: self.config.size });
            }
            data.extend_from_slice(self.codewords.row(v));
        }
        Tensor::matrix(codes.len(), d, data)
    }

    /// Softmin over Euclidean distances: row `l` of the `L x V` result is
    /// `P(e_v | h_l)`. The codebook enters as a constant.
    pub fn code_probabilities(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let e = g.constant(self.codewords.clone());
        let neg = g.neg_l2_distance_rows(h, e)?;
        g.softmax(neg, 1)
    }

    /// Average of the per-position distributions of a whole sequence (`1 x V`).
    pub fn sequence_distribution(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let rows = g.value(h).rows();
        if rows == 0 || g.value(h).is_empty() {
            return Err(Error::Empty("sequence_distribution of an empty sequence"));
        }
        self.sequence_distributions(g, h, &[0, rows])
    }

    /// Per-sequence distributions for stacked sequences delimited by `offsets`
    /// (`N x V`).
    pub fn sequence_distributions(&self, g: &mut Graph, h: Var, offsets: &[usize]) -> Result<Var> {
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Empty("sequence_distribution of an empty sequence"));
        }
        let p = self.code_probabilities(g, h)?;
        g.segment_mean(p, offsets)
    }

    /// One moving-average step. Row `i` of `vectors` was quantized to
    /// `codes[i]`.
    pub fn ema_update(&mut self, codes: &[usize], vectors: &Tensor) -> Result<()> {
        let (rows, d) = if vectors.is_empty() && codes.is_empty() {
            (0, self.config.dim)
        } else {
            vectors.dims2("ema_update")?
        };
        if d != self.config.dim {
            return Err(Error::dim("ema_update", format!("vector dim {d}, codebook dim {}", self.config.dim)));
        }
        if rows != codes.len() {
            return Err(Error::dim("ema_update", format!("{rows} vectors for {} codes", codes.len())));
        }
        let size = self.config.size;
        let mut counts = vec![0usize; size];
        let mut sums = vec![0.0; size * d];
        for (i, &v) in codes.iter().enumerate() {
            if v >= size {
                return Err(Error::Index { index: v, limit: size });
            }
            counts[v] += 1;
            for (s, x) in sums[v * d..(v + 1) * d].iter_mut().zip(vectors.row(i)) {
                *s += x;
            }
        }
        let gamma = self.config.decay;
        for v in 0..size {
            let active = counts[v] > 0;
            self.activated[v] = active;
            let m = &mut self.ema_sum.data_mut()[v * d..(v + 1) * d];
            if active {
                self.ema_count[v] = gamma * self.ema_count[v] + (1.0 - gamma) * counts[v] as f64;
                for (mj, sj) in m.iter_mut().zip(&sums[v * d..(v + 1) * d]) {
                    *mj = gamma * *mj + (1.0 - gamma) * sj;
                }
                self.inactive_steps[v] = 0;
            } else {
                self.ema_count[v] *= gamma;
                m.iter_mut().for_each(|x| *x *= gamma);
                self.inactive_steps[v] += 1;
            }
            let n = self.ema_count[v];
            for j in 0..d {
                self.codewords.data_mut()[v * d + j] = self.ema_sum.data()[v * d + j] / n;
            }
        }
        Ok(())
    }

    /// Re-seed every codeword unused for at least `reset_patience` steps from
    /// a uniformly chosen codeword activated in the last update.
    pub fn reset_dead<R: Rng + ?Sized>(&mut self, rng: &mut R) -> ResetOutcome {
        let dead: Vec<usize> = (0..self.config.size)
            .filter(|&v| self.inactive_steps[v] >= self.config.reset_patience)
            .collect();
        if dead.is_empty() {
            return ResetOutcome::default();
        }
        let sources: Vec<usize> = (0..self.config.size).filter(|&v| self.activated[v]).collect();
        if sources.is_empty() {
            log::warn!("{} codewords due for reset but none was activated this step", dead.len());
            return ResetOutcome {
                reset: Vec::new(),
                no_active_source: true,
            };
        }
        let d = self.config.dim;
        let mut reset = Vec::with_capacity(dead.len());
        for v in dead {
            let src = *sources.choose(rng).expect("non-empty sources");
            let row = self.codewords.row(src).to_vec();
            self.codewords.data_mut()[v * d..(v + 1) * d].copy_from_slice(&row);
            self.ema_sum.data_mut()[v * d..(v + 1) * d].copy_from_slice(&row);
            self.ema_count[v] = 1.0;
            self.inactive_steps[v] = 0;
            reset.push((v, src));
        }
        ResetOutcome {
            reset,
            no_active_source: false,
        }
    }
}
