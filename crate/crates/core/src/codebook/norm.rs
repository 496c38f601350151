use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::numerics::{column_moments, Graph, Tensor, Var};

/// Variance offset inside the square root of the standardization.
pub const NORM_EPS: f64 = 1e-10;
/// Momentum of the running statistics (matches the codebook decay).
pub const NORM_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Batch statistics, folded into the running estimate.
    Train,
    /// Running statistics only.
    Eval,
}

/// Running per-coordinate statistics of one modality's projected vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityNormStats {
    pub modality: Modality,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl ModalityNormStats {
    pub fn new(modality: Modality, dim: usize) -> Self {
        Self {
            modality,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn fold(&mut self, batch_mean: &[f64], batch_var: &[f64], rows: usize) {
        let m = NORM_MOMENTUM;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
        self.count += rows as u64;
    }
}

/// Standardize the rows of `h` (`L x d`) per coordinate.
///
/// In [`NormMode::Train`] the batch statistics are used (and differentiated
/// through) and then folded into `stats`; in [`NormMode::Eval`] the running
/// statistics are applied as constants.
pub fn normalize(g: &mut Graph, h: Var, stats: &mut ModalityNormStats, mode: NormMode) -> Result<Var> {
    let (rows, d) = g.value(h).dims2("normalize")?;
    if d != stats.dim() {
        return Err(Error::dim("normalize", format!("width {d}, stats for {}", stats.dim())));
    }
    match mode {
        NormMode::Train => {
            let (mean, var) = column_moments(g.value(h))?;
            let out = g.standardize(h, NORM_EPS)?;
            stats.fold(&mean, &var, rows);
            Ok(out)
        }
        NormMode::Eval => {
            let shift = g.constant(Tensor::matrix(1, d, stats.mean.iter().map(|m| -m).collect())?);
            let scale = g.constant(Tensor::matrix(
                1,
                d,
                stats.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
            )?);
            let centered = g.add_row(h, shift)?;
            g.mul_row(centered, scale)
        }
    }
}
