//! Contrastive objectives over in-batch negatives.
//!
//! Row `i` of the A-side tensors is paired with row `i` of the B-side
//! tensors; every other row of the batch serves as a negative. Both losses
//! are anchored on A (one softmax per A row over all B rows); the symmetric
//! variant averages in the B-anchored direction as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var, LOG_EPS};

/// Margin subtracted from positive-pair similarities.
pub const DEFAULT_MARGIN: f64 = 1e-3;
/// Weight of the code-matching term.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub alpha: f64,
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            alpha: DEFAULT_ALPHA,
            symmetric: false,
        }
    }
}

/// Per-batch quantities the objectives consume.
#[derive(Debug, Clone, Copy)]
pub struct BatchEmbeddings {
    /// `N x d_embed`
    pub z_a: Var,
    pub z_b: Var,
    /// `N x V` codeword distributions, when the discrete path is active.
    pub p_a: Option<Var>,
    pub p_b: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mms: Var,
    pub cmcm: Option<Var>,
}

/// Dot-product similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("similarity", format!("{} vs {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Negative symmetric cross-entropy of two distributions, with logs clamped
/// at [`LOG_EPS`].
pub fn code_similarity(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("code_similarity", format!("{} vs {}", p.len(), q.len())));
    }
    let ln = |x: f64| x.max(LOG_EPS).ln();
    Ok(p.iter().zip(q).map(|(&a, &b)| a * ln(b) + b * ln(a)).sum())
}

/// Softmax cross-entropy of the diagonal of a score matrix, with `margin`
/// subtracted from the diagonal first.
pub fn contrastive_from_scores(g: &mut Graph, scores: Var, margin: f64, symmetric: bool) -> Result<Var> {
    let (n, m) = g.value(scores).dims2("contrastive")?;
    if n != m {
        return Err(Error::dim("contrastive", format!("score matrix {n}x{m} is not square")));
    }
    if n == 0 {
        return Err(Error::Empty("contrastive loss over an empty batch"));
    }
    let shifted = if margin != 0.0 {
        let mask = g.constant(Tensor::identity(n).map(|x| -margin * x));
        g.add(scores, mask)?
    } else {
        scores
    };
    let anchored = |g: &mut Graph, axis: usize| -> Result<Var> {
        let ls = g.log_softmax(shifted, axis)?;
        let d = g.diag(ls)?;
        let m = g.mean(d)?;
        Ok(g.scale(m, -1.0))
    };
    let forward = anchored(g, 1)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = anchored(g, 0)?;
    let both = g.add(forward, backward)?;
    Ok(g.scale(both, 0.5))
}

fn check_pair(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (na, da) = g.value(a).dims2(op)?;
    let (nb, db) = g.value(b).dims2(op)?;
    if na != nb || da != db {
        return Err(Error::dim(op, format!("{na}x{da} vs {nb}x{db}")));
    }
    if na == 0 {
        return Err(Error::Empty("loss over an empty batch"));
    }
    Ok(())
}

/// Matrix of dot products `S[i, j] = z_a[i] . z_b[j]`.
pub fn similarity_matrix(g: &mut Graph, z_a: Var, z_b: Var) -> Result<Var> {
    check_pair(g, z_a, z_b, "similarity_matrix")?;
    let zbt = g.transpose(z_b)?;
    g.matmul(z_a, zbt)
}

/// Masked-margin softmax loss over embedding similarities.
pub fn mms_loss(g: &mut Graph, z_a: Var, z_b: Var, margin: f64, symmetric: bool) -> Result<Var> {
    let s = similarity_matrix(g, z_a, z_b)?;
    contrastive_from_scores(g, s, margin, symmetric)
}

/// Matrix of code similarities `S[i, j] = S_code(p_a[i], p_b[j])`.
pub fn code_similarity_matrix(g: &mut Graph, p_a: Var, p_b: Var) -> Result<Var> {
    check_pair(g, p_a, p_b, "code_similarity_matrix")?;
    let log_a = g.log(p_a);
    let log_b = g.log(p_b);
    let log_bt = g.transpose(log_b)?;
    let p_bt = g.transpose(p_b)?;
    let t1 = g.matmul(p_a, log_bt)?;
    let t2 = g.matmul(log_a, p_bt)?;
    g.add(t1, t2)
}

/// Cross-modal code matching loss over codeword distributions.
pub fn cmcm_loss(g: &mut Graph, p_a: Var, p_b: Var, symmetric: bool) -> Result<Var> {
    let s = code_similarity_matrix(g, p_a, p_b)?;
    contrastive_from_scores(g, s, 0.0, symmetric)
}

/// `L_MMS + alpha * L_CMCM`. The code-matching term is evaluated whenever
/// distributions are present (for reporting) but only enters the total for
/// `alpha > 0`.
pub fn total_loss(g: &mut Graph, batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossTerms> {
    if !(cfg.alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {}", cfg.alpha)));
    }
    let mms = mms_loss(g, batch.z_a, batch.z_b, cfg.margin, cfg.symmetric)?;
    let cmcm = match (batch.p_a, batch.p_b) {
        (Some(pa), Some(pb)) => Some(cmcm_loss(g, pa, pb, cfg.symmetric)?),
        _ => None,
    };
    let total = match cmcm {
        Some(c) if cfg.alpha > 0.0 => {
            let w = g.scale(c, cfg.alpha);
            g.add(mms, w)?
        }
        _ => mms,
    };
    Ok(LossTerms { total, mms, cmcm })
}
