//! Finite-difference audit of the training objective.
//!
//! Checks the margin softmax loss with respect to both embedding matrices,
//! the code matching loss with respect to distribution logits, and the full
//! encode-then-loss pipeline with respect to every encoder parameter. The
//! pipeline uses frozen quantization offsets taken at the base point, so the
//! checked derivative is the straight-through gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codebook::{CodebookConfig, NormMode};
use crate::data::{generate, GeneratorConfig};
use crate::encoders::{EmbedFlags, EncoderConfig, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{cmcm_loss, mms_loss, total_loss, BatchEmbeddings, LossConfig};
use crate::modality::{GridShape, Modality};
use crate::numerics::{grad_check, Graph, Tensor, Var};

/// Largest acceptable relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub target: String,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSuite {
    pub batch: usize,
    pub codebook_size: usize,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckSuite {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < GRAD_CHECK_TOLERANCE
    }
}

fn push<F>(entries: &mut Vec<GradCheckEntry>, target: String, f: F, point: &Tensor) -> Result<()>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let r = grad_check(f, point, GRAD_CHECK_STEP)?;
    entries.push(GradCheckEntry {
        target,
        max_rel_error: r.max_rel_error,
        worst_coordinate: r.worst_coordinate,
        coordinates: r.coordinates,
    });
    Ok(())
}

/// Model used by the pipeline check: small enough to difference every
/// parameter.
pub fn check_model_config(codebook_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_in: 5,
            d_hidden: 6,
            d_shared: 4,
            d_embed: 5,
            fine_layers: 2,
            grid_a: GridShape(vec![2, 2]),
            grid_b: GridShape(vec![3]),
        },
        codebook: CodebookConfig {
            size: codebook_size,
            dim: 4,
            ..Default::default()
        },
    }
}

/// Runs every check on random inputs of `batch` pairs.
pub fn check_gradients(seed: u64, batch: usize, codebook_size: usize) -> Result<GradCheckSuite> {
    if batch < 1 {
        return Err(Error::Config("gradient check needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let d = 5;

    let za = Tensor::randn(&[batch, d], &mut rng);
    let zb = Tensor::randn(&[batch, d], &mut rng);
    for (name, point, other, a_side) in [("mms/z_a", &za, &zb, true), ("mms/z_b", &zb, &za, false)] {
        let f = |g: &mut Graph, x: Var| {
            let o = g.constant(other.clone());
            let (a, b) = if a_side { (x, o) } else { (o, x) };
            mms_loss(g, a, b, 0.2, false)
        };
        push(&mut entries, name.into(), f, point)?;
    }

    let la = Tensor::randn(&[batch, codebook_size], &mut rng);
    let lb = Tensor::randn(&[batch, codebook_size], &mut rng);
    for (name, point, other, a_side) in [("cmcm/logits_a", &la, &lb, true), ("cmcm/logits_b", &lb, &la, false)] {
        let f = |g: &mut Graph, x: Var| {
            let o = g.constant(other.clone());
            let px = g.softmax(x, 1)?;
            let po = g.softmax(o, 1)?;
            let (a, b) = if a_side { (px, po) } else { (po, px) };
            cmcm_loss(g, a, b, false)
        };
        push(&mut entries, name.into(), f, point)?;
    }

    let config = check_model_config(codebook_size);
    let model = Model::new(config.clone(), seed)?;
    let ds = generate(&GeneratorConfig::new(
        3,
        batch.max(2),
        config.encoder.grid_a.positions(),
        config.encoder.grid_b.positions(),
        config.encoder.d_in,
        0.3,
        seed,
    ))?;
    let idx: Vec<usize> = (0..batch).map(|i| i % ds.len()).collect();
    let ba = ds.batch(&idx, Modality::A)?;
    let bb = ds.batch(&idx, Modality::B)?;
    let flags = EmbedFlags::default();
    let loss_cfg = LossConfig {
        alpha: 1.0,
        ..Default::default()
    };

    // Quantization offsets at the base point.
    let (off_a, off_b) = {
        let mut m = model.clone();
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let out = m.forward(&mut g, &bound, &ba, &bb, flags, NormMode::Train, None)?;
        let offsets = |e: &crate::encoders::EmbedOutput| -> Result<Tensor> {
            let shared = g.value(e.shared.expect("vq path"));
            let q = model.codebook.gather(e.codes.as_deref().expect("vq path"))?;
            q.zip_map(shared, "offsets", |a, b| a - b)
        };
        (offsets(&out.a)?, offsets(&out.b)?)
    };

    let params = model.parameters();
    for (k, (name, _, value)) in params.iter().enumerate() {
        let f = |g: &mut Graph, x: Var| {
            let mut m = model.clone();
            let mut bound = m.bind(g);
            let n_a = bound.0.vars().len();
            if k < n_a {
                *bound.0.vars_mut()[k] = x;
            } else {
                *bound.1.vars_mut()[k - n_a] = x;
            }
            let out = m.forward(g, &bound, &ba, &bb, flags, NormMode::Train, Some((&off_a, &off_b)))?;
            let emb = BatchEmbeddings {
                z_a: out.a.z,
                z_b: out.b.z,
                p_a: out.a.distributions,
                p_b: out.b.distributions,
            };
            Ok(total_loss(g, &emb, &loss_cfg)?.total)
        };
        push(&mut entries, format!("pipeline/{name}"), f, value)?;
    }

    Ok(GradCheckSuite {
        batch,
        codebook_size,
        entries,
    })
}
