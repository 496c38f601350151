//! Two-phase training: a continuous-only warm start followed by joint
//! training of the discrete path.

mod adam;
mod checkpoint;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::NormMode;
use crate::data::{batches, PairedDataset};
use crate::encoders::{config_hash, EmbedFlags, Model, ModelConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchEmbeddings, LossConfig, DEFAULT_ALPHA, DEFAULT_MARGIN};
use crate::numerics::{Graph, Tensor};

pub use adam::{Adam, AdamHyper, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const WARMSTART_LR: f64 = 1e-3;
pub const JOINT_LR: f64 = 1e-4;
pub const DEFAULT_BATCH: usize = 64;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const RESET_SALT: u64 = 0x5245_5345_5444_4541;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Continuous path only, trained with the margin softmax loss.
    Warmstart,
    /// Both paths with the combined objective.
    Full,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Warmstart => "warmstart",
            Phase::Full => "full",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmstart" => Ok(Phase::Warmstart),
            "full" => Ok(Phase::Full),
            other => Err(Error::Config(format!("unknown phase {other:?} (expected warmstart or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub model: ModelConfig,
    pub alpha: f64,
    pub margin: f64,
    pub symmetric: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub use_vq: bool,
    pub use_continuous: bool,
    /// Keep the per-position network and the high-level head fixed.
    pub freeze_low: bool,
    /// Permit the full phase from a fresh initialization.
    pub allow_cold_start: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    pub fn warmstart() -> Self {
        Self {
            phase: Phase::Warmstart,
            model: ModelConfig::default(),
            alpha: DEFAULT_ALPHA,
            margin: DEFAULT_MARGIN,
            symmetric: false,
            learning_rate: WARMSTART_LR,
            batch_size: DEFAULT_BATCH,
            epochs: 15,
            use_vq: false,
            use_continuous: true,
            freeze_low: false,
            allow_cold_start: false,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            phase: Phase::Full,
            learning_rate: JOINT_LR,
            use_vq: true,
            ..Self::warmstart()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.flags().validate()?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be finite, got {}", self.margin)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        Ok(())
    }

    /// Embedding switches in effect; the warm start never uses the discrete
    /// path.
    pub fn flags(&self) -> EmbedFlags {
        match self.phase {
            Phase::Warmstart => EmbedFlags::CONTINUOUS_ONLY,
            Phase::Full => EmbedFlags {
                use_vq: self.use_vq,
                use_continuous: self.use_continuous,
            },
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            alpha: match self.phase {
                Phase::Warmstart => 0.0,
                Phase::Full => self.alpha,
            },
            symmetric: self.symmetric,
        }
    }
}

/// How training starts.
#[derive(Debug, Clone)]
pub enum Init {
    Fresh,
    /// Take encoder weights, normalization statistics and codebook from a
    /// warm-start checkpoint; the optimizer and step counter start over.
    WarmStart(Checkpoint),
    /// Continue an interrupted run of the same phase.
    Resume(Checkpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub steps: u64,
    pub loss: f64,
    pub mms: f64,
    pub cmcm: Option<f64>,
    /// Fraction of codewords assigned at least once during the epoch.
    pub codebook_usage: Option<f64>,
    pub resets: usize,
}

pub const METRICS_HEADER: &str = "epoch,steps,loss,mms,cmcm,codebook_usage,resets";

pub fn metrics_csv(trace: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in trace {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{}",
            m.epoch,
            m.steps,
            m.loss,
            m.mms,
            opt(m.cmcm),
            opt(m.codebook_usage),
            m.resets
        )
        .expect("write to string");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub mms: f64,
    pub cmcm: Option<f64>,
    pub resets: usize,
}

/// Training state: model, optimizer, and counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    pub epoch: u64,
}

fn check_hash(config: &TrainConfig, ckpt: &Checkpoint) -> Result<()> {
    let want = config_hash(&config.model);
    if ckpt.config_hash != want {
        return Err(Error::Incompatible(format!(
            "checkpoint architecture hash {:016x} differs from configured {:016x}",
            ckpt.config_hash, want
        )));
    }
    Ok(())
}

fn fresh_optimizer(model: &Model) -> Adam {
    let shapes: Vec<&[usize]> = model.parameters().iter().map(|(_, _, t)| t.shape()).collect();
    Adam::new(&shapes)
}

impl Trainer {
    pub fn new(config: TrainConfig, init: Init) -> Result<Self> {
        config.validate()?;
        match init {
            Init::Fresh => {
                if config.phase == Phase::Full && !config.allow_cold_start {
                    return Err(Error::Config(
                        "full phase needs a warm-start checkpoint (or allow_cold_start)".into(),
                    ));
                }
                let model = Model::new(config.model.clone(), config.seed)?;
                let optimizer = fresh_optimizer(&model);
                Ok(Self {
                    config,
                    model,
                    optimizer,
                    step: 0,
                    epoch: 0,
                })
            }
            Init::WarmStart(ckpt) => {
                check_hash(&config, &ckpt)?;
                let model = ckpt.model;
                let optimizer = fresh_optimizer(&model);
                Ok(Self {
                    config,
                    model,
                    optimizer,
                    step: 0,
                    epoch: 0,
                })
            }
            Init::Resume(ckpt) => {
                check_hash(&config, &ckpt)?;
                if ckpt.config.phase != config.phase {
                    return Err(Error::Incompatible(format!(
                        "cannot resume a {:?} checkpoint in the {:?} phase",
                        ckpt.config.phase, config.phase
                    )));
                }
                Ok(Self {
                    config,
                    model: ckpt.model,
                    optimizer: ckpt.optimizer,
                    step: ckpt.step,
                    epoch: ckpt.epoch,
                })
            }
        }
    }

    /// Which parameters the optimizer may change, in parameter order.
    pub fn trainable(&self) -> Vec<bool> {
        self.model
            .parameters()
            .iter()
            .map(|(_, group, _)| !(self.config.freeze_low && matches!(group, ParamGroup::Fine | ParamGroup::High)))
            .collect()
    }

    /// One optimization step on the given instance indices. Returns the step
    /// metrics and the codewords assigned in the step.
    pub fn train_step(&mut self, ds: &PairedDataset, indices: &[usize]) -> Result<(StepMetrics, Vec<usize>)> {
        let flags = self.config.flags();
        let batch_a = ds.batch(indices, crate::Modality::A)?;
        let batch_b = ds.batch(indices, crate::Modality::B)?;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let out = self.model.forward(&mut g, &bound, &batch_a, &batch_b, flags, NormMode::Train, None)?;
        let embeddings = BatchEmbeddings {
            z_a: out.a.z,
            z_b: out.b.z,
            p_a: out.a.distributions,
            p_b: out.b.distributions,
        };
        let terms = total_loss(&mut g, &embeddings, &self.config.loss())?;
        let loss = g.value(terms.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {} (epoch {}, batch of {})",
                self.step,
                self.epoch,
                indices.len()
            )));
        }
        let grads = g.backward(terms.total)?;
        let vars: Vec<_> = bound.0.vars().into_iter().chain(bound.1.vars()).collect();
        let grad_tensors: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        if let Some(k) = grad_tensors.iter().position(|t| t.data().iter().any(|x| !x.is_finite())) {
            let name = self.model.parameters()[k].0.clone();
            return Err(Error::NonFinite(format!("gradient of {name} at step {}", self.step)));
        }
        let trainable = self.trainable();
        let lr = self.config.learning_rate;
        {
            let mut params = self.model.parameters_mut();
            self.optimizer.step(&mut params, &grad_tensors, &trainable, lr)?;
        }

        let mut metrics = StepMetrics {
            loss,
            mms: g.value(terms.mms).item(),
            cmcm: terms.cmcm.map(|c| g.value(c).item()),
            resets: 0,
        };
        let mut assigned = Vec::new();
        if flags.use_vq {
            let (sa, sb) = (out.a.shared.expect("vq path"), out.b.shared.expect("vq path"));
            let vectors = Tensor::vstack(&[g.value(sa), g.value(sb)])?;
            assigned = out.a.codes.expect("vq path");
            assigned.extend(out.b.codes.expect("vq path"));
            self.model.codebook.ema_update(&assigned, &vectors)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ RESET_SALT);
            rng.set_stream(self.step);
            metrics.resets = self.model.codebook.reset_dead(&mut rng).reset.len();
        }
        self.step += 1;
        Ok((metrics, assigned))
    }

    /// One pass over `ds` in seeded batch order.
    pub fn run_epoch(&mut self, ds: &PairedDataset) -> Result<EpochMetrics> {
        let order = batches(ds.len(), self.config.batch_size, self.config.seed ^ SHUFFLE_SALT, self.epoch)?;
        let mut sum = (0.0, 0.0, 0.0);
        let mut has_cmcm = false;
        let mut used = BTreeSet::new();
        let mut resets = 0;
        for indices in &order {
            let (m, codes) = self.train_step(ds, indices)?;
            sum.0 += m.loss;
            sum.1 += m.mms;
            if let Some(c) = m.cmcm {
                sum.2 += c;
                has_cmcm = true;
            }
            resets += m.resets;
            used.extend(codes);
        }
        let n = order.len() as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            steps: order.len() as u64,
            loss: sum.0 / n,
            mms: sum.1 / n,
            cmcm: has_cmcm.then(|| sum.2 / n),
            codebook_usage: self
                .config
                .flags()
                .use_vq
                .then(|| used.len() as f64 / self.model.codebook.size() as f64),
            resets,
        };
        log::info!(
            "epoch {} loss {:.4} mms {:.4} usage {:?}",
            metrics.epoch,
            metrics.loss,
            metrics.mms,
            metrics.codebook_usage
        );
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs epochs until `config.epochs` have been completed in total.
    pub fn run(&mut self, ds: &PairedDataset) -> Result<Vec<EpochMetrics>> {
        if ds.d_in != self.config.model.encoder.d_in {
            return Err(Error::dim(
                "train",
                format!("dataset width {} vs encoder input {}", ds.d_in, self.config.model.encoder.d_in),
            ));
        }
        let mut trace = Vec::new();
        while self.epoch < self.config.epochs {
            trace.push(self.run_epoch(ds)?);
        }
        Ok(trace)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            config_hash: config_hash(&self.config.model),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            epoch: self.epoch,
        }
    }
}

/// Trains from `init` and returns the final checkpoint with the per-epoch
/// trace.
pub fn train(ds: &PairedDataset, config: &TrainConfig, init: Init) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(config.clone(), init)?;
    let trace = trainer.run(ds)?;
    Ok((trainer.checkpoint(), trace))
}
