use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Concept, FeatureSequence, PairedDataset, PairedInstance};

const NAMES: [(&str, &str); 12] = [
    ("juggling", "juggles"),
    ("kicking", "kicks"),
    ("running", "runs"),
    ("swimming", "swims"),
    ("cooking", "cooks"),
    ("dancing", "dances"),
    ("climbing", "climbs"),
    ("singing", "sings"),
    ("rowing", "rows"),
    ("typing", "types"),
    ("painting", "paints"),
    ("skating", "skates"),
];

/// Synthetic dataset parameters.
///
/// Every position of an instance is generated as
/// `D_M (p_c + s) + noise_sigma * eps`, where `p_c` is the concept's base
/// prototype, `D_M` a fixed random rotation of modality `M`, and `s` an
/// instance offset shared by all positions and both modalities, with
/// standard deviation `instance_ratio * noise_sigma` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub concepts: usize,
    pub instances: usize,
    pub len_a: usize,
    pub len_b: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub instance_ratio: f64,
    /// Standard deviation of base prototype coordinates.
    pub prototype_scale: f64,
    /// Minimum distance between base prototypes; resampled until satisfied.
    pub min_separation: f64,
    /// Up to this many concepts besides the dominant one per instance.
    pub max_secondary: usize,
    /// Replace both rotations by the identity.
    pub identity_distortion: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            concepts: 8,
            instances: 2000,
            len_a: 9,
            len_b: 6,
            d_in: 12,
            noise_sigma: 0.1,
            seed: 0,
            instance_ratio: 15.0,
            prototype_scale: 3.0,
            min_separation: 2.0,
            max_secondary: 1,
            identity_distortion: false,
        }
    }
}

impl GeneratorConfig {
    pub fn new(concepts: usize, instances: usize, len_a: usize, len_b: usize, d_in: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            concepts,
            instances,
            len_a,
            len_b,
            d_in,
            noise_sigma,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(Error::Config(format!("need at least 2 concepts, got {}", self.concepts)));
        }
        if self.concepts > u16::MAX as usize {
            return Err(Error::Config(format!("too many concepts: {}", self.concepts)));
        }
        if self.instances < 2 {
            return Err(Error::Config(format!("need at least 2 instances, got {}", self.instances)));
        }
        for (name, len) in [("len_a", self.len_a), ("len_b", self.len_b), ("d_in", self.d_in)] {
            if len == 0 || len > u16::MAX as usize {
                return Err(Error::Config(format!("{name} = {len} out of range")));
            }
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("instance_ratio", self.instance_ratio),
            ("prototype_scale", self.prototype_scale),
            ("min_separation", self.min_separation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            scale * e
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn base_prototypes(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..1000 {
        let protos: Vec<Vec<f64>> = (0..cfg.concepts).map(|_| gaussian(rng, cfg.d_in, cfg.prototype_scale)).collect();
        let ok = (0..cfg.concepts)
            .all(|i| (i + 1..cfg.concepts).all(|j| distance(&protos[i], &protos[j]) >= cfg.min_separation));
        if ok {
            return Ok(protos);
        }
    }
    Err(Error::Config(format!(
        "could not place {} prototypes at separation {} in {} dimensions",
        cfg.concepts, cfg.min_separation, cfg.d_in
    )))
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v = gaussian(rng, d, 1.0);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

fn apply(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Positions per concept for one sequence: one for each secondary concept,
/// the rest for the dominant one, shuffled.
fn layout(dominant: u16, secondary: &[u16], len: usize, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let mut labels = secondary.to_vec();
    labels.resize(len, dominant);
    labels.shuffle(rng);
    labels
}

fn concept_set(labels: &[u16]) -> Vec<u16> {
    let mut s = labels.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Mode of the position labels; ties go to the lowest concept id.
pub(crate) fn dominant_label(labels: &[u16]) -> Option<u16> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(l, _)| l)
}

pub fn generate(cfg: &GeneratorConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_in;
    let protos = base_prototypes(cfg, &mut rng)?;
    let identity: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let (rot_a, rot_b) = if cfg.identity_distortion {
        (identity.clone(), identity)
    } else {
        (rotation(d, &mut rng), rotation(d, &mut rng))
    };

    let concepts: Vec<Concept> = protos
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let (name, token) = NAMES
                .get(c)
                .map(|&(n, t)| (n.to_string(), t.to_string()))
                .unwrap_or_else(|| (format!("concept{c}"), format!("word{c}")));
            Concept {
                id: c as u16,
                name,
                token,
                prototype_a: apply(&rot_a, p).into_iter().map(|x| x as f32).collect(),
                prototype_b: apply(&rot_b, p).into_iter().map(|x| x as f32).collect(),
            }
        })
        .collect();

    // Each modality must give the dominant concept strictly more positions
    // than any secondary one.
    let room = cfg.len_a.min(cfg.len_b).saturating_sub(2);
    let max_secondary = cfg.max_secondary.min(room).min(cfg.concepts - 1);
    let all: Vec<u16> = (0..cfg.concepts as u16).collect();
    let instance_sigma = cfg.instance_ratio * cfg.noise_sigma;

    let mut instances = Vec::with_capacity(cfg.instances);
    for id in 0..cfg.instances {
        let dominant = *all.choose(&mut rng).expect("at least two concepts");
        let k = rng.random_range(0..=max_secondary);
        let others: Vec<u16> = all.iter().copied().filter(|&c| c != dominant).collect();
        let secondary: Vec<u16> = others.choose_multiple(&mut rng, k).copied().collect();
        let offset = gaussian(&mut rng, d, instance_sigma);

        let emit = |len: usize, rot: &[Vec<f64>], rng: &mut ChaCha8Rng| {
            let labels = layout(dominant, &secondary, len, rng);
            let mut features = Vec::with_capacity(len * d);
            for &c in &labels {
                let latent: Vec<f64> = protos[c as usize].iter().zip(&offset).map(|(p, s)| p + s).collect();
                let clean = apply(rot, &latent);
                let noise = gaussian(rng, d, cfg.noise_sigma);
                features.extend(clean.iter().zip(&noise).map(|(x, e)| (x + e) as f32));
            }
            FeatureSequence { features, labels }
        };
        let a = emit(cfg.len_a, &rot_a, &mut rng);
        let b = emit(cfg.len_b, &rot_b, &mut rng);
        assert_eq!(concept_set(&a.labels), concept_set(&b.labels), "paired sequences must share concepts");
        assert_eq!(dominant_label(&a.labels), Some(dominant));
        assert_eq!(dominant_label(&b.labels), Some(dominant));
        instances.push(PairedInstance {
            id: id as u64,
            label: dominant,
            a,
            b,
        });
    }
    PairedDataset::new(d, concepts, instances, Some(cfg.clone()))
}
