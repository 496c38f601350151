//! Acceptance suite. Every test writes one PASS/FAIL line to stderr
//! (bypassing the test harness capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossmodal::analysis::{
    codeword_stats, encode, evaluate, label_agreement, localize, partition_statistic, ranks, retrieval_metrics,
    Direction, LabelSource,
};
use crossmodal::codebook::{CodeAssignment, Codebook};
use crossmodal::data::{generate, GeneratorConfig, PairedDataset};
use crossmodal::diagnostics::{check_gradients, check_model_config, GRAD_CHECK_TOLERANCE};
use crossmodal::losses::{cmcm_loss, code_similarity, code_similarity_matrix, mms_loss};
use crossmodal::numerics::{Graph, Tensor};
use crossmodal::training::{train, Checkpoint, Init, TrainConfig, Trainer};
use crossmodal::{GridShape, Modality};

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] criterion {criterion}: {status} ({detail})");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Naive oracles.

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn naive_nearest(h: &[f64], cb: &Tensor) -> usize {
    let mut best = 0;
    for v in 1..cb.rows() {
        if sq_dist(h, cb.row(v)) < sq_dist(h, cb.row(best)) {
            best = v;
        }
    }
    best
}

fn naive_softmin(h: &[f64], cb: &Tensor) -> Vec<f64> {
    let d: Vec<f64> = (0..cb.rows()).map(|v| sq_dist(h, cb.row(v)).sqrt()).collect();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|x| (lo - x).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn naive_code_similarity(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..p.len() {
        s += p[k] * q[k].max(1e-12).ln() + q[k] * p[k].max(1e-12).ln();
    }
    s
}

fn naive_contrastive(scores: &[Vec<f64>], margin: f64, symmetric: bool) -> f64 {
    let n = scores.len();
    let one_way = |at: &dyn Fn(usize, usize) -> f64| {
        let mut total = 0.0;
        for i in 0..n {
            let pos = (at(i, i) - margin).exp();
            let mut denom = pos;
            for j in 0..n {
                if j != i {
                    denom += at(i, j).exp();
                }
            }
            total += -(pos / denom).ln();
        }
        total / n as f64
    };
    let forward = one_way(&|i, j| scores[i][j]);
    if !symmetric {
        return forward;
    }
    let backward = one_way(&|i, j| scores[j][i]);
    0.5 * (forward + backward)
}

fn naive_rank(q: &Tensor, c: &Tensor, i: usize) -> usize {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let own = dot(q.row(i), c.row(i));
    let mut r = 1;
    for j in 0..c.rows() {
        let s = dot(q.row(i), c.row(j));
        if s > own || (s == own && j < i) {
            r += 1;
        }
    }
    r
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn random_distributions(r: &mut ChaCha8Rng, n: usize, v: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * v);
    for _ in 0..n {
        let w: Vec<f64> = (0..v).map(|_| (2.0 * r.random::<f64>() - 1.0).exp()).collect();
        let s: f64 = w.iter().sum();
        data.extend(w.iter().map(|x| x / s));
    }
    Tensor::matrix(n, v, data).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness.

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_target = String::new();
    let mut checked = 0;
    for n in [2, 3, 4] {
        let suite = check_gradients(100 + n as u64, n, 16).unwrap();
        for e in &suite.entries {
            checked += 1;
            if e.max_rel_error > worst {
                worst = e.max_rel_error;
                worst_target = format!("N={n} {}", e.target);
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < GRAD_CHECK_TOLERANCE && elapsed < Duration::from_secs(60);
    verdict(
        "1 gradient correctness",
        pass,
        &format!("{checked} targets, max rel error {worst:.2e} at {worst_target}, {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence.

const ORACLE_CASES: usize = 128;
const ORACLE_TOL: f64 = 1e-10;

#[test]
fn criterion_2_oracle_equivalence() {
    let mut r = rng(2);
    let mut index_mismatches = 0usize;
    let mut dist_err = 0.0f64;
    let mut sim_err = 0.0f64;
    let mut loss_err = 0.0f64;
    let mut rank_mismatches = 0usize;

    for case in 0..ORACLE_CASES {
        let v = r.random_range(2..12);
        let d = r.random_range(1..6);
        let len = r.random_range(1..7);
        let cb = Codebook::init(v, d, 0.99, 100, case as u64).unwrap();
        let h = Tensor::randn(&[len, d], &mut r);

        let codes = cb.nearest_rows(&h).unwrap();
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let (_, graph_codes) = cb.quantize(&mut g, hv).unwrap();
        for l in 0..len {
            let want = naive_nearest(h.row(l), cb.codewords());
            index_mismatches += usize::from(codes[l] != want) + usize::from(graph_codes[l] != want);
        }

        let probs = cb.code_probabilities(&mut g, hv).unwrap();
        let seq = cb.sequence_distribution(&mut g, hv).unwrap();
        let mut mean = vec![0.0; v];
        for l in 0..len {
            let want = naive_softmin(h.row(l), cb.codewords());
            for k in 0..v {
                dist_err = dist_err.max((g.value(probs).get2(l, k) - want[k]).abs());
                mean[k] += want[k] / len as f64;
            }
        }
        for k in 0..v {
            dist_err = dist_err.max((g.value(seq).get2(0, k) - mean[k]).abs());
        }

        let n = r.random_range(1..6);
        let pa = random_distributions(&mut r, n, v);
        let pb = random_distributions(&mut r, n, v);
        let mut g = Graph::new();
        let a = g.constant(pa.clone());
        let b = g.constant(pb.clone());
        let s = code_similarity_matrix(&mut g, a, b).unwrap();
        let mut naive_s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                naive_s[i][j] = naive_code_similarity(pa.row(i), pb.row(j));
                sim_err = sim_err.max((g.value(s).get2(i, j) - naive_s[i][j]).abs());
                sim_err = sim_err.max((code_similarity(pa.row(i), pb.row(j)).unwrap() - naive_s[i][j]).abs());
            }
        }
        for symmetric in [false, true] {
            let cm = cmcm_loss(&mut g, a, b, symmetric).unwrap();
            loss_err = loss_err.max((g.value(cm).item() - naive_contrastive(&naive_s, 0.0, symmetric)).abs());
        }

        let dz = r.random_range(1..6);
        let za = Tensor::randn(&[n, dz], &mut r);
        let zb = Tensor::randn(&[n, dz], &mut r);
        let margin = r.random_range(0.0..0.5);
        let sims: Vec<Vec<f64>> = rows(&za)
            .iter()
            .map(|x| rows(&zb).iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
            .collect();
        for symmetric in [false, true] {
            let mut g = Graph::new();
            let a = g.constant(za.clone());
            let b = g.constant(zb.clone());
            let l = mms_loss(&mut g, a, b, margin, symmetric).unwrap();
            loss_err = loss_err.max((g.value(l).item() - naive_contrastive(&sims, margin, symmetric)).abs());
        }

        // Quantized scores give ties, exercising the tie rule.
        let m = r.random_range(1..20);
        let q = Tensor::randn(&[m, 2], &mut r).map(|x| (x * 2.0).round());
        let c = Tensor::randn(&[m, 2], &mut r).map(|x| (x * 2.0).round());
        let got = ranks(&q, &c).unwrap();
        for i in 0..m {
            rank_mismatches += usize::from(got[i] != naive_rank(&q, &c, i));
        }
    }

    let pass = index_mismatches == 0
        && rank_mismatches == 0
        && dist_err <= ORACLE_TOL
        && sim_err <= ORACLE_TOL
        && loss_err <= ORACLE_TOL;
    verdict(
        "2 oracle equivalence",
        pass,
        &format!(
            "{ORACLE_CASES} cases: index mismatches {index_mismatches}, rank mismatches {rank_mismatches}, \
             distribution err {dist_err:.1e}, similarity err {sim_err:.1e}, loss err {loss_err:.1e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. EMA convergence.

#[test]
fn criterion_3_ema_convergence() {
    let mut r = rng(3);
    let (v, d) = (8, 5);
    let mut cb = Codebook::init(v, d, 0.99, 10_000, 3).unwrap();
    // Codeword v always receives the same four vectors.
    let groups: Vec<Tensor> = (0..v).map(|_| Tensor::randn(&[4, d], &mut r)).collect();
    let codes: Vec<usize> = (0..v).flat_map(|k| [k; 4]).collect();
    let vectors = Tensor::vstack(&groups.iter().collect::<Vec<_>>()).unwrap();
    for _ in 0..1000 {
        cb.ema_update(&codes, &vectors).unwrap();
    }
    let mut worst = 0.0f64;
    for (k, grp) in groups.iter().enumerate() {
        for j in 0..d {
            let mean = (0..4).map(|i| grp.get2(i, j)).sum::<f64>() / 4.0;
            worst = worst.max((cb.codeword(k)[j] - mean).abs());
        }
    }
    let pass = worst < 1e-3;
    verdict("3 EMA convergence", pass, &format!("max |e - mean| after 1000 steps = {worst:.2e}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Dead-code reset.

fn starve(steps: u64) -> (Codebook, bool) {
    let mut cb = Codebook::init(4, 3, 0.99, 100, 4).unwrap();
    let mut r = rng(4);
    let vecs = Tensor::randn(&[3, 3], &mut r);
    let mut reset = false;
    for _ in 0..steps {
        cb.ema_update(&[0, 1, 2], &vecs).unwrap();
        let out = cb.reset_dead(&mut r);
        reset |= out.reset.iter().any(|&(v, _)| v == 3);
    }
    (cb, reset)
}

#[test]
fn criterion_4_dead_code_reset() {
    let (_, at_99) = starve(99);
    let (cb, at_100) = starve(100);
    let copied = (0..3).any(|src| cb.codeword(3) == cb.codeword(src));
    let pass = !at_99 && at_100 && copied;
    verdict(
        "4 dead-code reset",
        pass,
        &format!("reset after 99 starved steps: {at_99}, after 100: {at_100}, copies an active codeword: {copied}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Synthetic runs shared by criteria 5 to 7.

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_PAIRS: usize = 2000;
const TEST_PAIRS: usize = 500;

fn acceptance_data(seed: u64) -> (PairedDataset, PairedDataset) {
    let cfg = GeneratorConfig {
        instances: TRAIN_PAIRS + TEST_PAIRS,
        seed,
        ..GeneratorConfig::default()
    };
    generate(&cfg).unwrap().split_at(TRAIN_PAIRS).unwrap()
}

fn warm_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::warmstart();
    cfg.seed = seed;
    cfg.learning_rate = 1e-2;
    cfg.symmetric = true;
    cfg.model.encoder.d_hidden = 64;
    cfg
}

fn full_config(seed: u64, alpha: f64, use_continuous: bool) -> TrainConfig {
    let warm = warm_config(seed);
    let mut cfg = TrainConfig::full();
    cfg.seed = seed;
    cfg.learning_rate = 1e-3;
    cfg.symmetric = true;
    cfg.model = warm.model;
    cfg.alpha = alpha;
    cfg.use_continuous = use_continuous;
    cfg
}

/// Least-squares one-vs-rest probe on sequence-mean raw features.
fn linear_probe(train_ds: &PairedDataset, test: &PairedDataset, m: Modality) -> f64 {
    let feats = |ds: &PairedDataset| -> (Vec<Vec<f64>>, Vec<usize>) {
        ds.instances
            .iter()
            .map(|inst| {
                let s = inst.sequence(m);
                let mut row = vec![0.0; ds.d_in + 1];
                for l in 0..s.len() {
                    for (j, x) in s.row(l, ds.d_in).iter().enumerate() {
                        row[j] += f64::from(*x) / s.len() as f64;
                    }
                }
                row[ds.d_in] = 1.0;
                (row, inst.label as usize)
            })
            .unzip()
    };
    let c = train_ds.num_concepts();
    let (x, y) = feats(train_ds);
    let k = x[0].len();
    // Augmented normal equations [X^T X | X^T Y], solved by Gauss-Jordan.
    let mut a = vec![vec![0.0; k + c]; k];
    for (row, &label) in x.iter().zip(&y) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += row[i] * row[j];
            }
            a[i][k + label] += row[i];
        }
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= d);
        for i in 0..k {
            if i != col {
                let f = a[i][col];
                let pivot_row = a[col].clone();
                a[i].iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    let (xt, yt) = feats(test);
    let correct = xt
        .iter()
        .zip(&yt)
        .filter(|(row, &label)| {
            let score = |o: usize| (0..k).map(|i| row[i] * a[i][k + o]).sum::<f64>();
            (0..c).max_by(|&p, &q| score(p).total_cmp(&score(q))).unwrap() == label
        })
        .count();
    correct as f64 / yt.len() as f64
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    r1: [f64; 2],
    partition: f64,
    agreement: f64,
    compared: usize,
}

impl Outcome {
    fn mean_r1(&self) -> f64 {
        0.5 * (self.r1[0] + self.r1[1])
    }
}

struct SeedRuns {
    probe: [f64; 2],
    warm_r1: [f64; 2],
    combined: Outcome,
    no_matching: Outcome,
    discrete_only: Outcome,
    first_loss: f64,
    last_loss: f64,
    /// Warm start plus the combined full phase.
    protocol_time: Duration,
}

fn outcome(ck: &Checkpoint, cfg: &TrainConfig, test: &PairedDataset) -> Outcome {
    let enc = encode(&ck.model, test, cfg.flags()).unwrap();
    let [ab, ba] = evaluate(&enc).unwrap();
    let stats = codeword_stats(&ck.model, test, &enc, LabelSource::Instance).unwrap();
    let (agreement, compared) = label_agreement(&stats).map(|a| (a.agreement, a.compared)).unwrap_or((0.0, 0));
    Outcome {
        r1: [ab.r1, ba.r1],
        partition: partition_statistic(&stats, 0.9).unwrap_or(f64::NAN),
        agreement,
        compared,
    }
}

fn run_seed(seed: u64) -> SeedRuns {
    let (train_ds, test) = acceptance_data(seed);
    let probe = [
        linear_probe(&train_ds, &test, Modality::A),
        linear_probe(&train_ds, &test, Modality::B),
    ];

    let start = Instant::now();
    let wcfg = warm_config(seed);
    let (warm, warm_trace) = train(&train_ds, &wcfg, Init::Fresh).unwrap();
    let enc = encode(&warm.model, &test, wcfg.flags()).unwrap();
    let [ab, ba] = evaluate(&enc).unwrap();

    let cfg = full_config(seed, 0.1, true);
    let (ck, full_trace) = train(&train_ds, &cfg, Init::WarmStart(warm.clone())).unwrap();
    let combined = outcome(&ck, &cfg, &test);
    let protocol_time = start.elapsed();

    let cfg0 = full_config(seed, 0.0, true);
    let (ck0, _) = train(&train_ds, &cfg0, Init::WarmStart(warm.clone())).unwrap();
    let cfgd = full_config(seed, 0.1, false);
    let (ckd, _) = train(&train_ds, &cfgd, Init::WarmStart(warm)).unwrap();

    SeedRuns {
        probe,
        warm_r1: [ab.r1, ba.r1],
        combined,
        no_matching: outcome(&ck0, &cfg0, &test),
        discrete_only: outcome(&ckd, &cfgd, &test),
        first_loss: warm_trace[0].loss,
        last_loss: full_trace.last().unwrap().loss,
        protocol_time,
    }
}

fn runs() -> &'static [SeedRuns] {
    static RUNS: OnceLock<Vec<SeedRuns>> = OnceLock::new();
    RUNS.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s)).collect())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_5_synthetic_retrieval() {
    let runs = runs();
    let probe_ok = runs.iter().all(|r| r.probe.iter().all(|&p| p > 0.95));
    let worst_probe = runs.iter().flat_map(|r| r.probe).fold(1.0, f64::min);
    verdict(
        "5a task learnability",
        probe_ok,
        &format!("worst linear-probe label accuracy on raw features {worst_probe:.3}"),
    );

    let trace_ok = runs.iter().all(|r| r.last_loss < 0.5 * r.first_loss);
    verdict(
        "5b training loss",
        trace_ok,
        &runs
            .iter()
            .map(|r| format!("{:.3} -> {:.3}", r.first_loss, r.last_loss))
            .collect::<Vec<_>>()
            .join(", "),
    );

    let full_ab = mean(runs.iter().map(|r| r.combined.r1[0]));
    let full_ba = mean(runs.iter().map(|r| r.combined.r1[1]));
    let full = mean(runs.iter().map(|r| r.combined.mean_r1()));
    let warm = mean(runs.iter().map(|r| 0.5 * (r.warm_r1[0] + r.warm_r1[1])));
    let time: Duration = runs.iter().map(|r| r.protocol_time).sum();
    let pass = full_ab >= 0.90 && full_ba >= 0.90 && full >= warm && time < Duration::from_secs(600);
    verdict(
        "5 synthetic retrieval",
        pass,
        &format!(
            "full R@1 A->B {full_ab:.3} B->A {full_ba:.3}, mean {full:.3} vs warm start {warm:.3}, {:.0}s",
            time.as_secs_f64()
        ),
    );
    assert!(probe_ok && trace_ok && pass);
}

#[test]
fn criterion_6_partition() {
    let runs = runs();
    let chance = 1.0 / 8.0;
    let partition_ok = runs.iter().all(|r| r.combined.partition < r.no_matching.partition);
    let agreement_ok = runs.iter().all(|r| r.combined.compared > 0 && r.combined.agreement > 2.0 * chance);
    let detail = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| {
            format!(
                "seed {s}: partition {:.3} vs {:.3} without matching, agreement {:.3} over {}",
                r.combined.partition, r.no_matching.partition, r.combined.agreement, r.combined.compared
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let pass = partition_ok && agreement_ok;
    verdict("6 partition", pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_7_ablation_direction() {
    let runs = runs();
    let combined = mean(runs.iter().map(|r| r.combined.mean_r1()));
    let no_matching = mean(runs.iter().map(|r| r.no_matching.mean_r1()));
    let discrete = mean(runs.iter().map(|r| r.discrete_only.mean_r1()));
    let matching_ok = no_matching < combined;
    let continuous_ok = discrete < combined;
    verdict(
        "7a ablation alpha=0",
        matching_ok,
        &format!("mean R@1 {no_matching:.4} with alpha=0 vs {combined:.4} with alpha=0.1"),
    );
    verdict(
        "7b ablation use_continuous=false",
        continuous_ok,
        &format!("mean R@1 {discrete:.4} discrete only vs {combined:.4} combined"),
    );
    assert!(matching_ok && continuous_ok);
}

// ---------------------------------------------------------------------------
// 8. Invariant suites.

fn property<S: Strategy>(name: &str, failures: &mut Vec<String>, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) {
    let mut runner = TestRunner::new(Config {
        cases: 128,
        failure_persistence: None,
        ..Config::default()
    });
    if let Err(e) = runner.run(&strategy, test) {
        failures.push(format!("{name}: {e}"));
    }
}

fn small_dataset(seed: u64, concepts: usize, instances: usize, len_a: usize, len_b: usize) -> PairedDataset {
    generate(&GeneratorConfig::new(concepts, instances, len_a, len_b, 4, 0.1, seed)).unwrap()
}

#[test]
fn criterion_8_invariant_suites() {
    let mut failures = Vec::new();
    let mut names = Vec::new();

    names.push("loss nonnegativity");
    property(
        "loss nonnegativity",
        &mut failures,
        (any::<u64>(), 1usize..8, 1usize..6, -1.0f64..1.0, any::<bool>()),
        |(seed, n, v, margin, symmetric)| {
            let mut r = rng(seed);
            let mut g = Graph::new();
            let za = g.constant(Tensor::randn(&[n, 3], &mut r).map(|x| 3.0 * x));
            let zb = g.constant(Tensor::randn(&[n, 3], &mut r).map(|x| 3.0 * x));
            let pa = g.constant(random_distributions(&mut r, n, v + 1));
            let pb = g.constant(random_distributions(&mut r, n, v + 1));
            let mms = mms_loss(&mut g, za, zb, margin, symmetric).unwrap();
            let cm = cmcm_loss(&mut g, pa, pb, symmetric).unwrap();
            prop_assert!(g.value(mms).item() >= 0.0);
            prop_assert!(g.value(cm).item() >= 0.0);
            Ok(())
        },
    );

    names.push("distribution normalization");
    property(
        "distribution normalization",
        &mut failures,
        (any::<u64>(), 2usize..20, 1usize..6, prop::collection::vec(1usize..6, 1..5)),
        |(seed, v, d, lens)| {
            let mut r = rng(seed);
            let cb = Codebook::init(v, d, 0.99, 100, seed).unwrap();
            let total: usize = lens.iter().sum();
            let mut offsets = vec![0];
            for l in &lens {
                offsets.push(offsets.last().unwrap() + l);
            }
            let mut g = Graph::new();
            let h = g.constant(Tensor::randn(&[total, d], &mut r).map(|x| 4.0 * x));
            let p = cb.sequence_distributions(&mut g, h, &offsets).unwrap();
            for i in 0..lens.len() {
                let row = g.value(p).row(i);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            Ok(())
        },
    );

    names.push("Gibbs bound");
    property("Gibbs bound", &mut failures, (any::<u64>(), 1usize..30), |(seed, v)| {
        let mut r = rng(seed);
        let p = random_distributions(&mut r, 1, v);
        let q = random_distributions(&mut r, 1, v);
        let cross = code_similarity(p.row(0), q.row(0)).unwrap();
        let selfs = 0.5 * (code_similarity(p.row(0), p.row(0)).unwrap() + code_similarity(q.row(0), q.row(0)).unwrap());
        prop_assert!(cross <= selfs + 1e-12);
        Ok(())
    });

    names.push("R@K monotonicity");
    property("R@K monotonicity", &mut failures, (any::<u64>(), 1usize..40, 1usize..5), |(seed, n, d)| {
        let mut r = rng(seed);
        let za = Tensor::randn(&[n, d], &mut r);
        let zb = Tensor::randn(&[n, d], &mut r);
        for dir in Direction::BOTH {
            let rep = retrieval_metrics(&za, &zb, dir).unwrap();
            prop_assert!(rep.r1 <= rep.r5 && rep.r5 <= rep.r10 && rep.r10 <= 1.0);
            prop_assert!(rep.median_rank >= 1.0 && rep.mean_rank <= n as f64);
        }
        Ok(())
    });

    names.push("localization partition");
    property(
        "localization partition",
        &mut failures,
        (1usize..10, prop::collection::vec(1usize..5, 1..4)).prop_flat_map(|(v, dims)| {
            let len: usize = dims.iter().product();
            (Just(v), Just(dims), prop::collection::vec(0..v, len))
        }),
        |(v, dims, codes)| {
            let assignment = CodeAssignment {
                instance: 7,
                modality: Modality::A,
                codes: codes.clone(),
                grid: GridShape(dims.clone()),
            };
            let masks: Vec<_> = (0..v).map(|c| localize(&assignment, c, v).unwrap()).collect();
            for l in 0..codes.len() {
                prop_assert_eq!(masks.iter().filter(|m| m.mask[l]).count(), 1);
            }
            let marked: usize = masks.iter().map(|m| m.marked().len()).sum();
            prop_assert_eq!(marked, codes.len());
            Ok(())
        },
    );

    names.push("dataset round trip");
    property(
        "dataset round trip",
        &mut failures,
        (any::<u64>(), 2usize..5, 2usize..6, 1usize..5, 1usize..5),
        |(seed, c, n, la, lb)| {
            let ds = small_dataset(seed, c, n, la, lb);
            let bytes = ds.to_bytes().unwrap();
            let back = PairedDataset::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            Ok(())
        },
    );

    names.push("checkpoint round trip");
    property("checkpoint round trip", &mut failures, (any::<u64>(), any::<bool>()), |(seed, full)| {
        let mut cfg = if full { TrainConfig::full() } else { TrainConfig::warmstart() };
        cfg.model = check_model_config(8);
        cfg.allow_cold_start = true;
        cfg.seed = seed;
        let ds = generate(&GeneratorConfig::new(3, 4, 4, 3, 5, 0.1, seed)).unwrap();
        let mut trainer = Trainer::new(cfg, Init::Fresh).unwrap();
        trainer.train_step(&ds, &[0, 1, 2]).unwrap();
        let bytes = trainer.checkpoint().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        Ok(())
    });

    let pass = failures.is_empty();
    let detail = if pass {
        format!("{} properties x 128 cases", names.len())
    } else {
        failures.join("; ")
    };
    verdict("8 invariant suites", pass, &detail);
    assert!(pass, "{detail}");
}
