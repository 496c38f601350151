use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::codebook::CodebookConfig;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_linear(x: &[f64], l: &Linear) -> Vec<f64> {
    (0..l.d_out())
        .map(|o| l.bias.data()[o] + (0..l.d_in()).map(|i| x[i] * l.weight.get2(i, o)).sum::<f64>())
        .collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        d_in: 5,
        d_hidden: 6,
        d_shared: 3,
        d_embed: 4,
        fine_layers: 2,
        grid_a: GridShape(vec![2, 2]),
        grid_b: GridShape(vec![3]),
    }
}

fn embed_once(
    enc: &mut ModalityEncoder,
    batch: &SequenceBatch,
    cb: Option<&Codebook>,
    flags: EmbedFlags,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut g = Graph::new();
    let p = enc.bind(&mut g);
    let out = enc.embed(&mut g, &p, batch, cb, flags, NormMode::Train, Quantization::Nearest)?;
    Ok((g.value(out.z).clone(), out.codes))
}

#[test]
fn identity_fine_network_passes_input_through() {
    let mut cfg = small_cfg();
    cfg.d_hidden = cfg.d_in;
    cfg.fine_layers = 1;
    let mut enc = ModalityEncoder::new(Modality::A, &cfg, &mut rng(0)).unwrap();
    enc.fine[0] = Linear::identity(cfg.d_in);
    let x = Tensor::randn(&[4, cfg.d_in], &mut rng(1));
    let mut g = Graph::new();
    let p = enc.bind(&mut g);
    let xv = g.constant(x.clone());
    let h = enc.encode_fine(&mut g, &p, xv).unwrap();
    assert_eq!(g.value(h), &x);
}

#[test]
fn single_position_shape() {
    let cfg = small_cfg();
    let enc = ModalityEncoder::new(Modality::B, &cfg, &mut rng(0)).unwrap();
    let mut g = Graph::new();
    let p = enc.bind(&mut g);
    let x = g.constant(Tensor::zeros(&[1, cfg.d_in]));
    let h = enc.encode_fine(&mut g, &p, x).unwrap();
    assert_eq!(g.value(h).shape(), &[1, cfg.d_hidden]);
}

#[test]
fn fine_network_matches_naive_loops() {
    let cfg = small_cfg();
    let enc = ModalityEncoder::new(Modality::A, &cfg, &mut rng(11)).unwrap();
    let x = Tensor::randn(&[3, cfg.d_in], &mut rng(12));
    let mut g = Graph::new();
    let p = enc.bind(&mut g);
    let xv = g.constant(x.clone());
    let h = enc.encode_fine(&mut g, &p, xv).unwrap();
    for l in 0..3 {
        let hidden: Vec<f64> = naive_linear(x.row(l), &enc.fine[0]).into_iter().map(f64::tanh).collect();
        let expect = naive_linear(&hidden, &enc.fine[1]);
        for (a, b) in g.value(h).row(l).iter().zip(expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn wrong_feature_width_is_rejected() {
    let cfg = small_cfg();
    let enc = ModalityEncoder::new(Modality::A, &cfg, &mut rng(0)).unwrap();
    let mut g = Graph::new();
    let p = enc.bind(&mut g);
    let x = g.constant(Tensor::zeros(&[2, cfg.d_in + 1]));
    assert!(matches!(enc.encode_fine(&mut g, &p, x), Err(Error::Dimension { .. })));
}

#[test]
fn continuous_only_embedding_is_high_level_summary() {
    let cfg = small_cfg();
    let mut enc = ModalityEncoder::new(Modality::A, &cfg, &mut rng(2)).unwrap();
    let x = Tensor::randn(&[4, cfg.d_in], &mut rng(3));
    let batch = SequenceBatch::single(0, x.clone());
    let before = enc.norm.clone();
    // No codebook is supplied: the continuous path must not need one.
    let (z, codes) = embed_once(&mut enc, &batch, None, EmbedFlags::CONTINUOUS_ONLY).unwrap();
    assert!(codes.is_none());
    assert_eq!(enc.norm, before);

    let mut g = Graph::new();
    let p = enc.bind(&mut g);
    let xv = g.constant(x);
    let h = enc.encode_fine(&mut g, &p, xv).unwrap();
    let rows: Vec<Vec<f64>> = (0..4).map(|l| g.value(h).row(l).to_vec()).collect();
    let expect = naive_linear(&mean_rows(&rows), &enc.high);
    assert_eq!(z.data(), expect.as_slice());
}

#[test]
fn combined_embedding_is_sum_of_both_paths() {
    let cfg = small_cfg();
    let enc = ModalityEncoder::new(Modality::B, &cfg, &mut rng(4)).unwrap();
    let cb = Codebook::new(
        CodebookConfig {
            size: 6,
            dim: cfg.d_shared,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let x = Tensor::randn(&[5, cfg.d_in], &mut rng(5));
    let batch = SequenceBatch::single(0, x.clone());
    let (z, codes) = embed_once(&mut enc.clone(), &batch, Some(&cb), EmbedFlags::default()).unwrap();

    // Independent evaluation of both paths from the fine-grained rows.
    let mut g = Graph::new();
    let p = enc.bind(&mut g);
    let xv = g.constant(x);
    let h = enc.encode_fine(&mut g, &p, xv).unwrap();
    let rows: Vec<Vec<f64>> = (0..5).map(|l| g.value(h).row(l).to_vec()).collect();
    let high = naive_linear(&mean_rows(&rows), &enc.high);
    let proj: Vec<Vec<f64>> = rows.iter().map(|r| naive_linear(r, &enc.proj)).collect();
    let mu = mean_rows(&proj);
    let var: Vec<f64> = (0..cfg.d_shared)
        .map(|j| proj.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / 5.0)
        .collect();
    let normed: Vec<Vec<f64>> = proj
        .iter()
        .map(|r| (0..cfg.d_shared).map(|j| (r[j] - mu[j]) / (var[j] + crate::codebook::NORM_EPS).sqrt()).collect())
        .collect();
    let expect_codes: Vec<usize> = normed.iter().map(|r| cb.nearest(r)).collect();
    assert_eq!(codes.unwrap(), expect_codes);
    let quantized: Vec<Vec<f64>> = expect_codes.iter().map(|&v| cb.codeword(v).to_vec()).collect();
    let code = naive_linear(&mean_rows(&quantized), &enc.code);
    for k in 0..cfg.d_embed {
        assert!((z.data()[k] - (high[k] + code[k])).abs() < 1e-12);
    }
}

#[test]
fn both_paths_disabled_is_a_configuration_error() {
    let cfg = small_cfg();
    let mut enc = ModalityEncoder::new(Modality::A, &cfg, &mut rng(0)).unwrap();
    let batch = SequenceBatch::single(0, Tensor::zeros(&[2, cfg.d_in]));
    let flags = EmbedFlags {
        use_vq: false,
        use_continuous: false,
    };
    assert!(matches!(embed_once(&mut enc, &batch, None, flags), Err(Error::Config(_))));
}

#[test]
fn quantized_only_embedding() {
    let cfg = small_cfg();
    let mut enc = ModalityEncoder::new(Modality::A, &cfg, &mut rng(0)).unwrap();
    let cb = Codebook::new(CodebookConfig { size: 4, dim: cfg.d_shared, ..Default::default() }, 0).unwrap();
    let batch = SequenceBatch::single(0, Tensor::randn(&[4, cfg.d_in], &mut rng(1)));
    let flags = EmbedFlags {
        use_vq: true,
        use_continuous: false,
    };
    let (z, codes) = embed_once(&mut enc, &batch, Some(&cb), flags).unwrap();
    let q: Vec<Vec<f64>> = codes.unwrap().iter().map(|&v| cb.codeword(v).to_vec()).collect();
    let expect = naive_linear(&mean_rows(&q), &enc.code);
    for (a, b) in z.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn projection_receives_straight_through_gradient() {
    let cfg = small_cfg();
    let mut enc = ModalityEncoder::new(Modality::A, &cfg, &mut rng(6)).unwrap();
    let cb = Codebook::new(CodebookConfig { size: 8, dim: cfg.d_shared, ..Default::default() }, 6).unwrap();
    let batch = SequenceBatch {
        features: Tensor::randn(&[8, cfg.d_in], &mut rng(7)),
        offsets: vec![0, 4, 8],
        ids: vec![0, 1],
    };
    let mut g = Graph::new();
    let p = enc.bind(&mut g);
    let flags = EmbedFlags {
        use_vq: true,
        use_continuous: false,
    };
    let out = enc
        .embed(&mut g, &p, &batch, Some(&cb), flags, NormMode::Train, Quantization::Nearest)
        .unwrap();
    let sq = g.mul(out.z, out.z).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(p.proj.weight).max_abs() > 0.0);
    assert!(grads.wrt(p.fine[0].weight).max_abs() > 0.0);
}

#[test]
fn embedding_is_invariant_to_position_order() {
    let cfg = small_cfg();
    let enc = ModalityEncoder::new(Modality::A, &cfg, &mut rng(8)).unwrap();
    let cb = Codebook::new(CodebookConfig { size: 5, dim: cfg.d_shared, ..Default::default() }, 8).unwrap();
    let x = Tensor::randn(&[6, cfg.d_in], &mut rng(9));
    let mut perm: Vec<usize> = (0..6).collect();
    perm.shuffle(&mut rng(10));
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
    let xp = Tensor::from_rows(&rows).unwrap();

    let (z1, c1) = embed_once(&mut enc.clone(), &SequenceBatch::single(0, x), Some(&cb), EmbedFlags::default()).unwrap();
    let (z2, c2) = embed_once(&mut enc.clone(), &SequenceBatch::single(0, xp), Some(&cb), EmbedFlags::default()).unwrap();
    for (a, b) in z1.data().iter().zip(z2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let (c1, c2) = (c1.unwrap(), c2.unwrap());
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(c2[k], c1[i]);
    }
}
