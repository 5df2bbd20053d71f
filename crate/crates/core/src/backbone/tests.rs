use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{CountyYearRecord, LabelAudit, NormStats};
use crate::numcore::{grad_check, softmax, Tape, Tensor};

fn norm(d: usize) -> NormStats {
    NormStats {
        feature_mean: vec![0.0; d],
        feature_std: vec![1.0; d],
        label_mean: 400.0,
        label_std: 50.0,
        flagged: vec![],
    }
}

fn tiny_dims(d: usize) -> LyraDims {
    LyraDims {
        d,
        hidden: 4,
        gru_layers: 1,
        attn_hidden: 3,
        year_dim: 2,
        embed_hidden: 5,
        z_dim: 4,
        head_hidden: 3,
        lookback: 2,
        variant: Variant::Lyra,
    }
}

fn tiny_model(seed: u64) -> LyraParams {
    LyraParams::new(tiny_dims(2), 2000, 2010, norm(2), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_matrix(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn emb(year: i32, z: Vec<f64>) -> YearlyEmbedding {
    YearlyEmbedding {
        county: "c".into(),
        year,
        z,
        label_used: 0.0,
    }
}

/// attn MLP reduced to `score = 2·tanh(h_0)`.
fn hand_set_attention(model: &mut LyraParams) {
    let attn = model.attn_mlp().clone();
    let (w0, b0) = attn.layer(0);
    let (w1, b1) = attn.layer(1);
    let h = model.dims.hidden;
    let a = model.dims.attn_hidden;
    let mut w0v = vec![0.0; h * a];
    w0v[0] = 1.0;
    let mut w1v = vec![0.0; a];
    w1v[0] = 2.0;
    let s = &mut model.store;
    s.set_value(w0, Tensor::matrix(h, a, w0v).unwrap()).unwrap();
    s.set_value(b0, Tensor::zeros(&[a])).unwrap();
    s.set_value(w1, Tensor::matrix(a, 1, w1v).unwrap()).unwrap();
    s.set_value(b1, Tensor::zeros(&[1])).unwrap();
}

#[test]
fn identical_states_give_uniform_weights() {
    let model = tiny_model(0);
    let h = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.5, 0.1]; 6]).unwrap();
    let (w, pooled) = model.attention_pool(&h).unwrap();
    for v in &w {
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
    }
    for (p, e) in pooled.iter().zip(h.row(0)) {
        assert!((p - e).abs() < 1e-15);
    }
}

#[test]
fn single_step_attention_is_identity() {
    let model = tiny_model(1);
    let h = Tensor::from_rows(&[vec![0.7, 0.1, -0.4, 0.2]]).unwrap();
    let (w, pooled) = model.attention_pool(&h).unwrap();
    assert_eq!(w, vec![1.0]);
    assert_eq!(pooled, h.row(0).to_vec());
}

#[test]
fn three_step_attention_matches_closed_form() {
    let mut model = tiny_model(2);
    hand_set_attention(&mut model);
    let h = Tensor::from_rows(&[
        vec![0.5, 1.0, 0.0, 0.0],
        vec![-0.2, 0.0, 1.0, 0.0],
        vec![0.9, 0.0, 0.0, 1.0],
    ])
    .unwrap();
    let scores: Vec<f64> = [0.5f64, -0.2, 0.9].iter().map(|v| 2.0 * v.tanh()).collect();
    let denom: f64 = scores.iter().map(|s| s.exp()).sum();
    let expected: Vec<f64> = scores.iter().map(|s| s.exp() / denom).collect();
    let (w, pooled) = model.attention_pool(&h).unwrap();
    for (a, b) in w.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-14);
    }
    let p0: f64 = (0..3).map(|t| expected[t] * h.get(t, 0)).sum();
    assert!((pooled[0] - p0).abs() < 1e-14);
    assert!((pooled[3] - expected[2]).abs() < 1e-14);
}

#[test]
fn label_enters_the_embedding() {
    let model = tiny_model(3);
    let pooled = [0.1, 0.2, -0.3, 0.4];
    let a = model.yearly_embedding(&pooled, 0.5, 2004).unwrap();
    let b = model.yearly_embedding(&pooled, -0.5, 2004).unwrap();
    assert_ne!(a, b);
}

#[test]
fn near_identity_embed_mlp_returns_the_concatenation() {
    let dims = LyraDims {
        hidden: 2,
        year_dim: 1,
        embed_hidden: 4,
        z_dim: 4,
        ..tiny_dims(2)
    };
    let mut model = LyraParams::new(dims, 2000, 2002, norm(2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let s = 1e-4;
    let eye = |scale: f64| {
        let mut v = vec![0.0; 16];
        for i in 0..4 {
            v[i * 4 + i] = scale;
        }
        Tensor::matrix(4, 4, v).unwrap()
    };
    let embed = model.embed_mlp().clone();
    let (w0, b0) = embed.layer(0);
    let (w1, b1) = embed.layer(1);
    model.store.set_value(w0, eye(s)).unwrap();
    model.store.set_value(b0, Tensor::zeros(&[4])).unwrap();
    model.store.set_value(w1, eye(1.0 / s)).unwrap();
    model.store.set_value(b1, Tensor::zeros(&[4])).unwrap();
    let table = model.year_table().unwrap();
    model
        .store
        .set_value(table, Tensor::matrix(3, 1, vec![0.1, 0.2, 0.3]).unwrap())
        .unwrap();
    let z = model.yearly_embedding(&[0.4, -0.6], 0.25, 2001).unwrap();
    let expected = [0.4, -0.6, 0.25, 0.2];
    for (a, b) in z.iter().zip(expected) {
        // tanh(s·x)/s = x − s²x³/3 + …
        assert!((a - b).abs() < 1e-8, "{z:?}");
    }
}

#[test]
fn unknown_year_is_a_contract_error() {
    let model = tiny_model(5);
    let err = model.yearly_embedding(&[0.0; 4], 0.0, 2011).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
}

#[test]
fn single_history_year() {
    let ctx = LookbackContext {
        target: emb(3, vec![1.0, 2.0]),
        history: vec![emb(2, vec![0.5, -1.0])],
    };
    let (beta, z) = cross_year_attention(&ctx).unwrap();
    assert_eq!(beta, vec![1.0]);
    assert_eq!(z, vec![1.5, 1.0]);
}

#[test]
fn identical_history_gives_uniform_beta() {
    let ctx = LookbackContext {
        target: emb(5, vec![1.0, 2.0]),
        history: (1..5).map(|y| emb(y, vec![0.3, 0.3])).collect(),
    };
    let (beta, _) = cross_year_attention(&ctx).unwrap();
    assert!(beta.iter().all(|b| (b - 0.25).abs() < 1e-15));
}

#[test]
fn three_year_window_matches_closed_form() {
    let zt = vec![1.0, -0.5, 0.2];
    let hist = [vec![0.3, 0.1, 0.0], vec![-1.0, 0.4, 2.0], vec![0.0, 0.0, 1.0]];
    let ctx = LookbackContext {
        target: emb(4, zt.clone()),
        history: hist.iter().enumerate().map(|(i, z)| emb(i as i32 + 1, z.clone())).collect(),
    };
    // dot products: 0.25, -0.8, 0.2
    let dots = [0.3 - 0.05, -1.0 - 0.2 + 0.4, 0.2];
    let denom: f64 = dots.iter().map(|d: &f64| d.exp()).sum();
    let (beta, z) = cross_year_attention(&ctx).unwrap();
    for (b, d) in beta.iter().zip(dots) {
        assert!((b - d.exp() / denom).abs() < 1e-15);
    }
    for c in 0..3 {
        let e = zt[c] + (0..3).map(|k| beta[k] * hist[k][c]).sum::<f64>();
        assert!((z[c] - e).abs() < 1e-15);
    }
}

#[test]
fn empty_history_is_a_contract_error() {
    let ctx = LookbackContext {
        target: emb(1, vec![1.0]),
        history: vec![],
    };
    assert!(matches!(cross_year_attention(&ctx), Err(crate::Error::Contract(_))));
}

#[test]
fn zero_history_leaves_the_target_unchanged() {
    let zt = vec![0.123456789, -9.87654321, 3.0];
    let ctx = LookbackContext {
        target: emb(4, zt.clone()),
        history: (1..4).map(|y| emb(y, vec![0.0; 3])).collect(),
    };
    assert_eq!(cross_year_attention(&ctx).unwrap().1, zt);
}

proptest! {
    #[test]
    fn history_permutation_permutes_beta(
        zs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..7),
        rot in 0usize..6,
    ) {
        let target = emb(9, vec![0.5, -1.0, 2.0]);
        let history: Vec<_> = zs.iter().enumerate().map(|(i, z)| emb(i as i32, z.clone())).collect();
        let mut rotated = history.clone();
        let k = rot % history.len();
        rotated.rotate_left(k);
        let (b1, z1) = cross_year_attention(&LookbackContext { target: target.clone(), history }).unwrap();
        let (b2, z2) = cross_year_attention(&LookbackContext { target, history: rotated }).unwrap();
        let mut b1r = b1.clone();
        b1r.rotate_left(k);
        for (a, b) in b1r.iter().zip(&b2) {
            prop_assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in z1.iter().zip(&z2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((b1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

fn county_series(model: &LyraParams, years: std::ops::RangeInclusive<i32>, seed: u64) -> Vec<CountyYearRecord> {
    let audit = LabelAudit::new_handle();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    years
        .map(|y| {
            let x = random_matrix(8, model.dims.d, &mut rng);
            CountyYearRecord::new("c001", y, x, Some(rng.random_range(0.0..2.0)), audit.clone()).unwrap()
        })
        .collect()
}

#[test]
fn prediction_matches_step_by_step_composition() {
    let model = tiny_model(6);
    let series = county_series(&model, 2003..=2006, 7);
    let refs: Vec<&CountyYearRecord> = series.iter().collect();
    let target_label = -0.3;
    let (y, beta) = model.predict_series(&refs, 2006, target_label).unwrap();

    let embed = |r: &CountyYearRecord, label: f64| {
        let h = model.gru_encode(&r.features).unwrap();
        let (_, pooled) = model.attention_pool(&h).unwrap();
        emb(r.year, model.yearly_embedding(&pooled, label, r.year).unwrap())
    };
    let ctx = LookbackContext {
        target: embed(&series[3], target_label),
        history: vec![
            embed(&series[1], series[1].label().unwrap()),
            embed(&series[2], series[2].label().unwrap()),
        ],
    };
    let (beta2, zt) = cross_year_attention(&ctx).unwrap();
    let y2 = model.norm.denormalize_label(model.head_predict(&zt).unwrap());
    assert!((y - y2).abs() < 1e-10, "{y} vs {y2}");
    for (a, b) in beta.iter().zip(&beta2) {
        assert!((a - b).abs() < 1e-12);
    }
    // deterministic
    assert_eq!(model.predict_series(&refs, 2006, target_label).unwrap().0, y);
}

#[test]
fn missing_history_is_reported() {
    let model = tiny_model(8);
    let series = county_series(&model, 2006..=2006, 9);
    let refs: Vec<&CountyYearRecord> = series.iter().collect();
    let err = model.predict_series(&refs, 2006, 0.0).unwrap_err().to_string();
    assert!(err.contains("2004") && err.contains("2005"), "{err}");
}

#[test]
fn batched_forward_matches_single_samples() {
    let model = tiny_model(10);
    let a = county_series(&model, 2001..=2005, 11);
    let b = county_series(&model, 2001..=2005, 12);
    let samples: Vec<LyraSample> = [&a, &b]
        .iter()
        .flat_map(|s| {
            let refs: Vec<&CountyYearRecord> = s.iter().collect();
            (2002..=2005)
                .map(|y| lookback_sample(&refs, y, 0.1, 2).unwrap())
                .collect::<Vec<_>>()
        })
        .collect();
    let together = model.predict_samples(&samples, 64).unwrap();
    let apart = model.predict_samples(&samples, 1).unwrap();
    for (x, y) in together.iter().zip(&apart) {
        assert!((x.y - y.y).abs() < 1e-12);
        assert_eq!(x.beta.len(), y.beta.len());
    }
    assert_eq!(together[0].beta.len(), 1);
    assert_eq!(together[1].beta.len(), 2);
}

#[test]
fn attention_pool_gradient() {
    let mut model = tiny_model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let h: Vec<Tensor> = (0..5).map(|_| random_matrix(2, 4, &mut rng)).collect();
    let m = model.clone();
    let err = grad_check(&mut model.store, 1e-5, |tape, s| {
        let states: Vec<_> = h.iter().map(|t| tape.constant(t.clone())).collect();
        let (pooled, _) = m.attention_pool_states(tape, s, &states)?;
        let sq = tape.mul(pooled, pooled)?;
        tape.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn full_model_gradient() {
    let mut model = tiny_model(15);
    let a = county_series(&model, 2001..=2004, 16);
    let refs: Vec<&CountyYearRecord> = a.iter().collect();
    let samples = vec![
        lookback_sample(&refs, 2003, 0.2, 2).unwrap(),
        lookback_sample(&refs, 2004, -0.1, 2).unwrap(),
    ];
    let batch = LyraBatch::from_samples(&samples);
    let target = Tensor::matrix(2, 1, vec![0.5, -0.5]).unwrap();
    let m = model.clone();
    let err = grad_check(&mut model.store, 1e-5, |tape, s| {
        let fwd = m.forward(tape, s, &batch)?;
        let t = tape.constant(target.clone());
        tape.mse(fwd.pred, t)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn reduced_variant_has_no_label_or_year_input() {
    let dims = LyraDims {
        variant: Variant::GruAtt,
        ..tiny_dims(2)
    };
    let model = LyraParams::new(dims, 2000, 2010, norm(2), &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    assert!(model.year_table().is_none());
    let pooled = [0.1, 0.2, 0.3, 0.4];
    assert_eq!(
        model.yearly_embedding(&pooled, 0.5, 2004).unwrap(),
        model.yearly_embedding(&pooled, -3.0, 2009).unwrap()
    );
    let x = Arc::new(Tensor::zeros(&[8, 2]));
    let sample = LyraSample {
        target: YearInput {
            features: x,
            label: 0.0,
            year: 2005,
        },
        history: vec![],
    };
    let out = model.predict_samples(&[sample], 1).unwrap();
    assert!(out[0].beta.is_empty());
}

#[test]
fn untrained_years_copy_the_nearest_trained_row() {
    let mut model = tiny_model(18);
    let trained: Vec<i32> = (2000..=2007).collect();
    model.fill_untrained_years(&trained).unwrap();
    let table = model.store.value(model.year_table().unwrap()).clone();
    for y in 2008..=2010 {
        assert_eq!(table.row(model.year_row(y).unwrap()), table.row(model.year_row(2007).unwrap()));
    }
}

#[test]
fn global_model_mean_pool_and_determinism() {
    let mut tape = Tape::new();
    let c = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
    let states: Vec<_> = (0..4).map(|_| tape.constant(c.clone())).collect();
    let p = GruParams::mean_pool(&mut tape, &states).unwrap();
    assert!(tape.value(p).max_abs_diff(&c) < 1e-15);

    let model = GruParams::new(GruDims { hidden: 4, readout_hidden: 3, ..GruDims::new(2) }, norm(2), &mut ChaCha8Rng::seed_from_u64(19)).unwrap();
    let x = random_matrix(8, 2, &mut ChaCha8Rng::seed_from_u64(20));
    let a = model.global_gru_predict(&x).unwrap();
    assert_eq!(a, model.global_gru_predict(&x).unwrap());
    assert!(matches!(model.global_gru_predict(&Tensor::zeros(&[8, 3])), Err(crate::Error::Dimension(_))));
}

#[test]
fn global_model_gradient() {
    let mut model = GruParams::new(GruDims { hidden: 3, readout_hidden: 2, ..GruDims::new(2) }, norm(2), &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let xs: Vec<Tensor> = (0..3).map(|_| random_matrix(6, 2, &mut rng)).collect();
    let m = model.clone();
    let err = grad_check(&mut model.store, 1e-5, |tape, s| {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let y = m.forward(tape, s, &refs)?;
        let t = tape.constant(Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0])?);
        tape.mse(y, t)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(23);
    let p = dir.path().join("lyra.ckpt");
    save_lyra(&model, &p).unwrap();
    let back = load_lyra(&p).unwrap();
    assert_eq!(back.store, model.store);
    assert_eq!(back.dims, model.dims);
    assert_eq!((back.first_year(), back.last_year()), (2000, 2010));
    assert_eq!(back.norm, model.norm);

    let g = GruParams::new(GruDims::new(3), norm(3), &mut ChaCha8Rng::seed_from_u64(24)).unwrap();
    let gp = dir.path().join("gru.ckpt");
    save_gru(&g, &gp).unwrap();
    assert_eq!(load_gru(&gp).unwrap().store, g.store);
    assert!(load_lyra(&gp).is_err());

    std::fs::write(dir.path().join("bad.ckpt"), "NOPE\n{}\n").unwrap();
    assert!(matches!(load_gru(dir.path().join("bad.ckpt")), Err(crate::Error::Checkpoint(_))));
}

#[test]
fn softmax_weights_used_by_attention_are_normalised() {
    let model = tiny_model(25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let h = random_matrix(9, 4, &mut rng);
    let (w, _) = model.attention_pool(&h).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
    let v = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap()).unwrap();
    assert!(v.data()[0] > 0.999);
}
