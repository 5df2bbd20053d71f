//! Acceptance criteria 1-10. Each test prints one `criterion N ... PASS|FAIL`
//! line with the measured values, then asserts.
//!
//! Criteria 7-9 share one trained fixture (60 counties, 4 clusters, 12
//! years, T=50, seeds 0-2) built once per process.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use yieldcast::backbone::{
    cross_year_attention, lookback_sample, Gru, LookbackContext, LyraBatch, LyraDims, LyraParams, Variant,
    YearlyEmbedding,
};
use yieldcast::data::{CountyYearRecord, Dataset, LabelAudit, NormStats, SyntheticConfig, YearIndex};
use yieldcast::numcore::{grad_check, ParamStore, Tensor};
use yieldcast::pipeline::{
    ablation_specs, export_diagnostics, load_data, prepare, retrieval_stage, run_variants, train_models,
    DataSource, EvalReport, ExperimentConfig, Integration, LoadedData, ModelSizes, Prepared, RetrievalMode,
    RetrievalStage, VariantSpec,
};
use yieldcast::refinement::{extrapolate_bias, refine_labels, BiasMatrix, RefineConfig};
use yieldcast::retrieval::{centered_cosine, is_degenerate, match_purity, retrieve, ResidualVector, RetrievalConfig};
use yieldcast::training::TrainConfig;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} ({name}): {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn unit_norm(d: usize) -> NormStats {
    NormStats {
        feature_mean: vec![0.0; d],
        feature_std: vec![1.0; d],
        label_mean: 0.0,
        label_std: 1.0,
        flagged: vec![],
    }
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn lyra_dims(d: usize) -> LyraDims {
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

fn model_sizes() -> ModelSizes {
    ModelSizes {
        hidden: 16,
        gru_layers: 1,
        readout_hidden: 16,
        attn_hidden: 16,
        year_dim: 4,
        embed_hidden: 32,
        z_dim: 16,
        head_hidden: 16,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        lr: 3e-3,
        batch_size: 32,
        finetune_epochs: 20,
        finetune_lr: 1e-4,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "gru", 3, 4, 1, &mut rng).unwrap();
    let x = random_matrix(1, 3, 1.0, &mut rng);
    let e_gru = grad_check(&mut store, 1e-5, |tape, s| {
        let xv = tape.constant(x.clone());
        let h = gru.forward(tape, s, xv, 1, 1)?;
        let sq = tape.mul(h[0], h[0])?;
        tape.sum(sq)
    })
    .unwrap();

    let mut model = LyraParams::new(lyra_dims(2), 2000, 2010, unit_norm(2), &mut rng).unwrap();
    let hs: Vec<Tensor> = (0..8).map(|_| random_matrix(1, 4, 1.0, &mut rng)).collect();
    let m = model.clone();
    let e_pool = grad_check(&mut model.store, 1e-5, |tape, s| {
        let states: Vec<_> = hs.iter().map(|h| tape.constant(h.clone())).collect();
        let (pooled, _) = m.attention_pool_states(tape, s, &states)?;
        let sq = tape.mul(pooled, pooled)?;
        tape.sum(sq)
    })
    .unwrap();

    let audit = LabelAudit::new_handle();
    let records: Vec<CountyYearRecord> = (2001..=2004)
        .map(|y| {
            let label = rng.random_range(0.0..1.0);
            CountyYearRecord::new("c1", y, random_matrix(8, 2, 1.0, &mut rng), Some(label), audit.clone()).unwrap()
        })
        .collect();
    let refs: Vec<&CountyYearRecord> = records.iter().collect();
    let samples = vec![
        lookback_sample(&refs, 2003, 0.2, 2).unwrap(),
        lookback_sample(&refs, 2004, 0.7, 2).unwrap(),
    ];
    let batch = LyraBatch::from_samples(&samples);
    let target = Tensor::matrix(2, 1, vec![0.5, -0.5]).unwrap();
    let m = model.clone();
    let e_full = grad_check(&mut model.store, 1e-5, |tape, s| {
        let fwd = m.forward(tape, s, &batch)?;
        let t = tape.constant(target.clone());
        tape.mse(fwd.pred, t)
    })
    .unwrap();

    let secs = start.elapsed().as_secs_f64();
    let worst = e_gru.max(e_pool).max(e_full);
    let pass = worst < 1e-4 && secs < 30.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!("gru {e_gru:.2e}, attention pool {e_pool:.2e}, full model {e_full:.2e}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_attention_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = LyraParams::new(lyra_dims(2), 2000, 2010, unit_norm(2), &mut rng).unwrap();
    let mut worst_sum = 0.0f64;
    let mut in_range = true;
    let mut check = |w: &[f64], worst: &mut f64| {
        *worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
        in_range &= w.iter().all(|v| (0.0..=1.0).contains(v));
    };
    for i in 0..1000 {
        let scale = [1.0, 10.0, 1e3, 1e6][i % 4];
        let t = rng.random_range(1..20);
        let h = random_matrix(t, 4, scale, &mut rng);
        let (alpha, _) = model.attention_pool(&h).unwrap();
        check(&alpha, &mut worst_sum);

        let m = rng.random_range(1..12);
        let emb = |rng: &mut ChaCha8Rng, year| YearlyEmbedding {
            county: "c".into(),
            year,
            z: (0..4).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
            label_used: 0.0,
        };
        let ctx = LookbackContext {
            target: emb(&mut rng, 2010),
            history: (0..m).map(|k| emb(&mut rng, 2000 + k)).collect(),
        };
        let (beta, _) = cross_year_attention(&ctx).unwrap();
        check(&beta, &mut worst_sum);
    }
    let pass = worst_sum < 1e-9 && in_range;
    report(
        2,
        "attention normalization",
        pass,
        &format!("1000 inputs, worst |sum - 1| {worst_sum:.2e}, entries in [0,1]: {in_range}"),
    );
    assert!(pass);
}

fn retrieval_dataset(n: usize) -> Dataset {
    let audit = LabelAudit::new_handle();
    let recs = (0..n)
        .map(|i| CountyYearRecord::new(format!("c{i}"), 2000, Tensor::zeros(&[1, 1]), Some(1.0), audit.clone()).unwrap())
        .collect();
    Dataset::new(recs, audit).unwrap()
}

#[test]
fn criterion_03_retrieval_algebra() {
    const CASES: u32 = 10_000;
    let start = Instant::now();
    let ds = retrieval_dataset(8);
    let vec_pair = (3usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
            -1e3f64..1e3,
        )
    });
    let pools = prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 8);
    let strategy = (vec_pair, pools, -1.0f64..1.0, 0.0f64..1.0);
    let mut runner = TestRunner::new(ProptestConfig {
        cases: CASES,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let outcome = runner.run(&strategy, |((a, b, shift), pool, t1, dt)| {
        let ab = centered_cosine(&a, &b).unwrap();
        let ba = centered_cosine(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab.abs() <= 1.0 + 1e-12);
        let shifted: Vec<f64> = a.iter().map(|v| v + shift).collect();
        if !is_degenerate(&a) && !is_degenerate(&shifted) {
            let sb = centered_cosine(&shifted, &b).unwrap();
            prop_assert!((sb - ab).abs() < 1e-9, "shift changed {} to {}", ab, sb);
        }

        let residuals: BTreeMap<String, ResidualVector> = pool
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let c = format!("c{i}");
                (c.clone(), ResidualVector { county: c, years: (2000..2006).collect(), r: r.clone() })
            })
            .collect();
        let lo = RetrievalConfig { threshold: t1, ..RetrievalConfig::default() };
        let hi = RetrievalConfig { threshold: (t1 + dt).min(1.0), ..RetrievalConfig::default() };
        let set = |cfg: &RetrievalConfig| -> Result<BTreeSet<String>, TestCaseError> {
            let r = retrieve("c0", &residuals, &ds, cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
            Ok(r.matched.into_iter().map(|(c, _)| c).collect())
        };
        let (m_lo, m_hi) = (set(&lo)?, set(&hi)?);
        prop_assert!(m_hi.is_subset(&m_lo));
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    let pass = outcome.is_ok() && secs < 10.0;
    report(
        3,
        "retrieval algebra",
        pass,
        &format!("{CASES} cases in {secs:.1}s{}", outcome.as_ref().err().map(|e| format!(", {e}")).unwrap_or_default()),
    );
    assert!(pass);
}

/// 40 counties, 10 years, T=40, a pure linear trend and no label perturbation.
fn refinement_fixture() -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(SyntheticConfig {
            n_counties: 40,
            n_years: 10,
            t: 40,
            year_bias_slope: 20.0,
            year_shock_std: 0.0,
            seed: 7,
            ..SyntheticConfig::default()
        }),
        seeds: vec![0],
        train: train_config(),
        sizes: model_sizes(),
        retrieval_cfg: RetrievalConfig { threshold: 0.8, ..RetrievalConfig::default() },
        refine_cfg: RefineConfig { sigma: Some(0.0), ..RefineConfig::default() },
        ..ExperimentConfig::default()
    }
}

struct RefinementRun {
    cfg: ExperimentConfig,
    prep: Prepared,
    data: LoadedData,
    stage: RetrievalStage,
}

fn refinement_run() -> &'static RefinementRun {
    static RUN: OnceLock<RefinementRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = refinement_fixture();
        let data = load_data(&cfg).unwrap();
        let prep = prepare(&data, None).unwrap();
        let models = train_models(&prep, &cfg, 0, Variant::Lyra).unwrap();
        let stage = retrieval_stage(&prep, &models, &cfg).unwrap();
        RefinementRun { cfg, prep, data, stage }
    })
}

#[test]
fn criterion_04_bias_matrix_identity() {
    let run = refinement_run();
    let (mut cells, mut worst) = (0usize, 0.0f64);
    for (county, b) in &run.stage.biases {
        for &s in &b.years {
            let g = &run.stage.regressors[&s];
            for (k, bias) in b.row(s) {
                let e = &run.stage.embeddings[&(county.clone(), k)];
                worst = worst.max((bias + g.predict(&e.z).unwrap() - e.label).abs());
                cells += 1;
            }
        }
    }
    let pass = cells > 0 && worst < 1e-10;
    report(4, "bias-matrix identity", pass, &format!("{cells} valid cells, worst residual {worst:.2e}"));
    assert!(pass);
}

/// Intercept at `target` of the least-squares line, from the 2x2 normal
/// equations solved by Cramer's rule with `x = k - target`.
fn ols_oracle(points: &[(YearIndex, f64)], target: YearIndex) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(k, v) in points {
        let x = (k - target) as f64;
        sx += x;
        sxx += x * x;
        sy += v;
        sxy += x * v;
    }
    (sy * sxx - sx * sxy) / (n * sxx - sx * sx)
}

#[test]
fn criterion_05_extrapolation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let years: Vec<YearIndex> = (2000..2016).collect();
    let nk = years.len();
    let (mut worst_random, mut worst_line) = (0.0f64, 0.0f64);
    for i in 0..2000 {
        let collinear = i >= 1000;
        let (a, slope) = (rng.random_range(-100.0..100.0), rng.random_range(-10.0..10.0));
        let s = years[rng.random_range(0..nk)];
        let mut cells = vec![None; nk * nk];
        let si = years.iter().position(|&y| y == s).unwrap();
        let mut chosen = Vec::new();
        while chosen.len() < 2 {
            chosen = years.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        }
        for &k in &chosen {
            let v = if collinear {
                a + slope * (k - 2000) as f64
            } else {
                rng.random_range(-50.0..50.0)
            };
            cells[si * nk + (k - 2000) as usize] = Some(v);
        }
        let b = BiasMatrix::from_cells("c", years.clone(), &cells).unwrap();
        let target = 2016 + rng.random_range(0..5);
        let (got, _) = extrapolate_bias(&b, s, target);
        if collinear {
            worst_line = worst_line.max((got - (a + slope * (target - 2000) as f64)).abs());
        } else {
            worst_random = worst_random.max((got - ols_oracle(&b.row(s), target)).abs());
        }
    }
    let pass = worst_random < 1e-8 && worst_line < 1e-10;
    report(
        5,
        "extrapolation oracle",
        pass,
        &format!("1000 random rows worst {worst_random:.2e}, 1000 collinear rows worst {worst_line:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_refinement_oracle() {
    let run = refinement_run();
    let syn = run.data.synthetic.as_ref().unwrap();
    let ty = run.prep.test_year;
    let sigma = run.cfg.refine_cfg.sigma_for(&run.prep.norm);
    let (mut raw, mut refined, mut n) = (0.0, 0.0, 0usize);
    for r in run.stage.results.values() {
        let set = refine_labels(r, &run.stage.biases, ty, sigma, &run.cfg.refine_cfg, &run.prep.norm, 0).unwrap();
        for e in &set.entries {
            let truth = syn.counterfactual_yield(&e.record.county, e.record.year, ty).unwrap();
            raw += (e.label - truth).powi(2);
            refined += (e.refined - truth).powi(2);
            n += 1;
        }
    }
    let (raw, refined) = ((raw / n as f64).sqrt(), (refined / n as f64).sqrt());
    let reduction = 1.0 - refined / raw;
    let pass = n > 0 && reduction >= 0.5;
    report(
        6,
        "refinement oracle",
        pass,
        &format!("{n} samples, unrefined RMSE {raw:.3}, refined {refined:.3}, reduction {:.1}%", 100.0 * reduction),
    );
    assert!(pass);
}

/// 60 counties in 4 clusters, 12 years, T=50, seeds 0-2.
fn ablation_fixture() -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(SyntheticConfig {
            n_counties: 60,
            n_hidden_clusters: 4,
            n_years: 12,
            t: 50,
            seed: 7,
            ..SyntheticConfig::default()
        }),
        seeds: vec![0, 1, 2],
        train: train_config(),
        sizes: model_sizes(),
        retrieval_cfg: RetrievalConfig { threshold: 0.8, ..RetrievalConfig::default() },
        ..ExperimentConfig::default()
    }
}

struct AblationRun {
    reports: BTreeMap<String, EvalReport>,
    seconds: f64,
    purity: BTreeMap<&'static str, Option<f64>>,
}

fn ablation_run() -> &'static AblationRun {
    static RUN: OnceLock<AblationRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let cfg = ablation_fixture();
        let data = load_data(&cfg).unwrap();
        let prep = prepare(&data, None).unwrap();
        let art = run_variants(&prep, &cfg, &ablation_specs()).unwrap();
        let reduced = ExperimentConfig { variant: Variant::GruAtt, integration: Integration::None, ..cfg.clone() };
        let gru_att = run_variants(&prep, &reduced, &[reduced.spec()]).unwrap();
        let seconds = start.elapsed().as_secs_f64();
        let reports = art
            .reports
            .iter()
            .chain(&gru_att.reports)
            .map(|r| (r.variant.clone(), r.clone()))
            .collect();

        let syn = data.synthetic.as_ref().unwrap();
        let mut purity = BTreeMap::new();
        for (name, mode) in [
            ("residual", RetrievalMode::Residual),
            ("embedding", RetrievalMode::Embedding),
            ("neighboring", RetrievalMode::Neighboring),
        ] {
            let c = ExperimentConfig { retrieval: mode, refine: false, ..cfg.clone() };
            let results: Vec<_> = art
                .models
                .iter()
                .flat_map(|m| retrieval_stage(&prep, m, &c).unwrap().results.into_values())
                .collect();
            purity.insert(name, match_purity(&results, |c| syn.cluster_of(c)));
        }
        AblationRun { reports, seconds, purity }
    })
}

#[test]
fn criterion_07_ablation_ordering() {
    let run = ablation_run();
    let rmse = |v: &str| run.reports[v].rmse_mean;
    let (full, wo, plain, reduced) = (rmse("lyra-ratar"), rmse("wo-refine"), rmse("lyra"), rmse("gru-att"));
    let le = |a: f64, b: f64| a <= 1.02 * b;
    let pass = le(full, wo) && le(wo, plain) && le(plain, reduced) && run.seconds < 600.0;
    report(
        7,
        "ablation ordering",
        pass,
        &format!(
            "lyra-ratar {full:.3} <= wo-refine {wo:.3} <= lyra {plain:.3} <= gru-att {reduced:.3} (2% slack), {:.0}s",
            run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_integration_parity() {
    let run = ablation_run();
    let ft = run.reports["lyra-ratar"].rmse_mean;
    let ctx = run.reports["lyra-ratar-context"].rmse_mean;
    let rel = (ctx - ft).abs() / ft;
    let pass = rel < 0.10;
    report(
        8,
        "integration parity",
        pass,
        &format!("fine-tune {ft:.3}, context {ctx:.3}, relative difference {:.1}%", 100.0 * rel),
    );
    assert!(pass);
}

#[test]
fn criterion_09_retrieval_relevance() {
    let run = ablation_run();
    let p = |m: &str| run.purity[m].unwrap_or(0.0);
    let (res, emb, nb) = (p("residual"), p("embedding"), p("neighboring"));
    let pass = res > emb && res > nb;
    report(
        9,
        "retrieval relevance",
        pass,
        &format!("cluster purity residual {res:.3}, embedding {emb:.3}, neighboring {nb:.3}"),
    );
    assert!(pass);
}

fn small_fixture() -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(SyntheticConfig {
            n_counties: 16,
            n_years: 7,
            t: 16,
            d: 4,
            ..SyntheticConfig::default()
        }),
        lookback: 3,
        seeds: vec![0, 1],
        train: TrainConfig { epochs: 8, lr: 5e-3, batch_size: 16, finetune_epochs: 3, ..TrainConfig::default() },
        sizes: ModelSizes {
            hidden: 6,
            gru_layers: 1,
            readout_hidden: 6,
            attn_hidden: 4,
            year_dim: 2,
            embed_hidden: 8,
            z_dim: 6,
            head_hidden: 6,
        },
        retrieval_cfg: RetrievalConfig { threshold: 0.3, recent_years: 3, ..RetrievalConfig::default() },
        ..ExperimentConfig::default()
    }
}

#[test]
fn criterion_10_determinism_and_leakage() {
    const FILES: [&str; 8] = [
        "report.csv",
        "predictions.csv",
        "attention.csv",
        "errors.csv",
        "retrieval.csv",
        "bias.csv",
        "refined.csv",
        "run.json",
    ];
    let cfg = small_fixture();
    let data = load_data(&cfg).unwrap();
    let prep = prepare(&data, None).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let art = run_variants(&prep, &cfg, &[cfg.spec()]).unwrap();
        export_diagnostics(&art, d.path()).unwrap();
    }
    let differing: Vec<&str> = FILES
        .iter()
        .copied()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).unwrap() != std::fs::read(dirs[1].path().join(f)).unwrap())
        .collect();

    let audit = data.dataset.audit();
    let ty = prep.test_year;
    let mut leaks = Vec::new();
    for mode in [RetrievalMode::Residual, RetrievalMode::Embedding, RetrievalMode::Neighboring] {
        let c = ExperimentConfig { retrieval: mode, seeds: vec![0], ..cfg.clone() };
        let specs = [
            VariantSpec { integration: Integration::Finetune, refine: true },
            VariantSpec { integration: Integration::Context, refine: true },
            VariantSpec { integration: Integration::Finetune, refine: false },
            VariantSpec { integration: Integration::None, refine: false },
        ];
        run_variants(&prep, &c, &specs).unwrap();
        if audit.reads(ty) != 0 {
            leaks.push(format!("{mode:?}: {}", audit.reads(ty)));
        }
    }
    let scored = audit.scoring_reads(ty);
    let pass = differing.is_empty() && leaks.is_empty() && scored > 0;
    report(
        10,
        "determinism and leakage",
        pass,
        &format!(
            "{} artifact files identical across reruns (differing: {differing:?}), test-year label reads {}, scoring reads {scored}",
            FILES.len(),
            audit.reads(ty)
        ),
    );
    assert!(pass);
}
