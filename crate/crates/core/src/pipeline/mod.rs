//! End-to-end experiments: split, normalise, train the global and yearly
//! models, retrieve and refine per county, integrate, predict and score.

mod config;
mod export;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::Serialize;

pub use config::{DataSource, EmbeddingLabels, EmbeddingYearRow, ExperimentConfig, Integration, ModelSizes, RetrievalMode};
pub use export::{export_diagnostics, write_ablation_csv, write_sweep_csv};

use crate::backbone::{
    cross_year_attention, load_gru, load_lyra, lookback_sample, GruParams, LookbackContext, LyraParams, LyraSample, Variant, YearInput,
    YearlyEmbedding,
};
use crate::data::{
    generate_synthetic, load_adjacency, load_dataset, split_by_test_year, zscore_apply, zscore_fit, Adjacency,
    CountyId, Dataset, LoadOptions, NormStats, SyntheticData, YearIndex,
};
use crate::error::{Error, Result, StageContext};
use crate::refinement::{
    build_bias_matrices, fit_year_regressors, refine_labels, unrefined_samples, BiasMatrix, EmbeddedYear,
    EmbeddingTable, RefinedSampleSet, YearRegressor,
};
use crate::retrieval::{
    mean_embeddings, residuals_from_predictions, retrieve, retrieve_embedding, retrieve_neighboring, ResidualVector,
    RetrievalResult,
};
use crate::training::{
    fine_tune, global_predictions, train_global, train_lyra, LabelSubstitutes, TrainConfig, TrainReport,
    TrainingSample,
};

const CHUNK: usize = 64;

/// Raw records plus whatever side information the source provides.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub adjacency: Option<Adjacency>,
    pub synthetic: Option<SyntheticData>,
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::contract(format!("cannot read {}: {io}", path.display())),
        e => e,
    }
}

/// Loads or generates the dataset, appending the year column if configured.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let (dataset, adjacency, synthetic) = match &cfg.data {
        DataSource::Csv { path, adjacency } => {
            let opts = LoadOptions {
                t: None,
                test_year: cfg.test_year,
            };
            let ds = load_dataset(path, &opts).map_err(|e| with_path(e, path))?;
            let adj = adjacency
                .as_ref()
                .map(|p| load_adjacency(p).map_err(|e| with_path(e, p)))
                .transpose()?;
            (ds, adj, None)
        }
        DataSource::Synthetic(s) => {
            let data = generate_synthetic(s)?;
            (data.dataset.clone(), Some(data.adjacency.clone()), Some(data))
        }
    };
    let dataset = if cfg.year_feature {
        dataset.with_year_feature()?
    } else {
        dataset
    };
    Ok(LoadedData {
        dataset,
        adjacency,
        synthetic,
    })
}

/// Normalised split. `test_raw` keeps its labels and is only used for
/// scoring; `test` is normalised with labels stripped.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub test_year: YearIndex,
    pub train_raw: Dataset,
    pub test_raw: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
    pub adjacency: Option<Adjacency>,
}

pub fn prepare(data: &LoadedData, test_year: Option<YearIndex>) -> Result<Prepared> {
    let ds = &data.dataset;
    let test_year = match test_year {
        Some(y) => y,
        None => *ds.years().last().ok_or_else(|| Error::contract("dataset is empty"))?,
    };
    let (train_raw, test_raw) = split_by_test_year(ds, test_year)?;
    let norm = zscore_fit(&train_raw)?;
    let train = zscore_apply(&train_raw, &norm)?;
    let test = zscore_apply(&test_raw.without_labels(), &norm)?;
    if let Some(c) = test.counties().iter().find(|c| !train.counties().contains(*c)) {
        return Err(Error::contract(format!("test county {c} has no training years")));
    }
    Ok(Prepared {
        test_year,
        train_raw,
        test_raw,
        train,
        test,
        norm,
        adjacency: data.adjacency.clone(),
    })
}

/// The two trained models of one seed.
#[derive(Clone, Debug)]
pub struct SeedModels {
    pub seed: u64,
    pub global: GruParams,
    pub lyra: LyraParams,
    /// Normalised global predictions for every train and test record.
    pub substitutes: LabelSubstitutes,
    pub global_report: TrainReport,
    pub lyra_report: TrainReport,
}

pub fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

/// Trains the global regressor for one seed.
pub fn fit_global(prep: &Prepared, cfg: &ExperimentConfig, seed: u64) -> Result<(GruParams, TrainReport)> {
    let tc = seeded(&cfg.train, seed);
    train_global(&prep.train, cfg.sizes.gru_dims(prep.train.d()), &prep.norm, &tc).stage("train-global")
}

/// Normalised global predictions for every train and test record.
pub fn global_substitutes(prep: &Prepared, global: &GruParams) -> Result<LabelSubstitutes> {
    let mut substitutes = global_predictions(global, &prep.train).stage("train-global")?;
    substitutes.extend(global_predictions(global, &prep.test).stage("train-global")?);
    Ok(substitutes)
}

/// Trains the yearly model for one seed on top of the global predictions.
pub fn fit_lyra(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    seed: u64,
    variant: Variant,
    substitutes: &LabelSubstitutes,
) -> Result<(LyraParams, TrainReport)> {
    let tc = seeded(&cfg.train, seed);
    let first = *prep.train.years().first().expect("non-empty training set");
    train_lyra(
        &prep.train,
        substitutes,
        cfg.sizes.lyra_dims(prep.train.d(), cfg.lookback, variant),
        (first, prep.test_year),
        &prep.norm,
        &tc,
    )
    .stage("train-lyra")
}

/// Trains the global regressor and the yearly model for one seed.
pub fn train_models(prep: &Prepared, cfg: &ExperimentConfig, seed: u64, variant: Variant) -> Result<SeedModels> {
    let (global, global_report) = fit_global(prep, cfg, seed)?;
    let substitutes = global_substitutes(prep, &global)?;
    let (lyra, lyra_report) = fit_lyra(prep, cfg, seed, variant, &substitutes)?;
    info!(
        "seed {seed}: global loss {:?}, yearly loss {:?}",
        global_report.final_loss(),
        lyra_report.final_loss()
    );
    Ok(SeedModels {
        seed,
        global,
        lyra,
        substitutes,
        global_report,
        lyra_report,
    })
}

/// Checkpoint file names of one seed: the global model and the yearly model.
pub fn checkpoint_paths(dir: &Path, seed: u64, variant: Variant) -> (PathBuf, PathBuf) {
    let yearly = match variant {
        Variant::Lyra => "lyra",
        Variant::GruAtt => "gru-att",
    };
    (
        dir.join(format!("global_seed{seed}.ckpt")),
        dir.join(format!("{yearly}_seed{seed}.ckpt")),
    )
}

fn loaded_report(path: PathBuf) -> TrainReport {
    TrainReport {
        losses: Vec::new(),
        seconds: 0.0,
        checkpoint: Some(path),
    }
}

/// Loads both models of one seed from a checkpoint directory and checks
/// that they fit the data and configuration.
pub fn load_models(prep: &Prepared, cfg: &ExperimentConfig, dir: &Path, seed: u64, variant: Variant) -> Result<SeedModels> {
    let (gpath, lpath) = checkpoint_paths(dir, seed, variant);
    let global = load_gru(&gpath).map_err(|e| with_path(e, &gpath)).stage("load-checkpoint")?;
    if global.dims.d != prep.train.d() {
        return Err(Error::Checkpoint(format!(
            "{} expects {} features, data has {}",
            gpath.display(),
            global.dims.d,
            prep.train.d()
        )))
        .stage("load-checkpoint");
    }
    let substitutes = global_substitutes(prep, &global)?;
    let lyra = load_lyra(&lpath).map_err(|e| with_path(e, &lpath)).stage("load-checkpoint")?;
    let dims = &lyra.dims;
    if dims.variant != variant || dims.d != prep.train.d() || dims.lookback != cfg.lookback {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} model with d={} and look-back {}, configuration needs {:?} with d={} and look-back {}",
            lpath.display(),
            dims.variant,
            dims.d,
            dims.lookback,
            variant,
            prep.train.d(),
            cfg.lookback
        )))
        .stage("load-checkpoint");
    }
    Ok(SeedModels {
        seed,
        global,
        lyra,
        substitutes,
        global_report: loaded_report(gpath),
        lyra_report: loaded_report(lpath),
    })
}

/// Loads models from `cfg.checkpoint_dir` when set, otherwise trains them.
pub fn obtain_models(prep: &Prepared, cfg: &ExperimentConfig, seed: u64, variant: Variant) -> Result<SeedModels> {
    match &cfg.checkpoint_dir {
        Some(dir) => load_models(prep, cfg, dir, seed, variant),
        None => train_models(prep, cfg, seed, variant),
    }
}

/// Yearly embeddings of every labelled training record.
pub fn embedding_table(
    prep: &Prepared,
    models: &SeedModels,
    labels: EmbeddingLabels,
    row: EmbeddingYearRow,
) -> Result<EmbeddingTable> {
    let latest = *prep.train.years().last().ok_or_else(|| Error::contract("empty training set"))?;
    let mut keys = Vec::new();
    let mut inputs = Vec::new();
    for r in prep.train.records() {
        let Some(y) = r.label() else { continue };
        let slot = match labels {
            EmbeddingLabels::Observed => y,
            EmbeddingLabels::Substituted => *models
                .substitutes
                .get(&(r.county.clone(), r.year))
                .ok_or_else(|| Error::contract(format!("no global prediction for ({}, {})", r.county, r.year)))?,
        };
        keys.push((r.county.clone(), r.year, prep.norm.denormalize_label(y)));
        inputs.push(YearInput {
            features: r.features.clone(),
            label: slot,
            year: match row {
                EmbeddingYearRow::Own => r.year,
                EmbeddingYearRow::Latest => latest,
            },
        });
    }
    let zs = models.lyra.embed_inputs(&inputs, CHUNK)?;
    Ok(keys
        .into_iter()
        .zip(zs)
        .map(|((c, y, label), z)| ((c, y), EmbeddedYear { z, label }))
        .collect())
}

/// Everything computed once per seed before the per-county steps.
#[derive(Clone, Debug, Default)]
pub struct RetrievalStage {
    pub residuals: BTreeMap<CountyId, ResidualVector>,
    pub embeddings: EmbeddingTable,
    pub regressors: BTreeMap<YearIndex, YearRegressor>,
    pub biases: BTreeMap<CountyId, BiasMatrix>,
    pub results: BTreeMap<CountyId, RetrievalResult>,
}

pub fn retrieval_stage(prep: &Prepared, models: &SeedModels, cfg: &ExperimentConfig) -> Result<RetrievalStage> {
    let residuals = residuals_from_predictions(&prep.train, &models.substitutes, &prep.norm).stage("retrieve")?;
    let embeddings = embedding_table(prep, models, cfg.embedding_labels, cfg.embedding_year_row).stage("embed")?;
    let means = match cfg.retrieval {
        RetrievalMode::Embedding => mean_embeddings(
            &embeddings
                .iter()
                .map(|(k, e)| (k.clone(), e.z.clone()))
                .collect(),
        ),
        _ => BTreeMap::new(),
    };
    let mut results = BTreeMap::new();
    for county in prep.test.counties() {
        let ctx = || format!("retrieve[{county}]");
        let r = match cfg.retrieval {
            RetrievalMode::Residual => retrieve(county, &residuals, &prep.train, &cfg.retrieval_cfg).stage(ctx())?,
            RetrievalMode::Embedding => {
                retrieve_embedding(county, &means, &prep.train, &cfg.retrieval_cfg).stage(ctx())?
            }
            RetrievalMode::Neighboring => {
                let adj = prep
                    .adjacency
                    .as_ref()
                    .ok_or_else(|| Error::contract("neighbouring retrieval needs an adjacency list"))
                    .stage(ctx())?;
                retrieve_neighboring(county, adj, &prep.train, &cfg.retrieval_cfg)
            }
        };
        results.insert(county.clone(), r);
    }
    let (regressors, biases) = if cfg.refine {
        let regs = fit_year_regressors(&embeddings, &cfg.refine_cfg, models.seed).stage("refine")?;
        let biases = build_bias_matrices(&regs, &embeddings).stage("refine")?;
        (regs, biases)
    } else {
        (BTreeMap::new(), BTreeMap::new())
    };
    Ok(RetrievalStage {
        residuals,
        embeddings,
        regressors,
        biases,
        results,
    })
}

/// Stable per-county seed offset (FNV-1a).
pub fn county_seed(seed: u64, county: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in county.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

/// The query county's own test-year sample, with the global prediction in
/// the label slot.
pub fn base_sample(prep: &Prepared, models: &SeedModels, county: &str) -> Result<LyraSample> {
    let target = prep
        .test
        .get(county, prep.test_year)
        .ok_or_else(|| Error::contract(format!("county {county} has no test-year record")))?;
    let slot = *models
        .substitutes
        .get(&(county.to_string(), prep.test_year))
        .ok_or_else(|| Error::contract(format!("no global prediction for ({county}, {})", prep.test_year)))?;
    if models.lyra.dims.variant == Variant::GruAtt {
        return Ok(LyraSample {
            target: YearInput {
                features: target.features.clone(),
                label: slot,
                year: prep.test_year,
            },
            history: Vec::new(),
        });
    }
    let mut series: Vec<_> = prep.train.county_records(county).collect();
    series.push(target);
    lookback_sample(&series, prep.test_year, slot, models.lyra.dims.lookback)
}

/// Turns refined samples into fine-tuning samples. Each keeps its own
/// county's look-back window before its source year (observed labels),
/// the global prediction in its label slot and its source year index, and
/// is supervised with the refined label. Samples without history are
/// skipped.
pub fn finetune_samples(prep: &Prepared, models: &SeedModels, refined: &RefinedSampleSet) -> Result<Vec<TrainingSample>> {
    let w = models.lyra.dims.lookback;
    let mut out = Vec::with_capacity(refined.entries.len());
    for e in &refined.entries {
        let rec = &e.record;
        let series: Vec<_> = prep.train.county_records(&rec.county).collect();
        let slot = *models
            .substitutes
            .get(&(rec.county.clone(), rec.year))
            .ok_or_else(|| Error::contract(format!("no global prediction for ({}, {})", rec.county, rec.year)))?;
        let Ok(sample) = lookback_sample(&series, rec.year, slot, w) else {
            continue;
        };
        out.push(TrainingSample {
            county: rec.county.clone(),
            sample,
            target: prep.norm.normalize_label(e.refined),
        });
    }
    Ok(out)
}

/// Refined samples as extra history inputs: source-year features, refined
/// label (normalised) and source year index.
pub fn context_inputs(refined: &RefinedSampleSet, norm: &NormStats) -> Vec<YearInput> {
    refined
        .entries
        .iter()
        .map(|e| YearInput {
            features: e.record.features.clone(),
            label: norm.normalize_label(e.refined),
            year: e.record.year,
        })
        .collect()
}

/// Embeds a sample into a look-back context.
pub fn lookback_context(model: &LyraParams, county: &str, sample: &LyraSample) -> Result<LookbackContext> {
    let mut inputs = vec![sample.target.clone()];
    inputs.extend(sample.history.iter().cloned());
    let zs = model.embed_inputs(&inputs, CHUNK)?;
    let mut it = inputs.iter().zip(zs).map(|(i, z)| YearlyEmbedding {
        county: county.to_string(),
        year: i.year,
        z,
        label_used: i.label,
    });
    let target = it.next().expect("target input");
    Ok(LookbackContext {
        target,
        history: it.collect(),
    })
}

/// Appends each refined sample, embedded with its refined label and source
/// year, to the context's history.
pub fn integrate_context(ctx: &LookbackContext, refined: &RefinedSampleSet, model: &LyraParams) -> Result<LookbackContext> {
    let mut out = ctx.clone();
    if refined.entries.is_empty() {
        return Ok(out);
    }
    let inputs = context_inputs(refined, &model.norm);
    let zs = model.embed_inputs(&inputs, CHUNK)?;
    out.history.extend(refined.entries.iter().zip(inputs).zip(zs).map(|((e, i), z)| {
        YearlyEmbedding {
            county: e.record.county.clone(),
            year: i.year,
            z,
            label_used: i.label,
        }
    }));
    Ok(out)
}

/// Normalised prediction and attention weights of a context.
pub fn predict_context(model: &LyraParams, ctx: &LookbackContext) -> Result<(f64, Vec<f64>)> {
    if ctx.history.is_empty() {
        return Ok((model.head_predict(&ctx.target.z)?, Vec::new()));
    }
    let (beta, z) = cross_year_attention(ctx)?;
    Ok((model.head_predict(&z)?, beta))
}

/// One retrieval-integration combination sharing a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub integration: Integration,
    pub refine: bool,
}

impl VariantSpec {
    pub fn label(&self, variant: Variant) -> String {
        ExperimentConfig {
            variant,
            integration: self.integration,
            refine: self.refine,
            ..ExperimentConfig::default()
        }
        .variant_label()
    }
}

/// Outcome for one county under one variant and seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountyOutcome {
    pub county: CountyId,
    /// Physical units.
    pub prediction: f64,
    /// No retrieved samples, so the plain prediction was used.
    pub fallback: bool,
    pub retrieved: usize,
    pub warning: Option<String>,
}

/// Per-county refined sets for one seed; with `refine` off the retrieved
/// labels are passed through unchanged.
pub fn refine_all(
    prep: &Prepared,
    models: &SeedModels,
    stage: &RetrievalStage,
    cfg: &ExperimentConfig,
    refine: bool,
) -> Result<BTreeMap<CountyId, RefinedSampleSet>> {
    let sigma = cfg.refine_cfg.sigma_for(&prep.norm);
    stage
        .results
        .iter()
        .map(|(county, r)| {
            let set = if refine {
                refine_labels(
                    r,
                    &stage.biases,
                    prep.test_year,
                    sigma,
                    &cfg.refine_cfg,
                    &prep.norm,
                    county_seed(models.seed, county),
                )
            } else {
                unrefined_samples(r, prep.test_year, &prep.norm)
            }
            .stage(format!("refine[{county}]"))?;
            Ok((county.clone(), set))
        })
        .collect()
}

fn predict_variant(
    prep: &Prepared,
    models: &SeedModels,
    cfg: &ExperimentConfig,
    base: &BTreeMap<CountyId, (LyraSample, f64)>,
    refined: &BTreeMap<CountyId, RefinedSampleSet>,
    integration: Integration,
) -> Result<Vec<CountyOutcome>> {
    let counties: Vec<&CountyId> = base.keys().collect();
    counties
        .par_iter()
        .map(|&county| {
            let (sample, plain) = &base[county];
            let set = refined.get(county);
            let n = set.map_or(0, |s| s.entries.len());
            let outcome = |prediction, fallback, warning| CountyOutcome {
                county: county.clone(),
                prediction,
                fallback,
                retrieved: n,
                warning,
            };
            let set = match (integration, set) {
                (Integration::None, _) => return Ok(outcome(*plain, false, None)),
                (_, Some(s)) if !s.entries.is_empty() => s,
                _ => {
                    return Ok(outcome(*plain, true, Some("no retrieved samples; plain prediction used".into())));
                }
            };
            let y = match integration {
                Integration::Finetune => {
                    let samples = finetune_samples(prep, models, set).stage(format!("integrate[{county}]"))?;
                    if samples.is_empty() {
                        return Ok(outcome(*plain, true, Some("no usable fine-tuning samples".into())));
                    }
                    let tc = seeded(&cfg.train, county_seed(models.seed, county));
                    let tuned = fine_tune(&models.lyra, &samples, &tc).stage(format!("finetune[{county}]"))?;
                    tuned.params.predict_samples(std::slice::from_ref(sample), 1)?[0].y
                }
                Integration::Context => {
                    let mut s = sample.clone();
                    s.history.extend(context_inputs(set, &prep.norm));
                    models.lyra.predict_samples(std::slice::from_ref(&s), 1)?[0].y
                }
                Integration::None => unreachable!(),
            };
            Ok(outcome(prep.norm.denormalize_label(y), false, None))
        })
        .collect()
}

/// One scored prediction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub county: CountyId,
    pub year: YearIndex,
    pub prediction: f64,
    pub truth: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedEvaluation {
    pub rmse: f64,
    pub rows: Vec<EvalRow>,
}

/// RMSE in physical units over every labelled test record.
pub fn evaluate(predictions: &BTreeMap<CountyId, f64>, test: &Dataset) -> Result<SeedEvaluation> {
    let mut rows = Vec::new();
    for r in test.records() {
        let Some(truth) = r.ground_truth() else { continue };
        let p = *predictions
            .get(&r.county)
            .ok_or_else(|| Error::contract(format!("no prediction for county {} in {}", r.county, r.year)))?;
        if !p.is_finite() {
            return Err(Error::numeric(format!("prediction for county {} is not finite", r.county)));
        }
        rows.push(EvalRow {
            county: r.county.clone(),
            year: r.year,
            prediction: p,
            truth,
            error: p - truth,
        });
    }
    if rows.is_empty() {
        return Err(Error::contract("no labelled test records to score"));
    }
    let mse = rows.iter().map(|r| r.error * r.error).sum::<f64>() / rows.len() as f64;
    Ok(SeedEvaluation { rmse: mse.sqrt(), rows })
}

/// Scores and diagnostics of one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub rmse: f64,
    pub rows: Vec<EvalRow>,
    pub outcomes: Vec<CountyOutcome>,
}

impl SeedReport {
    pub fn fallback_counties(&self) -> Vec<&str> {
        self.outcomes.iter().filter(|o| o.fallback).map(|o| o.county.as_str()).collect()
    }
}

/// Multi-seed result of one variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub test_year: YearIndex,
    pub seeds: Vec<SeedReport>,
    pub rmse_mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub rmse_std: f64,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn new(variant: String, test_year: YearIndex, seeds: Vec<SeedReport>, runtime_seconds: f64) -> Self {
        let n = seeds.len() as f64;
        let mean = seeds.iter().map(|s| s.rmse).sum::<f64>() / n;
        let std = if seeds.len() > 1 {
            (seeds.iter().map(|s| (s.rmse - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        EvalReport {
            variant,
            test_year,
            seeds,
            rmse_mean: mean,
            rmse_std: std,
            runtime_seconds,
        }
    }
}

/// Cross-year attention of a county's plain look-back window, averaged
/// over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRow {
    pub county: CountyId,
    pub target_year: YearIndex,
    pub history_year: YearIndex,
    pub beta: f64,
}

/// Reports plus the upstream artefacts of a run. Retrieval, bias and
/// refinement artefacts are those of the first seed.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub reports: Vec<EvalReport>,
    pub attention: Vec<AttentionRow>,
    pub retrieval: Vec<RetrievalResult>,
    pub biases: BTreeMap<CountyId, BiasMatrix>,
    pub refined: Vec<RefinedSampleSet>,
    pub models: Vec<SeedModels>,
    pub test_year: YearIndex,
}

/// Runs several variants that share the trained models of each seed.
pub fn run_variants(prep: &Prepared, cfg: &ExperimentConfig, specs: &[VariantSpec]) -> Result<RunArtifacts> {
    cfg.validate()?;
    let start = Instant::now();
    let mut per_variant: Vec<Vec<SeedReport>> = vec![Vec::new(); specs.len()];
    let mut secs = vec![0.0; specs.len()];
    let mut attention: BTreeMap<(CountyId, YearIndex), (f64, usize)> = BTreeMap::new();
    let mut first: Option<(RetrievalStage, Vec<RefinedSampleSet>)> = None;
    let mut models_out = Vec::new();
    let needs_retrieval = cfg.variant == Variant::Lyra && specs.iter().any(|s| s.integration != Integration::None);

    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let models = obtain_models(prep, cfg, seed, cfg.variant)?;
        let counties: Vec<&CountyId> = prep.test.counties().iter().collect();
        let samples = counties
            .iter()
            .map(|c| base_sample(prep, &models, c).stage(format!("predict[{c}]")))
            .collect::<Result<Vec<_>>>()?;
        let outs = models.lyra.predict_samples(&samples, CHUNK).stage("predict")?;
        let mut base = BTreeMap::new();
        for ((c, s), o) in counties.iter().zip(samples).zip(&outs) {
            for (h, b) in s.history.iter().zip(&o.beta) {
                let e = attention.entry(((*c).clone(), h.year)).or_insert((0.0, 0));
                e.0 += b;
                e.1 += 1;
            }
            base.insert((*c).clone(), (s, prep.norm.denormalize_label(o.y)));
        }
        let stage = if needs_retrieval {
            let rc = ExperimentConfig {
                refine: specs.iter().any(|s| s.refine && s.integration != Integration::None),
                ..cfg.clone()
            };
            retrieval_stage(prep, &models, &rc)?
        } else {
            RetrievalStage::default()
        };
        let shared = t0.elapsed().as_secs_f64();

        let mut refined_cache: BTreeMap<bool, BTreeMap<CountyId, RefinedSampleSet>> = BTreeMap::new();
        for (vi, spec) in specs.iter().enumerate() {
            let t1 = Instant::now();
            let integration = if cfg.variant == Variant::GruAtt {
                Integration::None
            } else {
                spec.integration
            };
            if integration != Integration::None && !refined_cache.contains_key(&spec.refine) {
                let sets = refine_all(prep, &models, &stage, cfg, spec.refine)?;
                refined_cache.insert(spec.refine, sets);
            }
            let empty = BTreeMap::new();
            let refined = refined_cache.get(&spec.refine).unwrap_or(&empty);
            let outcomes = predict_variant(prep, &models, cfg, &base, refined, integration)?;
            let preds: BTreeMap<CountyId, f64> = outcomes.iter().map(|o| (o.county.clone(), o.prediction)).collect();
            let eval = evaluate(&preds, &prep.test_raw).stage("evaluate")?;
            info!("seed {seed} {}: rmse {:.4}", spec.label(cfg.variant), eval.rmse);
            per_variant[vi].push(SeedReport {
                seed,
                rmse: eval.rmse,
                rows: eval.rows,
                outcomes,
            });
            secs[vi] += shared + t1.elapsed().as_secs_f64();
        }
        if first.is_none() {
            let refined = refined_cache
                .get(&cfg.refine)
                .or_else(|| refined_cache.values().next())
                .map(|m| m.values().cloned().collect())
                .unwrap_or_default();
            first = Some((stage, refined));
        }
        models_out.push(models);
    }

    let reports = specs
        .iter()
        .zip(per_variant)
        .zip(secs)
        .map(|((spec, seeds), s)| EvalReport::new(spec.label(cfg.variant), prep.test_year, seeds, s))
        .collect();
    let attention = attention
        .into_iter()
        .map(|((county, history_year), (sum, n))| AttentionRow {
            county,
            target_year: prep.test_year,
            history_year,
            beta: sum / n as f64,
        })
        .collect();
    let (stage, refined) = first.unwrap_or_default();
    info!("run finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(RunArtifacts {
        config: cfg.clone(),
        reports,
        attention,
        retrieval: stage.results.into_values().collect(),
        biases: stage.biases,
        refined,
        models: models_out,
        test_year: prep.test_year,
    })
}

impl ExperimentConfig {
    pub fn spec(&self) -> VariantSpec {
        VariantSpec {
            integration: self.integration,
            refine: self.refine,
        }
    }
}

/// Runs the configured variant over every seed and writes artefacts when
/// an output directory is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let art = run_with_artifacts(cfg)?;
    Ok(art.reports.into_iter().next().expect("one variant"))
}

/// As [`run_experiment`], keeping the upstream artefacts.
pub fn run_with_artifacts(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = load_data(cfg).stage("load")?;
    let prep = prepare(&data, cfg.test_year).stage("split")?;
    let art = run_variants(&prep, cfg, &[cfg.spec()])?;
    if let Some(dir) = &cfg.output_dir {
        export_diagnostics(&art, dir).stage("export")?;
    }
    Ok(art)
}

/// The ablation matrix: full pipeline, without refinement, plain yearly
/// model, reduced recurrent-attention model, and context integration.
pub fn ablation_specs() -> [VariantSpec; 4] {
    [
        VariantSpec {
            integration: Integration::Finetune,
            refine: true,
        },
        VariantSpec {
            integration: Integration::Finetune,
            refine: false,
        },
        VariantSpec {
            integration: Integration::None,
            refine: false,
        },
        VariantSpec {
            integration: Integration::Context,
            refine: true,
        },
    ]
}

/// Runs every ablation variant on shared data and seeds. The reduced
/// model is trained separately.
pub fn ablate_prepared(prep: &Prepared, cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    let lyra_cfg = ExperimentConfig {
        variant: Variant::Lyra,
        ..cfg.clone()
    };
    let mut reports = run_variants(prep, &lyra_cfg, &ablation_specs())?.reports;
    let reduced = ExperimentConfig {
        variant: Variant::GruAtt,
        integration: Integration::None,
        ..cfg.clone()
    };
    reports.extend(run_variants(prep, &reduced, &[reduced.spec()])?.reports);
    Ok(reports)
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let data = load_data(cfg).stage("load")?;
    let prep = prepare(&data, cfg.test_year).stage("split")?;
    let reports = ablate_prepared(&prep, cfg)?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        write_ablation_csv(&reports, dir.join("ablation.csv")).stage("export")?;
    }
    Ok(reports)
}

/// Parameter varied by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Lookback,
    Threshold,
    Topk,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lookback" => Ok(SweepAxis::Lookback),
            "threshold" => Ok(SweepAxis::Threshold),
            "topk" => Ok(SweepAxis::Topk),
            _ => Err(Error::contract(format!("unknown sweep axis '{s}'"))),
        }
    }
}

/// One sweep value with its report and how many samples were retrieved
/// in total over counties and seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: EvalReport,
    pub retrieved: usize,
}

/// Applies one sweep value to a copy of the configuration.
pub fn with_axis_value(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let count = || -> Result<usize> {
        if value >= 1.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(Error::contract(format!("{axis:?} value {value} must be a positive integer")))
        }
    };
    match axis {
        SweepAxis::Lookback => c.lookback = count()?,
        SweepAxis::Threshold => {
            if !(-1.0..=1.0).contains(&value) {
                return Err(Error::contract(format!("threshold {value} must lie in [-1, 1]")));
            }
            c.retrieval_cfg.threshold = value;
        }
        SweepAxis::Topk => c.retrieval_cfg.top_k = Some(count()?),
    }
    Ok(c)
}

/// One experiment per value with shared data and seeds.
pub fn sweep_prepared(prep: &Prepared, cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepPoint>> {
    let cfgs = values
        .iter()
        .map(|&v| with_axis_value(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(values.len());
    for (&value, c) in values.iter().zip(&cfgs) {
        let art = run_variants(prep, c, &[c.spec()]).stage(format!("sweep[{value}]"))?;
        let report = art.reports.into_iter().next().expect("one variant");
        let retrieved = report
            .seeds
            .iter()
            .flat_map(|s| &s.outcomes)
            .map(|o| o.retrieved)
            .sum();
        out.push(SweepPoint {
            value,
            report,
            retrieved,
        });
    }
    Ok(out)
}

pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::contract("sweep needs at least one value"));
    }
    let data = load_data(cfg).stage("load")?;
    let prep = prepare(&data, cfg.test_year).stage("split")?;
    let points = sweep_prepared(&prep, cfg, axis, values)?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        write_sweep_csv(axis, &points, dir.join("sweep.csv")).stage("export")?;
    }
    Ok(points)
}
