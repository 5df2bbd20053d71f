//! Global training of the GRU regressor and the yearly model, and
//! per-county fine-tuning.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{GruDims, GruParams, LyraBatch, LyraDims, LyraParams, LyraSample, Variant, YearInput};
use crate::data::{CountyId, Dataset, NormStats, YearIndex};
use crate::error::{Error, Result};
use crate::numcore::{Adam, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    /// Stop after this many epochs without a lower epoch loss.
    pub patience: Option<usize>,
    /// Feed the global model's prediction into the target year's label
    /// slot during training, as at test time.
    pub substitute_target_label: bool,
    /// Keep GRU and attention-pooling weights fixed while fine-tuning.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            clip_norm: Some(5.0),
            finetune_lr: 1e-4,
            finetune_epochs: 20,
            patience: None,
            substitute_target_label: true,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.finetune_lr > 0.0) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::contract("clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-epoch mean training loss (normalised units) and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Writes `epoch,loss`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["epoch", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes a JSON summary with the final loss, seconds and checkpoint path.
    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let summary = serde_json::json!({
            "epochs": self.losses.len(),
            "final_loss": self.final_loss(),
            "seconds": self.seconds,
            "checkpoint": self.checkpoint,
        });
        let mut f = std::fs::File::create(path.as_ref())?;
        writeln!(f, "{}", serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }
}

/// One supervised example for the yearly model; `target` is normalised.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub county: CountyId,
    pub sample: LyraSample,
    pub target: f64,
}

/// Normalised global-model predictions keyed by (county, year).
pub type LabelSubstitutes = HashMap<(CountyId, YearIndex), f64>;

/// Predicts every record of a normalised dataset with `f`, in normalised units.
pub fn global_predictions(f: &GruParams, ds: &Dataset) -> Result<LabelSubstitutes> {
    let seqs: Vec<&Tensor> = ds.records().iter().map(|r| r.features.as_ref()).collect();
    let preds = f.predict_normalized(&seqs, 128)?;
    Ok(ds
        .records()
        .iter()
        .zip(preds)
        .map(|(r, p)| ((r.county.clone(), r.year), p))
        .collect())
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            epoch,
            msg: format!("loss became {loss}"),
        })
    }
}

/// Tracks the early-stopping rule.
struct Patience {
    limit: Option<usize>,
    best: f64,
    stale: usize,
}

impl Patience {
    fn new(limit: Option<usize>) -> Self {
        Patience {
            limit,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    fn should_stop(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.limit.is_some_and(|p| self.stale >= p)
    }
}

/// Fits `f` on every labelled record of a normalised training set.
pub fn train_global(train: &Dataset, dims: GruDims, norm: &NormStats, cfg: &TrainConfig) -> Result<(GruParams, TrainReport)> {
    cfg.validate()?;
    let labelled: Vec<(&Tensor, f64)> = train
        .records()
        .iter()
        .filter_map(|r| r.label().map(|y| (r.features.as_ref(), y)))
        .collect();
    if labelled.is_empty() {
        return Err(Error::contract("global training needs labelled records"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GruParams::new(dims, norm.clone(), &mut rng)?;
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut order: Vec<usize> = (0..labelled.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut patience = Patience::new(cfg.patience);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&Tensor> = chunk.iter().map(|&i| labelled[i].0).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| labelled[i].1).collect();
            let mut tape = Tape::new();
            let pred = model.forward(&mut tape, &model.store, &seqs)?;
            let target = tape.constant(Tensor::matrix(ys.len(), 1, ys)?);
            let loss = tape.mse(pred, target)?;
            let lv = tape.value(loss).item()?;
            check_finite(epoch, lv)?;
            total += lv * chunk.len() as f64;
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store, cfg.clip_norm);
        }
        let mean = total / labelled.len() as f64;
        check_finite(epoch, mean)?;
        losses.push(mean);
        if epoch == 1 || epoch % 10 == 0 {
            info!("global epoch {epoch}: loss {mean:.5}");
        }
        if patience.should_stop(mean) {
            break;
        }
    }
    Ok((
        model,
        TrainReport {
            losses,
            seconds: start.elapsed().as_secs_f64(),
            checkpoint: None,
        },
    ))
}

/// Builds yearly-model training samples from a normalised training set.
///
/// Every labelled county-year with at least one labelled year inside its
/// look-back window becomes a sample (all labelled years for the reduced
/// variant). History years carry observed labels; the target's label slot
/// carries the `substitutes` entry when `substitute` is set, otherwise
/// the observed label.
pub fn lyra_training_samples(
    train: &Dataset,
    substitutes: &LabelSubstitutes,
    lookback: usize,
    variant: Variant,
    substitute: bool,
) -> Result<Vec<TrainingSample>> {
    if lookback == 0 {
        return Err(Error::contract("look-back window must be at least 1"));
    }
    let mut out = Vec::new();
    for county in train.counties() {
        let series: Vec<(YearIndex, &crate::data::CountyYearRecord, f64)> = train
            .county_records(county)
            .filter_map(|r| r.label().map(|y| (r.year, r, y)))
            .collect();
        for &(year, rec, y) in &series {
            let history: Vec<YearInput> = match variant {
                Variant::GruAtt => Vec::new(),
                Variant::Lyra => series
                    .iter()
                    .filter(|(k, _, _)| *k < year && *k >= year - lookback as YearIndex)
                    .map(|(k, r, yk)| YearInput {
                        features: r.features.clone(),
                        label: *yk,
                        year: *k,
                    })
                    .collect(),
            };
            if variant == Variant::Lyra && history.is_empty() {
                continue;
            }
            let slot = if substitute {
                *substitutes.get(&(county.clone(), year)).ok_or_else(|| {
                    Error::contract(format!("no substitute label for ({county}, {year})"))
                })?
            } else {
                y
            };
            out.push(TrainingSample {
                county: county.clone(),
                sample: LyraSample {
                    target: YearInput {
                        features: rec.features.clone(),
                        label: slot,
                        year,
                    },
                    history,
                },
                target: y,
            });
        }
    }
    Ok(out)
}

/// Runs `epochs` passes of Adam over `samples`; batches are formed from
/// shuffled `groups` of sample indices until they hold `batch_size`
/// samples. Returns the per-epoch mean loss.
#[allow(clippy::too_many_arguments)]
fn fit_samples(
    model: &mut LyraParams,
    samples: &[TrainingSample],
    groups: &[Vec<usize>],
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    frozen: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let frozen_ids = frozen.iter().map(|n| model.store.id(n)).collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(&model.store, lr);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    let mut patience = Patience::new(cfg.patience);
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let mut batches: Vec<Vec<usize>> = Vec::new();
        let mut current = Vec::new();
        for &g in &order {
            current.extend_from_slice(&groups[g]);
            if current.len() >= cfg.batch_size {
                batches.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            batches.push(current);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in batches {
            let part: Vec<LyraSample> = idx.iter().map(|&i| samples[i].sample.clone()).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| samples[i].target).collect();
            let batch = LyraBatch::from_samples(&part);
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &model.store, &batch)?;
            let target = tape.constant(Tensor::matrix(ys.len(), 1, ys)?);
            let loss = tape.mse(fwd.pred, target)?;
            let lv = tape.value(loss).item()?;
            check_finite(epoch, lv)?;
            total += lv * idx.len() as f64;
            count += idx.len();
            tape.backward(loss, &mut model.store)?;
            zero_grads(&mut model.store, &frozen_ids);
            adam.step(&mut model.store, cfg.clip_norm);
        }
        let mean = total / count.max(1) as f64;
        losses.push(mean);
        if epoch == 1 || epoch % 10 == 0 {
            info!("yearly-model epoch {epoch}: loss {mean:.5}");
        }
        if patience.should_stop(mean) {
            break;
        }
    }
    Ok(losses)
}

fn zero_grads(store: &mut ParamStore, ids: &[crate::numcore::ParamId]) {
    for &id in ids {
        store.zero_grad_of(id);
    }
}

/// Trains the yearly model on a normalised training set.
///
/// Batches hold whole counties so that each county-year is encoded once
/// per batch however many windows it appears in.
pub fn train_lyra(
    train: &Dataset,
    substitutes: &LabelSubstitutes,
    dims: LyraDims,
    year_range: (YearIndex, YearIndex),
    norm: &NormStats,
    cfg: &TrainConfig,
) -> Result<(LyraParams, TrainReport)> {
    cfg.validate()?;
    if dims.lookback == 0 {
        return Err(Error::contract("look-back window must be at least 1"));
    }
    let samples = lyra_training_samples(train, substitutes, dims.lookback, dims.variant, cfg.substitute_target_label)?;
    if samples.is_empty() {
        return Err(Error::contract("no county has a target year with a prior year in its window"));
    }
    let mut by_county: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_county.entry(s.county.as_str()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_county.into_values().collect();

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = LyraParams::new(dims, year_range.0, year_range.1, norm.clone(), &mut rng)?;
    let losses = fit_samples(&mut model, &samples, &groups, cfg.epochs, cfg.lr, cfg, &[], &mut rng)?;
    model.trained_years = train.years().to_vec();
    model.refresh_untrained_years()?;
    Ok((
        model,
        TrainReport {
            losses,
            seconds: start.elapsed().as_secs_f64(),
            checkpoint: None,
        },
    ))
}

/// Result of [`fine_tune`].
#[derive(Clone, Debug)]
pub struct FineTuned {
    pub params: LyraParams,
    pub losses: Vec<f64>,
    /// Set when fine-tuning was skipped.
    pub warning: Option<String>,
}

/// Returns a copy of `p` tuned on `samples` with the fine-tuning learning
/// rate and epoch count; `p` itself is untouched.
pub fn fine_tune(p: &LyraParams, samples: &[TrainingSample], cfg: &TrainConfig) -> Result<FineTuned> {
    cfg.validate()?;
    if samples.is_empty() {
        warn!("fine-tuning skipped: no samples");
        return Ok(FineTuned {
            params: p.clone(),
            losses: Vec::new(),
            warning: Some("empty sample set; parameters returned unchanged".into()),
        });
    }
    let mut params = p.clone();
    if cfg.finetune_epochs == 0 {
        return Ok(FineTuned {
            params,
            losses: Vec::new(),
            warning: None,
        });
    }
    let frozen = if cfg.freeze_encoder {
        params.encoder_param_names()
    } else {
        Vec::new()
    };
    let groups: Vec<Vec<usize>> = (0..samples.len()).map(|i| vec![i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f17e);
    let losses = fit_samples(
        &mut params,
        samples,
        &groups,
        cfg.finetune_epochs,
        cfg.finetune_lr,
        cfg,
        &frozen,
        &mut rng,
    )?;
    params.refresh_untrained_years()?;
    Ok(FineTuned {
        params,
        losses,
        warning: None,
    })
}
