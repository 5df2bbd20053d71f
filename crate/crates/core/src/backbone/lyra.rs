use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gru::{time_major, Gru};
use super::mlp::Mlp;
use crate::data::{CountyId, CountyYearRecord, NormStats, YearIndex};
use crate::error::{Error, Result};
use crate::numcore::{softmax, ParamId, ParamStore, Tape, Tensor, Var};

/// Which parts of the yearly model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Label and year-index injection plus cross-year attention.
    Lyra,
    /// Encoder, attention pooling and head only; one year at a time.
    GruAtt,
}

/// Layer widths and look-back length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyraDims {
    pub d: usize,
    pub hidden: usize,
    pub gru_layers: usize,
    pub attn_hidden: usize,
    pub year_dim: usize,
    pub embed_hidden: usize,
    pub z_dim: usize,
    pub head_hidden: usize,
    pub lookback: usize,
    pub variant: Variant,
}

impl LyraDims {
    pub fn new(d: usize) -> Self {
        LyraDims {
            d,
            hidden: 64,
            gru_layers: 1,
            attn_hidden: 32,
            year_dim: 8,
            embed_hidden: 64,
            z_dim: 64,
            head_hidden: 64,
            lookback: 5,
            variant: Variant::Lyra,
        }
    }

    /// Width of the embedding MLP input.
    pub fn embed_input(&self) -> usize {
        match self.variant {
            Variant::Lyra => self.hidden + 1 + self.year_dim,
            Variant::GruAtt => self.hidden,
        }
    }
}

/// One county-year as model input: normalised features, the normalised
/// label slot value and the year index.
#[derive(Clone, Debug)]
pub struct YearInput {
    pub features: Arc<Tensor>,
    pub label: f64,
    pub year: YearIndex,
}

/// A target year and its look-back years.
#[derive(Clone, Debug)]
pub struct LyraSample {
    pub target: YearInput,
    pub history: Vec<YearInput>,
}

/// Embedding request: sequence slot, normalised label, year.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedRequest {
    pub seq: usize,
    pub label: f64,
    pub year: YearIndex,
}

/// Prediction request over rows of the embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub target: usize,
    pub history: Vec<usize>,
}

/// Deduplicated inputs for one batched forward pass.
#[derive(Clone, Debug, Default)]
pub struct LyraBatch {
    pub seqs: Vec<Arc<Tensor>>,
    pub embeds: Vec<EmbedRequest>,
    pub samples: Vec<SampleRequest>,
}

impl LyraBatch {
    /// Packs samples, sharing encoder work for repeated sequences and
    /// repeated (sequence, label, year) embeddings.
    pub fn from_samples(samples: &[LyraSample]) -> LyraBatch {
        let mut batch = LyraBatch::default();
        let mut seq_slot: HashMap<*const Tensor, usize> = HashMap::new();
        let mut embed_slot: HashMap<(usize, u64, YearIndex), usize> = HashMap::new();
        let mut slot_of = |batch: &mut LyraBatch, y: &YearInput| -> usize {
            let ptr = Arc::as_ptr(&y.features);
            let seq = *seq_slot.entry(ptr).or_insert_with(|| {
                batch.seqs.push(y.features.clone());
                batch.seqs.len() - 1
            });
            *embed_slot.entry((seq, y.label.to_bits(), y.year)).or_insert_with(|| {
                batch.embeds.push(EmbedRequest {
                    seq,
                    label: y.label,
                    year: y.year,
                });
                batch.embeds.len() - 1
            })
        };
        for s in samples {
            let target = slot_of(&mut batch, &s.target);
            let history = s.history.iter().map(|h| slot_of(&mut batch, h)).collect();
            batch.samples.push(SampleRequest { target, history });
        }
        batch
    }
}

/// Tape handles produced by [`LyraParams::forward`].
#[derive(Debug)]
pub struct LyraForward {
    /// Normalised predictions `[S×1]`.
    pub pred: Var,
    /// Intra-year attention weights `[B×T]`, one row per sequence.
    pub alpha: Var,
    /// Yearly embeddings `[E×Z]`, one row per embedding request.
    pub z: Var,
    /// Cross-year weights `[1×m]` per sample; `None` without history.
    pub betas: Vec<Option<Var>>,
}

/// Output of [`LyraParams::predict_samples`] for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Normalised prediction.
    pub y: f64,
    /// Cross-year weights over the sample's history, in history order.
    pub beta: Vec<f64>,
    /// Intra-year weights of the target year.
    pub alpha: Vec<f64>,
}

/// A county-year's yearly embedding together with the label that went in.
#[derive(Clone, Debug, PartialEq)]
pub struct YearlyEmbedding {
    pub county: CountyId,
    pub year: YearIndex,
    pub z: Vec<f64>,
    pub label_used: f64,
}

/// Target embedding and the history it attends over.
#[derive(Clone, Debug, PartialEq)]
pub struct LookbackContext {
    pub target: YearlyEmbedding,
    pub history: Vec<YearlyEmbedding>,
}

/// `β = softmax_k(z_k · z_target)`, `z̃ = z_target + Σ_k β_k z_k`.
pub fn cross_year_attention(ctx: &LookbackContext) -> Result<(Vec<f64>, Vec<f64>)> {
    if ctx.history.is_empty() {
        return Err(Error::contract("cross-year attention needs at least one history year"));
    }
    let zt = &ctx.target.z;
    if let Some(h) = ctx.history.iter().find(|h| h.z.len() != zt.len()) {
        return Err(Error::dim(format!(
            "history year {} has embedding width {}, target has {}",
            h.year,
            h.z.len(),
            zt.len()
        )));
    }
    let scores = ctx
        .history
        .iter()
        .map(|h| h.z.iter().zip(zt).map(|(a, b)| a * b).sum())
        .collect();
    let beta = softmax(&Tensor::vector(scores)?)?.into_data();
    let mut out = zt.clone();
    for (b, h) in beta.iter().zip(&ctx.history) {
        for (o, v) in out.iter_mut().zip(&h.z) {
            *o += b * v;
        }
    }
    Ok((beta, out))
}

/// Parameters of the yearly model plus the statistics needed to read its
/// outputs in physical units.
#[derive(Clone, Debug)]
pub struct LyraParams {
    pub store: ParamStore,
    pub dims: LyraDims,
    pub norm: NormStats,
    /// Years whose embedding rows were fitted; other rows mirror the
    /// nearest of these.
    pub trained_years: Vec<YearIndex>,
    first_year: YearIndex,
    last_year: YearIndex,
    gru: Gru,
    attn: Mlp,
    year_table: Option<ParamId>,
    embed: Mlp,
    head: Mlp,
}

impl LyraParams {
    /// Allocates a model whose year-embedding table covers
    /// `first_year..=last_year`.
    pub fn new<R: Rng>(
        dims: LyraDims,
        first_year: YearIndex,
        last_year: YearIndex,
        norm: NormStats,
        rng: &mut R,
    ) -> Result<LyraParams> {
        if dims.lookback == 0 {
            return Err(Error::contract("look-back window must be at least 1"));
        }
        if last_year < first_year {
            return Err(Error::contract(format!("empty year range {first_year}..={last_year}")));
        }
        if norm.feature_mean.len() != dims.d {
            return Err(Error::dim(format!(
                "normalisation covers {} features, model has {}",
                norm.feature_mean.len(),
                dims.d
            )));
        }
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", dims.d, dims.hidden, dims.gru_layers, rng)?;
        let attn = Mlp::new(&mut store, "attn", &[dims.hidden, dims.attn_hidden, 1], rng)?;
        let year_table = match dims.variant {
            Variant::Lyra => {
                let n = (last_year - first_year + 1) as usize;
                Some(store.insert_uniform("year_embedding", &[n, dims.year_dim], 0.5, rng)?)
            }
            Variant::GruAtt => None,
        };
        let embed = Mlp::new(&mut store, "embed", &[dims.embed_input(), dims.embed_hidden, dims.z_dim], rng)?;
        let head = Mlp::new(&mut store, "head", &[dims.z_dim, dims.head_hidden, 1], rng)?;
        Ok(LyraParams {
            store,
            dims,
            norm,
            trained_years: Vec::new(),
            first_year,
            last_year,
            gru,
            attn,
            year_table,
            embed,
            head,
        })
    }

    pub fn first_year(&self) -> YearIndex {
        self.first_year
    }

    pub fn last_year(&self) -> YearIndex {
        self.last_year
    }

    pub fn gru(&self) -> &Gru {
        &self.gru
    }

    pub fn attn_mlp(&self) -> &Mlp {
        &self.attn
    }

    pub fn embed_mlp(&self) -> &Mlp {
        &self.embed
    }

    pub fn head_mlp(&self) -> &Mlp {
        &self.head
    }

    pub fn year_table(&self) -> Option<ParamId> {
        self.year_table
    }

    /// Names of the encoder parameters (GRU and attention MLP).
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("gru.") || n.starts_with("attn."))
            .map(str::to_string)
            .collect()
    }

    /// Row of `year` in the year-embedding table.
    pub fn year_row(&self, year: YearIndex) -> Result<usize> {
        if year < self.first_year || year > self.last_year {
            return Err(Error::contract(format!(
                "year {year} has no embedding row (table covers {}..={})",
                self.first_year, self.last_year
            )));
        }
        Ok((year - self.first_year) as usize)
    }

    /// Overwrites the embedding row of `to` with that of `from`.
    pub fn copy_year_row(&mut self, from: YearIndex, to: YearIndex) -> Result<()> {
        let Some(id) = self.year_table else {
            return Ok(());
        };
        let (src, dst) = (self.year_row(from)?, self.year_row(to)?);
        let e = self.dims.year_dim;
        let data = self.store.value_mut(id).data_mut();
        let row: Vec<f64> = data[src * e..(src + 1) * e].to_vec();
        data[dst * e..(dst + 1) * e].copy_from_slice(&row);
        Ok(())
    }

    /// Gives every year outside `trained` the embedding of the nearest
    /// trained year (the earlier one on ties).
    pub fn fill_untrained_years(&mut self, trained: &[YearIndex]) -> Result<()> {
        if trained.is_empty() {
            return Err(Error::contract("no trained years to copy embeddings from"));
        }
        for year in self.first_year..=self.last_year {
            if trained.contains(&year) {
                continue;
            }
            let nearest = *trained
                .iter()
                .min_by_key(|&&k| ((k - year).abs(), k))
                .expect("non-empty");
            self.copy_year_row(nearest, year)?;
        }
        Ok(())
    }

    /// Re-applies [`LyraParams::fill_untrained_years`] with the recorded
    /// trained years; a no-op before training.
    pub fn refresh_untrained_years(&mut self) -> Result<()> {
        if self.trained_years.is_empty() {
            return Ok(());
        }
        let trained = self.trained_years.clone();
        self.fill_untrained_years(&trained)
    }

    /// GRU encoding and attention pooling of `seqs`.
    /// Returns `(pooled [B×H], α [B×T])`.
    pub fn encode_pool(&self, tape: &mut Tape, store: &ParamStore, seqs: &[&Tensor]) -> Result<(Var, Var)> {
        let b = seqs.len();
        let t = seqs.first().ok_or_else(|| Error::dim("no sequences to encode"))?.rows();
        let x = tape.constant(time_major(seqs)?);
        let states = self.gru.forward(tape, store, x, t, b)?;
        self.attention_pool_states(tape, store, &states)
    }

    /// `α = softmax_t(MLP(h_t))` per sequence and `Σ_t α_t h_t`.
    pub fn attention_pool_states(&self, tape: &mut Tape, store: &ParamStore, states: &[Var]) -> Result<(Var, Var)> {
        let t = states.len();
        let b = tape.value(states[0]).rows();
        let all = tape.concat_rows(states)?;
        let scores = self.attn.forward(tape, store, all)?;
        let scores = tape.reshape(scores, vec![t, b])?;
        let scores = tape.transpose(scores)?;
        let alpha = tape.softmax(scores)?;
        let mut pooled = None;
        for (step, &h) in states.iter().enumerate() {
            let a = tape.slice_cols(alpha, step, 1)?;
            let term = tape.scale_rows(h, a)?;
            pooled = Some(match pooled {
                None => term,
                Some(p) => tape.add(p, term)?,
            });
        }
        Ok((pooled.expect("at least one step"), alpha))
    }

    /// `embed_mlp([pooled, label, Embed(year)])` for each request, or
    /// `embed_mlp(pooled)` for the reduced variant.
    pub fn embed_rows(&self, tape: &mut Tape, store: &ParamStore, pooled: Var, embeds: &[EmbedRequest]) -> Result<Var> {
        let slots: Vec<usize> = embeds.iter().map(|e| e.seq).collect();
        let p = tape.gather_rows(pooled, &slots)?;
        let input = match self.year_table {
            Some(table) => {
                let labels = tape.constant(Tensor::matrix(
                    embeds.len(),
                    1,
                    embeds.iter().map(|e| e.label).collect(),
                )?);
                let rows = embeds
                    .iter()
                    .map(|e| self.year_row(e.year))
                    .collect::<Result<Vec<_>>>()?;
                let tv = tape.param(store, table);
                let years = tape.gather_rows(tv, &rows)?;
                tape.concat_cols(&[p, labels, years])?
            }
            None => p,
        };
        self.embed.forward(tape, store, input)
    }

    /// Cross-year attention for every sample; returns `z̃ [S×Z]` and the
    /// per-sample weights.
    pub fn attend(&self, tape: &mut Tape, z: Var, samples: &[SampleRequest]) -> Result<(Var, Vec<Option<Var>>)> {
        let mut rows = Vec::with_capacity(samples.len());
        let mut betas = Vec::with_capacity(samples.len());
        for s in samples {
            let zt = tape.gather_rows(z, &[s.target])?;
            if self.dims.variant == Variant::GruAtt || s.history.is_empty() {
                if self.dims.variant == Variant::Lyra {
                    return Err(Error::contract("sample has an empty look-back window"));
                }
                rows.push(zt);
                betas.push(None);
                continue;
            }
            let zh = tape.gather_rows(z, &s.history)?;
            let zh_t = tape.transpose(zh)?;
            let scores = tape.matmul(zt, zh_t)?;
            let beta = tape.softmax(scores)?;
            let ctx = tape.matmul(beta, zh)?;
            rows.push(tape.add(zt, ctx)?);
            betas.push(Some(beta));
        }
        Ok((tape.concat_rows(&rows)?, betas))
    }

    /// Full batched forward pass.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &LyraBatch) -> Result<LyraForward> {
        if batch.samples.is_empty() {
            return Err(Error::contract("forward pass over zero samples"));
        }
        let seqs: Vec<&Tensor> = batch.seqs.iter().map(Arc::as_ref).collect();
        let (pooled, alpha) = self.encode_pool(tape, store, &seqs)?;
        let z = self.embed_rows(tape, store, pooled, &batch.embeds)?;
        let (zt, betas) = self.attend(tape, z, &batch.samples)?;
        let pred = self.head.forward(tape, store, zt)?;
        Ok(LyraForward { pred, alpha, z, betas })
    }

    /// Normalised predictions with attention diagnostics, evaluated in
    /// chunks of `chunk` samples.
    pub fn predict_samples(&self, samples: &[LyraSample], chunk: usize) -> Result<Vec<SampleOutput>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let batch = LyraBatch::from_samples(part);
            let mut tape = Tape::new();
            let fwd = self.forward(&mut tape, &self.store, &batch)?;
            let pred = tape.value(fwd.pred);
            let alpha = tape.value(fwd.alpha);
            for (i, s) in batch.samples.iter().enumerate() {
                let seq = batch.embeds[s.target].seq;
                out.push(SampleOutput {
                    y: pred.data()[i],
                    beta: fwd.betas[i].map(|b| tape.value(b).data().to_vec()).unwrap_or_default(),
                    alpha: alpha.row(seq).to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Yearly embeddings of the given inputs, in order.
    pub fn embed_inputs(&self, inputs: &[YearInput], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for part in inputs.chunks(chunk.max(1)) {
            let samples: Vec<LyraSample> = part
                .iter()
                .map(|y| LyraSample {
                    target: y.clone(),
                    history: Vec::new(),
                })
                .collect();
            let batch = LyraBatch::from_samples(&samples);
            let mut tape = Tape::new();
            let seqs: Vec<&Tensor> = batch.seqs.iter().map(Arc::as_ref).collect();
            let (pooled, _) = self.encode_pool(&mut tape, &self.store, &seqs)?;
            let z = self.embed_rows(&mut tape, &self.store, pooled, &batch.embeds)?;
            let zv = tape.value(z);
            out.extend(batch.samples.iter().map(|s| zv.row(s.target).to_vec()));
        }
        Ok(out)
    }

    /// Hidden states `[T×H]` of one normalised feature matrix.
    pub fn gru_encode(&self, x: &Tensor) -> Result<Tensor> {
        self.gru.encode(&self.store, x)
    }

    /// Intra-year weights and pooled state of hidden states `[T×H]`.
    pub fn attention_pool(&self, h: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if h.cols() != self.dims.hidden {
            return Err(Error::dim(format!("hidden width {} != {}", h.cols(), self.dims.hidden)));
        }
        let mut tape = Tape::new();
        let states = (0..h.rows())
            .map(|t| Ok(tape.constant(Tensor::matrix(1, h.cols(), h.row(t).to_vec())?)))
            .collect::<Result<Vec<_>>>()?;
        let (pooled, alpha) = self.attention_pool_states(&mut tape, &self.store, &states)?;
        Ok((tape.value(alpha).data().to_vec(), tape.value(pooled).data().to_vec()))
    }

    /// Yearly embedding of a pooled state with a normalised label.
    pub fn yearly_embedding(&self, pooled: &[f64], label: f64, year: YearIndex) -> Result<Vec<f64>> {
        if pooled.len() != self.dims.hidden {
            return Err(Error::dim(format!("pooled width {} != {}", pooled.len(), self.dims.hidden)));
        }
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(1, pooled.len(), pooled.to_vec())?);
        let z = self.embed_rows(&mut tape, &self.store, p, &[EmbedRequest { seq: 0, label, year }])?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Head output (normalised) for an attended embedding.
    pub fn head_predict(&self, z: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let y = self.head.forward(&mut tape, &self.store, zv)?;
        tape.value(y).item()
    }

    /// Predicts the target year of one county in physical units from
    /// normalised records. `series` must contain the target year; history
    /// comes from up to `lookback` preceding years with observed labels,
    /// and the target's label slot is `target_label` (normalised).
    pub fn predict_series(
        &self,
        series: &[&CountyYearRecord],
        target_year: YearIndex,
        target_label: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let sample = lookback_sample(series, target_year, target_label, self.dims.lookback)?;
        let out = self.predict_samples(std::slice::from_ref(&sample), 1)?;
        Ok((self.norm.denormalize_label(out[0].y), out[0].beta.clone()))
    }
}

/// Builds a sample from one county's normalised records: the target year
/// with label slot `target_label`, plus the labelled years among the
/// `lookback` years before it.
pub fn lookback_sample(
    series: &[&CountyYearRecord],
    target_year: YearIndex,
    target_label: f64,
    lookback: usize,
) -> Result<LyraSample> {
    let target = series
        .iter()
        .find(|r| r.year == target_year)
        .ok_or_else(|| Error::contract(format!("no features for target year {target_year}")))?;
    let window = (target_year - lookback as YearIndex)..target_year;
    let mut history = Vec::new();
    let mut missing = Vec::new();
    for year in window {
        match series.iter().find(|r| r.year == year).and_then(|r| r.label().map(|y| (r, y))) {
            Some((r, y)) => history.push(YearInput {
                features: r.features.clone(),
                label: y,
                year,
            }),
            None => missing.push(year),
        }
    }
    if history.is_empty() {
        return Err(Error::contract(format!(
            "county {} has no history before {target_year}; missing years {missing:?}",
            target.county
        )));
    }
    Ok(LyraSample {
        target: YearInput {
            features: target.features.clone(),
            label: target_label,
            year: target_year,
        },
        history,
    })
}
