//! Per-year label regressors over yearly embeddings, cross-year bias
//! matrices, linear bias extrapolation and label refinement.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::Mlp;
use crate::data::{CountyId, CountyYearRecord, NormStats, YearIndex};
use crate::error::{Error, Result};
use crate::numcore::{Adam, ParamStore, Tape, Tensor};
use crate::retrieval::RetrievalResult;

/// Model family for the per-year regressors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressorKind {
    Ridge,
    Mlp,
}

/// Whose bias matrix corrects a retrieved sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasOwner {
    /// The county the sample was retrieved from.
    Retrieved,
    /// The county being predicted.
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub regressor: RegressorKind,
    pub ridge_lambda: f64,
    /// Standard deviation of the label perturbation in physical units;
    /// `None` means 0.05 × the training label standard deviation.
    pub sigma: Option<f64>,
    /// Refined copies drawn per retrieved sample.
    pub copies: usize,
    pub bias_owner: BiasOwner,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            regressor: RegressorKind::Ridge,
            ridge_lambda: 10.0,
            sigma: None,
            copies: 1,
            bias_owner: BiasOwner::Retrieved,
        }
    }
}

impl RefineConfig {
    pub fn sigma_for(&self, norm: &NormStats) -> f64 {
        self.sigma.unwrap_or(0.05 * norm.label_std)
    }
}

/// Yearly embedding of one county-year with its label in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedYear {
    pub z: Vec<f64>,
    pub label: f64,
}

pub type EmbeddingTable = BTreeMap<(CountyId, YearIndex), EmbeddedYear>;

#[derive(Clone, Debug)]
enum RegressorModel {
    Linear { w: Vec<f64>, b: f64 },
    Mlp { store: ParamStore, mlp: Mlp, y_mean: f64, y_std: f64 },
}

/// `g_s`: maps a yearly embedding of year `s` to a label.
#[derive(Clone, Debug)]
pub struct YearRegressor {
    pub year: YearIndex,
    z_mean: Vec<f64>,
    z_std: Vec<f64>,
    model: RegressorModel,
}

impl YearRegressor {
    fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.z_mean)
            .zip(&self.z_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.z_mean.len() {
            return Err(Error::dim(format!("embedding width {} != {}", z.len(), self.z_mean.len())));
        }
        let x = self.standardize(z);
        match &self.model {
            RegressorModel::Linear { w, b } => Ok(b + w.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>()),
            RegressorModel::Mlp { store, mlp, y_mean, y_std } => {
                let mut tape = Tape::new();
                let xv = tape.constant(Tensor::matrix(1, x.len(), x)?);
                let y = mlp.forward(&mut tape, store, xv)?;
                Ok(tape.value(y).item()? * y_std + y_mean)
            }
        }
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major `n×n`).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::numeric("normal equations are not positive definite"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Ok(x)
}

fn column_stats(zs: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let p = zs[0].len();
    let n = zs.len() as f64;
    let mut mean = vec![0.0; p];
    for z in zs {
        for (m, v) in mean.iter_mut().zip(z.iter()) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; p];
    for z in zs {
        for ((s, v), m) in std.iter_mut().zip(z.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (mean, std)
}

/// Fits `g_s` on the embeddings and labels of year `s`. Embedding columns
/// are centred and scaled with the year's own statistics; the ridge penalty
/// `lambda` applies to the scaled weights, not the intercept.
pub fn fit_year_regressor(
    year: YearIndex,
    data: &[(&[f64], f64)],
    kind: RegressorKind,
    lambda: f64,
    seed: u64,
) -> Result<YearRegressor> {
    fit_year_regressor_scaled(year, data, kind, lambda, seed, None)
}

/// As [`fit_year_regressor`], but scales columns by `scale` (typically the
/// pooled standard deviation over all years) instead of the year's own.
/// Directions that barely vary within the year then carry little weight,
/// which keeps `g_s` stable on other years' embeddings.
pub fn fit_year_regressor_scaled(
    year: YearIndex,
    data: &[(&[f64], f64)],
    kind: RegressorKind,
    lambda: f64,
    seed: u64,
    scale: Option<&[f64]>,
) -> Result<YearRegressor> {
    if data.len() < 2 {
        return Err(Error::contract(format!(
            "year {year} has {} labelled embeddings; at least 2 are needed",
            data.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::contract("ridge penalty must be non-negative"));
    }
    let zs: Vec<&[f64]> = data.iter().map(|(z, _)| *z).collect();
    let p = zs[0].len();
    if zs.iter().any(|z| z.len() != p) {
        return Err(Error::dim(format!("year {year} embeddings have mixed widths")));
    }
    let (z_mean, own_std) = column_stats(&zs);
    let z_std = match scale {
        Some(sc) if sc.len() != p => {
            return Err(Error::dim(format!("scale has width {}, embeddings {p}", sc.len())));
        }
        Some(sc) => sc.iter().map(|s| if *s > 1e-12 { *s } else { 1.0 }).collect(),
        None => own_std,
    };
    let mut reg = YearRegressor {
        year,
        z_mean,
        z_std,
        model: RegressorModel::Linear { w: vec![0.0; p], b: 0.0 },
    };
    let xs: Vec<Vec<f64>> = zs.iter().map(|z| reg.standardize(z)).collect();
    let n = data.len() as f64;
    let y_mean = data.iter().map(|(_, y)| y).sum::<f64>() / n;
    reg.model = match kind {
        RegressorKind::Ridge => {
            // Standardised columns are centred, so the intercept is ȳ.
            let mut a = vec![0.0; p * p];
            let mut rhs = vec![0.0; p];
            for (x, (_, y)) in xs.iter().zip(data) {
                for i in 0..p {
                    rhs[i] += x[i] * (y - y_mean);
                    for j in 0..p {
                        a[i * p + j] += x[i] * x[j];
                    }
                }
            }
            for i in 0..p {
                a[i * p + i] += lambda.max(1e-12);
            }
            let w = cholesky_solve(&a, &rhs, p)?;
            RegressorModel::Linear { w, b: y_mean }
        }
        RegressorKind::Mlp => {
            let y_std = {
                let v = data.iter().map(|(_, y)| (y - y_mean).powi(2)).sum::<f64>() / n;
                if v > 1e-24 { v.sqrt() } else { 1.0 }
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ year as u64);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "g", &[p, 16, 1], &mut rng)?;
            let x = Tensor::from_rows(&xs)?;
            let t = Tensor::matrix(data.len(), 1, data.iter().map(|(_, y)| (y - y_mean) / y_std).collect())?;
            let mut adam = Adam::new(&store, 1e-2);
            for _ in 0..300 {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let pred = mlp.forward(&mut tape, &store, xv)?;
                let tv = tape.constant(t.clone());
                let mse = tape.mse(pred, tv)?;
                // weight decay plays the role of the ridge penalty
                let mut loss = mse;
                if lambda > 0.0 {
                    for l in 0..mlp.n_layers() {
                        let w = tape.param(&store, mlp.layer(l).0);
                        let sq = tape.mul(w, w)?;
                        let s = tape.sum(sq)?;
                        let s = tape.scale(s, lambda / n)?;
                        loss = tape.add(loss, s)?;
                    }
                }
                tape.backward(loss, &mut store)?;
                adam.step(&mut store, Some(5.0));
            }
            RegressorModel::Mlp {
                store,
                mlp,
                y_mean,
                y_std,
            }
        }
    };
    Ok(reg)
}

/// Fits one regressor per year with at least two labelled embeddings;
/// other years are skipped with a warning. Columns are scaled by their
/// pooled standard deviation over the whole table.
pub fn fit_year_regressors(table: &EmbeddingTable, cfg: &RefineConfig, seed: u64) -> Result<BTreeMap<YearIndex, YearRegressor>> {
    let mut by_year: BTreeMap<YearIndex, Vec<(&[f64], f64)>> = BTreeMap::new();
    for ((_, y), e) in table {
        by_year.entry(*y).or_default().push((e.z.as_slice(), e.label));
    }
    let all: Vec<&[f64]> = table.values().map(|e| e.z.as_slice()).collect();
    if all.is_empty() {
        return Ok(BTreeMap::new());
    }
    if all.iter().any(|z| z.len() != all[0].len()) {
        return Err(Error::dim("embedding table has mixed widths"));
    }
    let (_, pooled) = column_stats(&all);
    let mut out = BTreeMap::new();
    for (year, data) in by_year {
        if data.len() < 2 {
            warn!("year {year}: fewer than 2 embeddings; no regressor");
            continue;
        }
        out.insert(
            year,
            fit_year_regressor_scaled(year, &data, cfg.regressor, cfg.ridge_lambda, seed, Some(&pooled))?,
        );
    }
    Ok(out)
}

/// Cross-year biases of one county: `B[s,k] = y^k − g_s(z^k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasMatrix {
    pub county: CountyId,
    pub years: Vec<YearIndex>,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl BiasMatrix {
    /// Builds a matrix from row-major cells over ascending `years`; `None`
    /// marks an invalid cell.
    pub fn from_cells(county: impl Into<CountyId>, years: Vec<YearIndex>, cells: &[Option<f64>]) -> Result<Self> {
        if years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("bias matrix years must be strictly ascending"));
        }
        if cells.len() != years.len() * years.len() {
            return Err(Error::dim(format!(
                "{} cells for {} years",
                cells.len(),
                years.len()
            )));
        }
        Ok(BiasMatrix {
            county: county.into(),
            years,
            values: cells.iter().map(|c| c.unwrap_or(0.0)).collect(),
            valid: cells.iter().map(Option::is_some).collect(),
        })
    }

    fn index(&self, year: YearIndex) -> Option<usize> {
        self.years.binary_search(&year).ok()
    }

    /// `B[s,k]` when the cell is valid.
    pub fn get(&self, s: YearIndex, k: YearIndex) -> Option<f64> {
        let (i, j) = (self.index(s)?, self.index(k)?);
        let at = i * self.years.len() + j;
        self.valid[at].then_some(self.values[at])
    }

    /// Valid `(k, B[s,k])` cells of row `s`.
    pub fn row(&self, s: YearIndex) -> Vec<(YearIndex, f64)> {
        self.years.iter().filter_map(|&k| self.get(s, k).map(|b| (k, b))).collect()
    }
}

/// Fills `B[s,k]` for every year `s` with a regressor and every year `k`
/// where the county has an embedding and label.
pub fn build_bias_matrix(
    county: &str,
    regressors: &BTreeMap<YearIndex, YearRegressor>,
    table: &EmbeddingTable,
    years: &[YearIndex],
) -> Result<BiasMatrix> {
    let own: BTreeMap<YearIndex, &EmbeddedYear> = table
        .range((county.to_string(), YearIndex::MIN)..=(county.to_string(), YearIndex::MAX))
        .map(|((_, y), e)| (*y, e))
        .collect();
    if own.is_empty() {
        return Err(Error::contract(format!("county {county} has no yearly embeddings")));
    }
    let mut years = years.to_vec();
    years.sort_unstable();
    years.dedup();
    let k = years.len();
    let mut values = vec![0.0; k * k];
    let mut valid = vec![false; k * k];
    for (i, s) in years.iter().enumerate() {
        let Some(g) = regressors.get(s) else { continue };
        for (j, yk) in years.iter().enumerate() {
            if let Some(e) = own.get(yk) {
                values[i * k + j] = e.label - g.predict(&e.z)?;
                valid[i * k + j] = true;
            }
        }
    }
    Ok(BiasMatrix {
        county: county.to_string(),
        years,
        values,
        valid,
    })
}

/// Bias matrices of every county in the table.
pub fn build_bias_matrices(
    regressors: &BTreeMap<YearIndex, YearRegressor>,
    table: &EmbeddingTable,
) -> Result<BTreeMap<CountyId, BiasMatrix>> {
    let mut years: Vec<YearIndex> = table.keys().map(|(_, y)| *y).collect();
    years.sort_unstable();
    years.dedup();
    let mut counties: Vec<&CountyId> = table.keys().map(|(c, _)| c).collect();
    counties.dedup();
    counties
        .into_iter()
        .map(|c| Ok((c.clone(), build_bias_matrix(c, regressors, table, &years)?)))
        .collect()
}

/// How an extrapolated bias was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtrapolationKind {
    Line,
    RowMean,
    NoData,
}

/// Least-squares line through the valid cells of row `s`, evaluated at
/// `target`. One valid cell gives the row mean, none gives 0.
pub fn extrapolate_bias(b: &BiasMatrix, s: YearIndex, target: YearIndex) -> (f64, ExtrapolationKind) {
    extrapolate_points(&b.row(s), target)
}

/// The line fit behind [`extrapolate_bias`] on explicit `(k, value)` points.
pub fn extrapolate_points(points: &[(YearIndex, f64)], target: YearIndex) -> (f64, ExtrapolationKind) {
    match points.len() {
        0 => (0.0, ExtrapolationKind::NoData),
        1 => (points[0].1, ExtrapolationKind::RowMean),
        n => {
            let n = n as f64;
            let xm = points.iter().map(|(k, _)| *k as f64).sum::<f64>() / n;
            let ym = points.iter().map(|(_, v)| v).sum::<f64>() / n;
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (k, v) in points {
                let dx = *k as f64 - xm;
                sxy += dx * (v - ym);
                sxx += dx * dx;
            }
            if sxx == 0.0 {
                return (ym, ExtrapolationKind::RowMean);
            }
            (ym + sxy / sxx * (target as f64 - xm), ExtrapolationKind::Line)
        }
    }
}

/// One refined copy of a retrieved record.
#[derive(Clone, Debug)]
pub struct RefinedSample {
    pub record: CountyYearRecord,
    /// Original label, physical units.
    pub label: f64,
    pub bias_hat: f64,
    pub refined: f64,
    pub kind: ExtrapolationKind,
    /// The record had no bias matrix and passed through unrefined.
    pub unrefined: bool,
}

#[derive(Clone, Debug)]
pub struct RefinedSampleSet {
    pub query: CountyId,
    pub target_year: YearIndex,
    pub sigma: f64,
    pub entries: Vec<RefinedSample>,
}

/// Refines every retrieved record: `ỹ = y + b̂^{s,target} + σ·ε`.
///
/// Records come from a normalised dataset; `norm` converts their labels
/// to physical units.
pub fn refine_labels(
    retrieved: &RetrievalResult,
    biases: &BTreeMap<CountyId, BiasMatrix>,
    target_year: YearIndex,
    sigma: f64,
    cfg: &RefineConfig,
    norm: &NormStats,
    seed: u64,
) -> Result<RefinedSampleSet> {
    if !(sigma >= 0.0) {
        return Err(Error::contract(format!("sigma {sigma} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(retrieved.samples.len() * cfg.copies);
    for rec in &retrieved.samples {
        let label = physical_label(rec, norm)?;
        let owner = match cfg.bias_owner {
            BiasOwner::Retrieved => &rec.county,
            BiasOwner::Query => &retrieved.query,
        };
        let (bias_hat, kind, unrefined) = match biases.get(owner) {
            Some(b) => {
                let (v, k) = extrapolate_bias(b, rec.year, target_year);
                (v, k, false)
            }
            None => {
                warn!("no bias matrix for {owner}; sample ({}, {}) left unrefined", rec.county, rec.year);
                (0.0, ExtrapolationKind::NoData, true)
            }
        };
        for _ in 0..cfg.copies.max(1) {
            let eps: f64 = if sigma > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
            entries.push(RefinedSample {
                record: rec.clone(),
                label,
                bias_hat,
                refined: label + bias_hat + sigma * eps,
                kind,
                unrefined,
            });
        }
    }
    Ok(RefinedSampleSet {
        query: retrieved.query.clone(),
        target_year,
        sigma,
        entries,
    })
}

fn physical_label(rec: &CountyYearRecord, norm: &NormStats) -> Result<f64> {
    rec.label()
        .map(|y| norm.denormalize_label(y))
        .ok_or_else(|| Error::contract(format!("retrieved record ({}, {}) has no label", rec.county, rec.year)))
}

/// Retrieved records with their original labels, no bias and no noise.
pub fn unrefined_samples(retrieved: &RetrievalResult, target_year: YearIndex, norm: &NormStats) -> Result<RefinedSampleSet> {
    let entries = retrieved
        .samples
        .iter()
        .map(|rec| {
            let label = physical_label(rec, norm)?;
            Ok(RefinedSample {
                record: rec.clone(),
                label,
                bias_hat: 0.0,
                refined: label,
                kind: ExtrapolationKind::NoData,
                unrefined: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RefinedSampleSet {
        query: retrieved.query.clone(),
        target_year,
        sigma: 0.0,
        entries,
    })
}

/// Writes `county,source_year,target_year,bias,valid` for every cell.
pub fn write_bias_csv(matrices: &BTreeMap<CountyId, BiasMatrix>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["county", "source_year", "target_year", "bias", "valid"])?;
    for m in matrices.values() {
        for &s in &m.years {
            for &k in &m.years {
                let (b, v) = match m.get(s, k) {
                    Some(b) => (b.to_string(), "1"),
                    None => (String::new(), "0"),
                };
                w.write_record([m.county.as_str(), &s.to_string(), &k.to_string(), &b, v])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `query,source_county,source_year,label,bias_hat,label_refined`.
pub fn write_refined_csv(sets: &[RefinedSampleSet], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["query", "source_county", "source_year", "label", "bias_hat", "label_refined"])?;
    for set in sets {
        for e in &set.entries {
            w.write_record([
                set.query.as_str(),
                e.record.county.as_str(),
                &e.record.year.to_string(),
                &e.label.to_string(),
                &e.bias_hat.to_string(),
                &e.refined.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
