//! Residual-similarity retrieval of relevant counties and their recent
//! samples, plus adjacency- and embedding-based alternatives.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::GruParams;
use crate::data::{Adjacency, CountyId, CountyYearRecord, Dataset, NormStats, YearIndex};
use crate::error::{Error, Result};
use crate::training::{global_predictions, LabelSubstitutes};

/// Per-county errors of the global model, `y − f(x)` in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVector {
    pub county: CountyId,
    pub years: Vec<YearIndex>,
    pub r: Vec<f64>,
}

impl ResidualVector {
    /// Residuals on the years both vectors cover.
    pub fn align(&self, other: &ResidualVector) -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.years.len() && j < other.years.len() {
            match self.years[i].cmp(&other.years[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    a.push(self.r[i]);
                    b.push(other.r[j]);
                    i += 1;
                    j += 1;
                }
            }
        }
        (a, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Matches need similarity strictly above this.
    pub threshold: f64,
    /// Samples come from this many latest training years.
    pub recent_years: usize,
    /// Minimum overlap of labelled years for a residual comparison.
    pub min_common_years: usize,
    /// Keep at most this many matched counties.
    pub top_k: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            threshold: 0.9,
            recent_years: 5,
            min_common_years: 3,
            top_k: None,
        }
    }
}

/// Matched counties of one query and the records collected from them.
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub query: CountyId,
    /// `(county, similarity)` by descending similarity, then county id.
    pub matched: Vec<(CountyId, f64)>,
    /// Records of matched counties in the recent years, in match order
    /// and ascending year.
    pub samples: Vec<CountyYearRecord>,
    pub warning: Option<String>,
}

impl RetrievalResult {
    fn empty(query: &str, warning: Option<String>) -> Self {
        RetrievalResult {
            query: query.to_string(),
            matched: Vec::new(),
            samples: Vec::new(),
            warning,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.matched.is_empty()
    }
}

/// Builds residual vectors from precomputed normalised predictions.
/// Counties without labelled years are skipped with a warning.
pub fn residuals_from_predictions(
    train: &Dataset,
    preds: &LabelSubstitutes,
    norm: &NormStats,
) -> Result<BTreeMap<CountyId, ResidualVector>> {
    let mut out = BTreeMap::new();
    for county in train.counties() {
        let mut years = Vec::new();
        let mut r = Vec::new();
        for rec in train.county_records(county) {
            let Some(y) = rec.label() else { continue };
            let p = preds
                .get(&(county.clone(), rec.year))
                .ok_or_else(|| Error::contract(format!("no prediction for ({county}, {})", rec.year)))?;
            let v = norm.denormalize_label(y) - norm.denormalize_label(*p);
            if !v.is_finite() {
                return Err(Error::numeric(format!("residual for ({county}, {}) is not finite", rec.year)));
            }
            years.push(rec.year);
            r.push(v);
        }
        if years.is_empty() {
            warn!("county {county} has no labelled years; no residual vector");
            continue;
        }
        out.insert(
            county.clone(),
            ResidualVector {
                county: county.clone(),
                years,
                r,
            },
        );
    }
    Ok(out)
}

/// `r_i^k = y_i^k − f(x_i^k)` for every labelled record of a normalised
/// training set, in physical units.
pub fn compute_residuals(train: &Dataset, f: &GruParams) -> Result<BTreeMap<CountyId, ResidualVector>> {
    let preds = global_predictions(f, train)?;
    residuals_from_predictions(train, &preds, &f.norm)
}

/// Centred copy and its squared norm.
fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let sq = c.iter().map(|x| x * x).sum::<f64>();
    (c, sq)
}

/// True when a vector is constant up to round-off, so its centred
/// direction is undefined.
pub fn is_degenerate(v: &[f64]) -> bool {
    let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    centered(v).1.sqrt() <= 1e-12 * scale * (v.len() as f64).sqrt()
}

/// Cosine of the mean-centred vectors, clamped to `[-1, 1]`.
/// Returns 0 when either centred vector vanishes.
pub fn centered_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::dim("centred cosine needs at least two entries"));
    }
    if is_degenerate(a) || is_degenerate(b) {
        return Ok(0.0);
    }
    let (ca, sa) = centered(a);
    let (cb, sb) = centered(b);
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Ok((dot / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

/// Similarity over common years, or `None` when the overlap is below
/// `min_common` or either side is degenerate.
pub fn residual_similarity(a: &ResidualVector, b: &ResidualVector, min_common: usize) -> Option<f64> {
    let (x, y) = a.align(b);
    if x.len() < min_common.max(2) || is_degenerate(&x) || is_degenerate(&y) {
        return None;
    }
    centered_cosine(&x, &y).ok()
}

/// The `n` latest training years.
pub fn recent_years(train: &Dataset, n: usize) -> Vec<YearIndex> {
    let years = train.years();
    years[years.len().saturating_sub(n)..].to_vec()
}

fn collect(query: &str, mut matched: Vec<(CountyId, f64)>, train: &Dataset, cfg: &RetrievalConfig) -> RetrievalResult {
    matched.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(k) = cfg.top_k {
        matched.truncate(k);
    }
    let years = recent_years(train, cfg.recent_years);
    let samples = matched
        .iter()
        .flat_map(|(c, _)| years.iter().filter_map(move |&y| train.get(c, y)).cloned())
        .collect();
    RetrievalResult {
        query: query.to_string(),
        matched,
        samples,
        warning: None,
    }
}

/// Counties whose residual similarity to `query` exceeds the threshold.
pub fn retrieve(
    query: &str,
    residuals: &BTreeMap<CountyId, ResidualVector>,
    train: &Dataset,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    let q = residuals
        .get(query)
        .ok_or_else(|| Error::contract(format!("no residual vector for county {query}")))?;
    if is_degenerate(&q.r) {
        warn!("county {query} has constant residuals; nothing retrieved");
        return Ok(RetrievalResult::empty(query, Some("constant residual vector".into())));
    }
    let matched = residuals
        .values()
        .filter(|r| r.county != query)
        .filter_map(|r| residual_similarity(q, r, cfg.min_common_years).map(|s| (r.county.clone(), s)))
        .filter(|(_, s)| *s > cfg.threshold)
        .collect();
    Ok(collect(query, matched, train, cfg))
}

/// Adjacent counties, each with similarity 1.
pub fn retrieve_neighboring(query: &str, adjacency: &Adjacency, train: &Dataset, cfg: &RetrievalConfig) -> RetrievalResult {
    let Some(ns) = adjacency.get(query) else {
        warn!("county {query} is not in the adjacency list");
        return RetrievalResult::empty(query, Some("county absent from adjacency".into()));
    };
    let matched = ns
        .iter()
        .filter(|c| c.as_str() != query)
        .map(|c| (c.clone(), 1.0))
        .collect();
    collect(query, matched, train, cfg)
}

/// Counties whose mean yearly embedding is similar to the query's.
pub fn retrieve_embedding(
    query: &str,
    embeddings: &BTreeMap<CountyId, Vec<f64>>,
    train: &Dataset,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    let q = embeddings
        .get(query)
        .ok_or_else(|| Error::contract(format!("no embedding for county {query}")))?;
    if q.len() < 2 || is_degenerate(q) {
        return Ok(RetrievalResult::empty(query, Some("degenerate embedding".into())));
    }
    let mut matched = Vec::new();
    for (c, e) in embeddings {
        if c == query || is_degenerate(e) {
            continue;
        }
        let s = centered_cosine(q, e)?;
        if s > cfg.threshold {
            matched.push((c.clone(), s));
        }
    }
    Ok(collect(query, matched, train, cfg))
}

/// Mean of each county's yearly embeddings.
pub fn mean_embeddings(per_year: &BTreeMap<(CountyId, YearIndex), Vec<f64>>) -> BTreeMap<CountyId, Vec<f64>> {
    let mut sums: BTreeMap<CountyId, (Vec<f64>, f64)> = BTreeMap::new();
    for ((c, _), z) in per_year {
        let e = sums.entry(c.clone()).or_insert_with(|| (vec![0.0; z.len()], 0.0));
        for (s, v) in e.0.iter_mut().zip(z) {
            *s += v;
        }
        e.1 += 1.0;
    }
    sums.into_iter()
        .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n).collect()))
        .collect()
}

/// Fraction of matches that share the query's label under `group`.
/// `None` when nothing was matched.
pub fn match_purity(results: &[RetrievalResult], group: impl Fn(&str) -> Option<usize>) -> Option<f64> {
    let (mut same, mut total) = (0usize, 0usize);
    for r in results {
        let q = group(&r.query);
        for (c, _) in &r.matched {
            total += 1;
            if q.is_some() && group(c) == q {
                same += 1;
            }
        }
    }
    (total > 0).then(|| same as f64 / total as f64)
}

/// Writes `query,matched,similarity,sample_year`, one row per sample.
pub fn write_retrieval_csv(results: &[RetrievalResult], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["query", "matched", "similarity", "sample_year"])?;
    for r in results {
        for (c, s) in &r.matched {
            for rec in r.samples.iter().filter(|rec| &rec.county == c) {
                w.write_record([r.query.as_str(), c.as_str(), &s.to_string(), &rec.year.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
