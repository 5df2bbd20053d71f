//! County-year records, CSV ingestion, z-score normalisation, the
//! train-on-prior-years split and the synthetic heterogeneous generator.

mod audit;
mod csvio;
mod norm;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

pub use audit::{AuditHandle, LabelAudit};
pub use csvio::{
    load_adjacency, load_dataset, read_dataset, write_adjacency, write_dataset, write_dataset_to, LoadOptions,
};
pub use norm::{zscore_apply, zscore_fit, NormStats};
pub use synth::{
    generate_synthetic, noiseless_yield, write_truth, SyntheticConfig, SyntheticData, SyntheticWorld,
    TruthRow,
};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub type CountyId = String;
pub type YearIndex = i32;

/// Directed county adjacency, used by the neighbouring-county baseline.
pub type Adjacency = BTreeMap<CountyId, BTreeSet<CountyId>>;

/// One county in one year: daily drivers `[T×d]` and the annual yield label.
#[derive(Clone, Debug)]
pub struct CountyYearRecord {
    pub county: CountyId,
    pub year: YearIndex,
    pub features: Arc<Tensor>,
    label: Option<f64>,
    pub neighbors: Option<Vec<CountyId>>,
    pub seed_loc: Option<(f64, f64)>,
    audit: AuditHandle,
}

impl CountyYearRecord {
    pub fn new(
        county: impl Into<CountyId>,
        year: YearIndex,
        features: Tensor,
        label: Option<f64>,
        audit: AuditHandle,
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::dim("features must be a [T×d] matrix"));
        }
        if let Some(y) = label {
            if !y.is_finite() || y < 0.0 {
                return Err(Error::contract(format!("yield label {y} must be finite and non-negative")));
            }
        }
        Ok(CountyYearRecord {
            county: county.into(),
            year,
            features: Arc::new(features),
            label,
            neighbors: None,
            seed_loc: None,
            audit,
        })
    }

    /// The yield label as seen by model code; every call is audited.
    pub fn label(&self) -> Option<f64> {
        if self.label.is_some() {
            self.audit.record_read(self.year);
        }
        self.label
    }

    /// The yield label for scoring predictions. Audited separately from
    /// [`CountyYearRecord::label`].
    pub fn ground_truth(&self) -> Option<f64> {
        if self.label.is_some() {
            self.audit.record_scoring_read(self.year);
        }
        self.label
    }

    pub fn has_label(&self) -> bool {
        self.label.is_some()
    }

    pub fn t(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    /// Copy of this record with a different label; features are shared.
    pub fn with_label(&self, label: Option<f64>) -> Self {
        CountyYearRecord {
            label,
            ..self.clone()
        }
    }

    pub(crate) fn with_features(&self, features: Tensor) -> Self {
        CountyYearRecord {
            features: Arc::new(features),
            ..self.clone()
        }
    }

    pub(crate) fn raw_label(&self) -> Option<f64> {
        self.label
    }
}

/// An immutable collection of county-year records, at most one per
/// (county, year), all sharing one `T` and `d`.
#[derive(Clone, Debug)]
pub struct Dataset {
    records: Vec<CountyYearRecord>,
    index: HashMap<(CountyId, YearIndex), usize>,
    years: Vec<YearIndex>,
    counties: BTreeSet<CountyId>,
    t: usize,
    d: usize,
    audit: AuditHandle,
}

impl Dataset {
    /// Builds a dataset, sorting records by (county, year).
    pub fn new(mut records: Vec<CountyYearRecord>, audit: AuditHandle) -> Result<Self> {
        records.sort_by(|a, b| a.county.cmp(&b.county).then(a.year.cmp(&b.year)));
        let (t, d) = records.first().map_or((0, 0), |r| (r.t(), r.d()));
        let mut index = HashMap::with_capacity(records.len());
        let mut years = BTreeSet::new();
        let mut counties = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.t() != t || r.d() != d {
                return Err(Error::dim(format!(
                    "record ({}, {}) has shape {}x{}, expected {t}x{d}",
                    r.county,
                    r.year,
                    r.t(),
                    r.d()
                )));
            }
            if index.insert((r.county.clone(), r.year), i).is_some() {
                return Err(Error::contract(format!("duplicate record ({}, {})", r.county, r.year)));
            }
            years.insert(r.year);
            counties.insert(r.county.clone());
        }
        Ok(Dataset {
            records,
            index,
            years: years.into_iter().collect(),
            counties,
            t,
            d,
            audit,
        })
    }

    pub fn records(&self) -> &[CountyYearRecord] {
        &self.records
    }

    pub fn years(&self) -> &[YearIndex] {
        &self.years
    }

    pub fn counties(&self) -> &BTreeSet<CountyId> {
        &self.counties
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn audit(&self) -> &AuditHandle {
        &self.audit
    }

    pub fn get(&self, county: &str, year: YearIndex) -> Option<&CountyYearRecord> {
        self.index
            .get(&(county.to_string(), year))
            .map(|&i| &self.records[i])
    }

    /// Records of one county in ascending year order.
    pub fn county_records<'a>(&'a self, county: &'a str) -> impl Iterator<Item = &'a CountyYearRecord> + 'a {
        self.records.iter().filter(move |r| r.county == county)
    }

    pub fn year_records(&self, year: YearIndex) -> impl Iterator<Item = &CountyYearRecord> {
        self.records.iter().filter(move |r| r.year == year)
    }

    pub fn filter(&self, keep: impl Fn(&CountyYearRecord) -> bool) -> Result<Dataset> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::new(records, self.audit.clone())
    }

    /// Same records with every label removed.
    pub fn without_labels(&self) -> Dataset {
        let records = self.records.iter().map(|r| r.with_label(None)).collect();
        Dataset {
            records,
            ..self.clone()
        }
    }

    /// Appends the calendar year as a constant extra feature column,
    /// so `d` grows by one.
    pub fn with_year_feature(&self) -> Result<Dataset> {
        let records = self
            .records
            .iter()
            .map(|r| {
                let (t, d) = (r.t(), r.d());
                let mut data = Vec::with_capacity(t * (d + 1));
                for row in 0..t {
                    data.extend_from_slice(r.features.row(row));
                    data.push(r.year as f64);
                }
                Ok(r.with_features(Tensor::matrix(t, d + 1, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(records, self.audit.clone())
    }

    /// Fills each record's `neighbors` from an adjacency map.
    pub fn with_adjacency(&self, adjacency: &Adjacency) -> Dataset {
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.neighbors = adjacency.get(&r.county).map(|s| s.iter().cloned().collect());
                r
            })
            .collect();
        Dataset {
            records,
            ..self.clone()
        }
    }
}

/// Splits into training years strictly before `test_year` and the test year
/// itself. Every training record must carry a label.
pub fn split_by_test_year(ds: &Dataset, test_year: YearIndex) -> Result<(Dataset, Dataset)> {
    if !ds.years().contains(&test_year) {
        return Err(Error::contract(format!("test year {test_year} is not in the dataset")));
    }
    let train = ds.filter(|r| r.year < test_year)?;
    if train.is_empty() {
        return Err(Error::contract(format!(
            "no training years precede test year {test_year}"
        )));
    }
    if let Some(r) = train.records().iter().find(|r| !r.has_label()) {
        return Err(Error::contract(format!(
            "training record ({}, {}) has no yield label",
            r.county, r.year
        )));
    }
    let test = ds.filter(|r| r.year == test_year)?;
    Ok((train, test))
}
