use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Adjacency, AuditHandle, CountyId, CountyYearRecord, Dataset, LabelAudit, YearIndex};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Ingestion options for the dataset CSV.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Expected rows per county-year. Inferred from the first county-year
    /// when unset.
    pub t: Option<usize>,
    /// The only year whose labels may be blank. When unset, blanks are
    /// allowed only in the latest year present.
    pub test_year: Option<YearIndex>,
}

struct Group {
    first_row: usize,
    days: Vec<(u32, Vec<f64>)>,
    label: Option<f64>,
}

fn ingest(row: usize, msg: impl Into<String>) -> Error {
    Error::Ingestion { row, msg: msg.into() }
}

fn is_leap(year: YearIndex) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

/// Reads the dataset CSV (`county,year,day,f1..fd,yield`).
pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, opts)
}

pub fn read_dataset<R: Read>(reader: R, opts: &LoadOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 5 || cols[..3] != ["county", "year", "day"] || cols[cols.len() - 1] != "yield" {
        return Err(ingest(1, "header must be county,year,day,f1..fd,yield"));
    }
    let d = cols.len() - 4;

    let mut groups: BTreeMap<(CountyId, YearIndex), Group> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d + 4 {
            return Err(ingest(
                row,
                format!("expected {d} feature columns, found {}", rec.len() as i64 - 4),
            ));
        }
        let county = rec[0].to_string();
        if county.is_empty() {
            return Err(ingest(row, "empty county id"));
        }
        let year: YearIndex = rec[1].parse().map_err(|_| ingest(row, format!("bad year '{}'", &rec[1])))?;
        let day: u32 = rec[2].parse().map_err(|_| ingest(row, format!("bad day '{}'", &rec[2])))?;
        let mut feats = Vec::with_capacity(d);
        for j in 0..d {
            let v: f64 = rec[3 + j]
                .parse()
                .map_err(|_| ingest(row, format!("bad value '{}' in column {}", &rec[3 + j], cols[3 + j])))?;
            if !v.is_finite() {
                return Err(ingest(row, format!("non-finite value in column {}", cols[3 + j])));
            }
            feats.push(v);
        }
        let label = match &rec[d + 3] {
            "" => None,
            s => {
                let y: f64 = s.parse().map_err(|_| ingest(row, format!("bad yield '{s}'")))?;
                if !y.is_finite() || y < 0.0 {
                    return Err(ingest(row, format!("yield {y} must be finite and non-negative")));
                }
                Some(y)
            }
        };
        let g = groups.entry((county, year)).or_insert(Group {
            first_row: row,
            days: Vec::new(),
            label: None,
        });
        if let Some(y) = label {
            match g.label {
                Some(prev) if prev != y => {
                    return Err(ingest(row, format!("yield {y} conflicts with {prev} for the same county-year")))
                }
                _ => g.label = Some(y),
            }
        }
        g.days.push((day, feats));
    }
    if groups.is_empty() {
        return Err(ingest(1, "no data rows"));
    }

    let t = match opts.t {
        Some(t) => t,
        None => {
            let ((_, year), g) = groups.iter().next().expect("non-empty");
            if is_leap(*year) && g.days.len() == 366 {
                365
            } else {
                g.days.len()
            }
        }
    };
    let latest = groups.keys().map(|(_, y)| *y).max().expect("non-empty");
    let unlabeled_ok = opts.test_year.unwrap_or(latest);

    let audit: AuditHandle = LabelAudit::new_handle();
    let mut records = Vec::with_capacity(groups.len());
    for ((county, year), mut g) in groups {
        g.days.sort_by_key(|(day, _)| *day);
        if g.days.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(ingest(g.first_row, format!("duplicate day rows for ({county}, {year})")));
        }
        if g.days.len() == t + 1 && is_leap(year) {
            // Feb 29 is day-of-year 60 in a leap year.
            g.days.retain(|(day, _)| *day != 60);
        }
        if g.days.len() != t {
            return Err(ingest(
                g.first_row,
                format!("({county}, {year}) has {} days, expected {t}", g.days.len()),
            ));
        }
        if g.label.is_none() && year != unlabeled_ok {
            return Err(ingest(
                g.first_row,
                format!("({county}, {year}) has no yield label but is not the test year"),
            ));
        }
        let data: Vec<f64> = g.days.into_iter().flat_map(|(_, f)| f).collect();
        let features = Tensor::matrix(t, d, data).map_err(|e| ingest(g.first_row, e.to_string()))?;
        records.push(CountyYearRecord::new(county, year, features, g.label, audit.clone())?);
    }
    Dataset::new(records, audit)
}

/// Writes the dataset CSV with the yield repeated on every day row.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_dataset_to(ds, std::io::BufWriter::new(file))
}

pub fn write_dataset_to<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["county".to_string(), "year".to_string(), "day".to_string()];
    header.extend((1..=ds.d()).map(|j| format!("f{j}")));
    header.push("yield".into());
    w.write_record(&header)?;
    for r in ds.records() {
        let label = r.raw_label().map(|y| y.to_string()).unwrap_or_default();
        for day in 0..r.t() {
            let mut row = vec![r.county.clone(), r.year.to_string(), (day + 1).to_string()];
            row.extend(r.features.row(day).iter().map(|v| v.to_string()));
            row.push(label.clone());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `county,neighbor` pairs.
pub fn load_adjacency(path: impl AsRef<Path>) -> Result<Adjacency> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["county", "neighbor"] {
        return Err(ingest(1, "adjacency header must be county,neighbor"));
    }
    let mut adj = Adjacency::new();
    for rec in rdr.records() {
        let rec = rec?;
        adj.entry(rec[0].to_string()).or_default().insert(rec[1].to_string());
    }
    Ok(adj)
}

pub fn write_adjacency(adj: &Adjacency, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["county", "neighbor"])?;
    for (c, ns) in adj {
        for n in ns {
            w.write_record([c, n])?;
        }
    }
    w.flush()?;
    Ok(())
}
