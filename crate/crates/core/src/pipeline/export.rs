use std::collections::BTreeMap;
use std::path::Path;

use super::{checkpoint_paths, EvalReport, RunArtifacts, SweepAxis, SweepPoint};
use crate::backbone::{save_gru, save_lyra};
use crate::data::{CountyId, YearIndex};
use crate::error::Result;
use crate::refinement::{write_bias_csv, write_refined_csv};
use crate::retrieval::write_retrieval_csv;

/// `variant,seed,rmse,n,fallbacks` per seed, then `mean` and `std` rows.
fn write_report_rows(w: &mut csv::Writer<std::fs::File>, r: &EvalReport) -> Result<()> {
    for s in &r.seeds {
        w.write_record([
            r.variant.clone(),
            s.seed.to_string(),
            s.rmse.to_string(),
            s.rows.len().to_string(),
            s.fallback_counties().len().to_string(),
        ])?;
    }
    w.write_record([r.variant.clone(), "mean".into(), r.rmse_mean.to_string(), String::new(), String::new()])?;
    w.write_record([r.variant.clone(), "std".into(), r.rmse_std.to_string(), String::new(), String::new()])?;
    Ok(())
}

pub fn write_report_csv(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["variant", "seed", "rmse", "n", "fallbacks"])?;
    for r in reports {
        write_report_rows(&mut w, r)?;
    }
    w.flush()?;
    Ok(())
}

/// Same layout as the run report, one block per variant.
pub fn write_ablation_csv(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    write_report_csv(reports, path)
}

/// `axis,value,rmse_mean,rmse_std,retrieved`.
pub fn write_sweep_csv(axis: SweepAxis, points: &[SweepPoint], path: impl AsRef<Path>) -> Result<()> {
    let name = serde_json::to_value(axis)?.as_str().unwrap_or_default().to_string();
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["axis", "value", "rmse_mean", "rmse_std", "retrieved"])?;
    for p in points {
        w.write_record([
            name.clone(),
            p.value.to_string(),
            p.report.rmse_mean.to_string(),
            p.report.rmse_std.to_string(),
            p.retrieved.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_predictions_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "seed", "county", "year", "prediction", "truth", "error", "fallback", "retrieved"])?;
    for r in reports {
        for s in &r.seeds {
            let outcomes: BTreeMap<&str, _> = s.outcomes.iter().map(|o| (o.county.as_str(), o)).collect();
            for row in &s.rows {
                let o = outcomes.get(row.county.as_str());
                w.write_record([
                    r.variant.clone(),
                    s.seed.to_string(),
                    row.county.clone(),
                    row.year.to_string(),
                    row.prediction.to_string(),
                    row.truth.to_string(),
                    row.error.to_string(),
                    o.is_some_and(|o| o.fallback).to_string(),
                    o.map_or(0, |o| o.retrieved).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `county,year,error` with the error averaged over seeds.
fn write_errors_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut acc: BTreeMap<(CountyId, YearIndex), (f64, usize)> = BTreeMap::new();
    for s in &report.seeds {
        for row in &s.rows {
            let e = acc.entry((row.county.clone(), row.year)).or_insert((0.0, 0));
            e.0 += row.error;
            e.1 += 1;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["county", "year", "error"])?;
    for ((c, y), (sum, n)) in acc {
        w.write_record([c, y.to_string(), (sum / n as f64).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_attention_csv(art: &RunArtifacts, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["county", "target_year", "history_year", "beta"])?;
    for a in &art.attention {
        w.write_record([a.county.clone(), a.target_year.to_string(), a.history_year.to_string(), a.beta.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the run directory: `run.json`, `report.csv`, `predictions.csv`,
/// `attention.csv`, `errors.csv`, `retrieval.csv`, `bias.csv`,
/// `refined.csv`, `summary.json` and checkpoints under `ckpt/`.
pub fn export_diagnostics(art: &RunArtifacts, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("ckpt"))?;
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&art.config)?)?;
    write_report_csv(&art.reports, dir.join("report.csv"))?;
    write_predictions_csv(&art.reports, &dir.join("predictions.csv"))?;
    write_attention_csv(art, &dir.join("attention.csv"))?;
    if let Some(r) = art.reports.first() {
        write_errors_csv(r, &dir.join("errors.csv"))?;
    }
    write_retrieval_csv(&art.retrieval, dir.join("retrieval.csv"))?;
    write_bias_csv(&art.biases, dir.join("bias.csv"))?;
    write_refined_csv(&art.refined, dir.join("refined.csv"))?;
    for m in &art.models {
        let (g, l) = checkpoint_paths(&dir.join("ckpt"), m.seed, m.lyra.dims.variant);
        save_gru(&m.global, g)?;
        save_lyra(&m.lyra, l)?;
    }
    let summary = serde_json::json!({
        "test_year": art.test_year,
        "variants": art.reports.iter().map(|r| serde_json::json!({
            "variant": r.variant,
            "rmse_mean": r.rmse_mean,
            "rmse_std": r.rmse_std,
            "runtime_seconds": r.runtime_seconds,
        })).collect::<Vec<_>>(),
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}
