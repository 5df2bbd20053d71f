//! Library-level pipeline checks that need trained models.

use yieldcast::data::{generate_synthetic, write_adjacency, write_dataset, SyntheticConfig};
use yieldcast::pipeline::{
    load_data, prepare, run_experiment, sweep_prepared, DataSource, ExperimentConfig, Integration, ModelSizes,
    SweepAxis,
};
use yieldcast::retrieval::RetrievalConfig;
use yieldcast::training::TrainConfig;

fn sizes() -> ModelSizes {
    ModelSizes {
        hidden: 8,
        gru_layers: 1,
        readout_hidden: 8,
        attn_hidden: 8,
        year_dim: 4,
        embed_hidden: 16,
        z_dim: 8,
        head_hidden: 8,
    }
}

#[test]
fn short_lookback_is_not_the_best() {
    let cfg = ExperimentConfig {
        data: DataSource::Synthetic(SyntheticConfig {
            n_counties: 30,
            n_years: 12,
            t: 24,
            ..SyntheticConfig::default()
        }),
        integration: Integration::None,
        refine: false,
        seeds: vec![0],
        train: TrainConfig {
            epochs: 40,
            lr: 3e-3,
            ..TrainConfig::default()
        },
        sizes: sizes(),
        ..ExperimentConfig::default()
    };
    let data = load_data(&cfg).unwrap();
    let prep = prepare(&data, None).unwrap();
    let values: Vec<f64> = (1..=8).map(f64::from).collect();
    let points = sweep_prepared(&prep, &cfg, SweepAxis::Lookback, &values).unwrap();
    let rmse: Vec<f64> = points.iter().map(|p| p.report.rmse_mean).collect();
    println!("lookback rmse {rmse:?}");
    let best = rmse.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(rmse[0] > best, "w=1 should not be the best window: {rmse:?}");
}

#[test]
fn csv_source_matches_synthetic_source() {
    let syn = SyntheticConfig {
        n_counties: 10,
        n_years: 6,
        t: 8,
        d: 3,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&syn).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ds, adj) = (dir.path().join("d.csv"), dir.path().join("a.csv"));
    write_dataset(&data.dataset, &ds).unwrap();
    write_adjacency(&data.adjacency, &adj).unwrap();

    let base = ExperimentConfig {
        data: DataSource::Synthetic(syn),
        lookback: 2,
        seeds: vec![0],
        train: TrainConfig {
            epochs: 3,
            finetune_epochs: 2,
            ..TrainConfig::default()
        },
        sizes: sizes(),
        retrieval_cfg: RetrievalConfig {
            threshold: 0.0,
            recent_years: 2,
            ..RetrievalConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let from_csv = ExperimentConfig {
        data: DataSource::Csv {
            path: ds,
            adjacency: Some(adj),
        },
        ..base.clone()
    };
    let a = run_experiment(&base).unwrap();
    let b = run_experiment(&from_csv).unwrap();
    assert_eq!(a.rmse_mean, b.rmse_mean);
    assert_eq!(a.seeds[0].rows, b.seeds[0].rows);
}
