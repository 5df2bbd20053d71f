use crate::data::{generate_synthetic, split_by_test_year, zscore_apply, zscore_fit, Dataset, NormStats, SyntheticConfig, SyntheticData};

/// Normalised train/test split of a small synthetic world.
pub struct Fixture {
    pub data: SyntheticData,
    pub train: Dataset,
    pub test: Dataset,
    pub norm: NormStats,
    pub test_year: i32,
}

pub fn small_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_counties: 16,
        n_years: 6,
        t: 12,
        d: 3,
        n_hidden_clusters: 2,
        seed,
        ..SyntheticConfig::default()
    }
}

pub fn fixture(cfg: SyntheticConfig) -> Fixture {
    let data = generate_synthetic(&cfg).unwrap();
    let test_year = *data.dataset.years().last().unwrap();
    let (train_raw, test_raw) = split_by_test_year(&data.dataset, test_year).unwrap();
    let norm = zscore_fit(&train_raw).unwrap();
    let train = zscore_apply(&train_raw, &norm).unwrap();
    let test = zscore_apply(&test_raw.without_labels(), &norm).unwrap();
    Fixture {
        data,
        train,
        test,
        norm,
        test_year,
    }
}
