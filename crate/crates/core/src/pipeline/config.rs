use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{GruDims, LyraDims, Variant};
use crate::data::{SyntheticConfig, YearIndex};
use crate::error::{Error, Result};
use crate::refinement::RefineConfig;
use crate::retrieval::RetrievalConfig;
use crate::training::TrainConfig;

/// Where the county-year records come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        adjacency: Option<PathBuf>,
    },
    Synthetic(SyntheticConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    Residual,
    Neighboring,
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integration {
    Finetune,
    Context,
    None,
}

/// Label slot used when embedding training years for the per-year
/// regressors and for embedding-based retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingLabels {
    /// The global model's prediction, as for a target year.
    Substituted,
    /// The observed label.
    Observed,
}

/// Year-embedding row used when embedding training years for the per-year
/// regressors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingYearRow {
    /// Each record's own year.
    Own,
    /// The latest training year for every record, so embeddings carry no
    /// year identity the regressors could not have learned.
    Latest,
}

/// Layer widths shared by the global regressor and the yearly model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSizes {
    pub hidden: usize,
    pub gru_layers: usize,
    pub readout_hidden: usize,
    pub attn_hidden: usize,
    pub year_dim: usize,
    pub embed_hidden: usize,
    pub z_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelSizes {
    fn default() -> Self {
        let l = LyraDims::new(1);
        ModelSizes {
            hidden: l.hidden,
            gru_layers: l.gru_layers,
            readout_hidden: GruDims::new(1).readout_hidden,
            attn_hidden: l.attn_hidden,
            year_dim: l.year_dim,
            embed_hidden: l.embed_hidden,
            z_dim: l.z_dim,
            head_hidden: l.head_hidden,
        }
    }
}

impl ModelSizes {
    pub fn gru_dims(&self, d: usize) -> GruDims {
        GruDims {
            d,
            hidden: self.hidden,
            layers: self.gru_layers,
            readout_hidden: self.readout_hidden,
        }
    }

    pub fn lyra_dims(&self, d: usize, lookback: usize, variant: Variant) -> LyraDims {
        LyraDims {
            d,
            hidden: self.hidden,
            gru_layers: self.gru_layers,
            attn_hidden: self.attn_hidden,
            year_dim: self.year_dim,
            embed_hidden: self.embed_hidden,
            z_dim: self.z_dim,
            head_hidden: self.head_hidden,
            lookback,
            variant,
        }
    }
}

/// Everything that determines one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Defaults to the latest year in the data.
    pub test_year: Option<YearIndex>,
    pub lookback: usize,
    pub variant: Variant,
    pub retrieval: RetrievalMode,
    pub retrieval_cfg: RetrievalConfig,
    pub integration: Integration,
    pub refine: bool,
    pub refine_cfg: RefineConfig,
    pub embedding_labels: EmbeddingLabels,
    pub embedding_year_row: EmbeddingYearRow,
    /// Append the calendar year as an extra daily feature.
    pub year_feature: bool,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub sizes: ModelSizes,
    pub output_dir: Option<PathBuf>,
    /// Load models from this directory instead of training them.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            test_year: None,
            lookback: 5,
            variant: Variant::Lyra,
            retrieval: RetrievalMode::Residual,
            retrieval_cfg: RetrievalConfig::default(),
            integration: Integration::Finetune,
            refine: true,
            refine_cfg: RefineConfig::default(),
            embedding_labels: EmbeddingLabels::Substituted,
            embedding_year_row: EmbeddingYearRow::Latest,
            year_feature: false,
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            sizes: ModelSizes::default(),
            output_dir: None,
            checkpoint_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::contract("at least one seed is required"));
        }
        if self.lookback == 0 {
            return Err(Error::contract("look-back window must be at least 1"));
        }
        if self.refine_cfg.copies == 0 {
            return Err(Error::contract("copies must be at least 1"));
        }
        if let Some(s) = self.refine_cfg.sigma {
            if !(s >= 0.0) {
                return Err(Error::contract("sigma must be non-negative"));
            }
        }
        self.train.validate()
    }

    /// Short name of the ablation row this configuration produces.
    pub fn variant_label(&self) -> String {
        match (self.variant, self.integration, self.refine) {
            (Variant::GruAtt, _, _) => "gru-att".into(),
            (Variant::Lyra, Integration::None, _) => "lyra".into(),
            (Variant::Lyra, Integration::Finetune, true) => "lyra-ratar".into(),
            (Variant::Lyra, Integration::Finetune, false) => "wo-refine".into(),
            (Variant::Lyra, Integration::Context, true) => "lyra-ratar-context".into(),
            (Variant::Lyra, Integration::Context, false) => "wo-refine-context".into(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }
}
