//! Run configuration shared by every pipeline stage.
//!
//! Each section rejects unknown keys so a typo surfaces as an error naming
//! the key instead of silently falling back to a default.

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::sim::SimConfig;
use crate::train::{SplitSpec, TrainConfig};
use crate::trajectory::SplitFractions;

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Train, validation and test fractions, by trajectory.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { split: default_split(), split_seed: 0 }
    }
}

impl DataConfig {
    pub fn split_spec(&self) -> Result<SplitSpec> {
        let [train, validation, test] = self.split;
        Ok(SplitSpec { fractions: SplitFractions::new(train, validation, test)?, seed: self.split_seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftModeName {
    JustSeen,
    ReferencePanel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Train,
    Validation,
    Test,
}

fn default_bins() -> usize {
    5
}
fn default_panel() -> usize {
    64
}
fn default_shift_mode() -> ShiftModeName {
    ShiftModeName::JustSeen
}
fn default_subset() -> Subset {
    Subset::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default = "default_shift_mode")]
    pub shift_mode: ShiftModeName,
    /// Reference contexts drawn from N(0, I) for the panel shift mode.
    #[serde(default = "default_panel")]
    pub panel_size: usize,
    #[serde(default)]
    pub panel_seed: u64,
    /// Which part of the split the analyses run on.
    #[serde(default = "default_subset")]
    pub subset: Subset,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n_bins: default_bins(),
            shift_mode: default_shift_mode(),
            panel_size: default_panel(),
            panel_seed: 0,
            subset: default_subset(),
        }
    }
}

fn all_baselines() -> Vec<BaselineKind> {
    BaselineKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "all_baselines")]
    pub baselines: Vec<BaselineKind>,
    /// Bootstrap repetitions for the std columns; 0 reports a single pass.
    #[serde(default)]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { baselines: all_baselines(), bootstrap: 0, seed: 0, baseline: BaselineConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.split_spec()?;
        if self.analysis.n_bins == 0 {
            return Err(crate::IolError::Validation("analysis.n_bins must be >= 1".into()));
        }
        Ok(())
    }
}
