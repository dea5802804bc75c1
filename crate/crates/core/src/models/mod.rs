//! The two regressors: gradient-boosted trees over flattened series, and a
//! stacked LSTM over the sequences.

pub mod adam;
pub mod gbdt;
pub mod lstm;
pub mod scaler;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use gbdt::{gbdt_fit, GbdtModel, GbdtParams};
pub use lstm::{lstm_fit, HeadOrder, LstmModel, LstmParams};
pub use scaler::FeatureScaler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gbdt,
    Lstm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gbdt => "gbdt",
            ModelKind::Lstm => "lstm",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "gbdt" => Ok(ModelKind::Gbdt),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(crate::Error::Model(format!("unknown model '{other}' (expected gbdt or lstm)"))),
        }
    }
}
