//! Fitted remaining-risk model files.

use serde::{Deserialize, Serialize};

use seqrts_core::ghat::GHatModel;

use crate::error::DataError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    /// Participant-days in the fitting corpus.
    pub participant_days: usize,
    /// Sedentary runs the run-length table was built from.
    pub runs: usize,
    /// Seed of the simulated corpus; absent for a corpus read from file.
    pub seed: Option<u64>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub model: GHatModel,
    pub metadata: FitMetadata,
}

impl ModelDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| DataError {
            column: Some(e.path().to_string()),
            ..DataError::new(e.inner().to_string())
        })
    }
}
