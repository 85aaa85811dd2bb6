use std::fmt;

use serde::{Deserialize, Serialize};

/// Ground-truth label of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
}

/// A binary inspection outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Defect,
    Normal,
}

impl From<Label> for Decision {
    fn from(label: Label) -> Self {
        match label {
            Label::Normal => Decision::Normal,
            Label::Abnormal => Decision::Defect,
        }
    }
}

impl From<Decision> for Label {
    fn from(decision: Decision) -> Self {
        match decision {
            Decision::Normal => Label::Normal,
            Decision::Defect => Label::Abnormal,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        })
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Defect => "defect",
            Decision::Normal => "normal",
        })
    }
}
