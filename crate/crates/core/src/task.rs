use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::BatError;

/// Aspect extraction (token tagging) or aspect sentiment classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ae,
    Asc,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ae => "ae",
            Task::Asc => "asc",
        }
    }

    pub fn num_labels(self) -> usize {
        3
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = BatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Task::Ae),
            "asc" => Ok(Task::Asc),
            other => Err(BatError::config(format!("unknown task {other:?}, expected ae or asc"))),
        }
    }
}
