use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three supported tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Image-caption retrieval.
    Icr,
    /// Visual question answering.
    Vqa,
    /// Visual grounding of caption phrases.
    Vg,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Icr, TaskKind::Vqa, TaskKind::Vg];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Icr => "icr",
            TaskKind::Vqa => "vqa",
            TaskKind::Vg => "vg",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_uppercase())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "icr" => Ok(TaskKind::Icr),
            "vqa" => Ok(TaskKind::Vqa),
            "vg" => Ok(TaskKind::Vg),
            other => Err(Error::InvalidInput(format!("unknown task {other:?}"))),
        }
    }
}

/// Dataset partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}
