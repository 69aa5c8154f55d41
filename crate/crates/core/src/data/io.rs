//! Line-delimited JSON dataset files: one header line, then one world per
//! line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::World;
use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "dcmtl.worlds";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    seed: u64,
}

/// Worlds plus the generator seed that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub worlds: Vec<World>,
}

impl Dataset {
    pub fn world(&self, id: u64) -> Option<&World> {
        // Generated datasets are indexed by id; fall back to a scan otherwise.
        match self.worlds.get(id as usize) {
            Some(w) if w.world_id == id => Some(w),
            _ => self.worlds.iter().find(|w| w.world_id == id),
        }
    }
}

pub fn render_dataset(dataset: &Dataset) -> String {
    let header = Header {
        schema: DATASET_SCHEMA.into(),
        version: DATASET_VERSION,
        seed: dataset.seed,
    };
    let mut out = serde_json::to_string(&header).expect("header serialises");
    out.push('\n');
    for w in &dataset.worlds {
        out.push_str(&serde_json::to_string(w).expect("world serialises"));
        out.push('\n');
    }
    out
}

/// Parses dataset text. `origin` labels errors. An empty input is an empty
/// dataset.
pub fn parse_dataset(text: &str, origin: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, htext)) = lines.next() else {
        return Ok(Dataset::default());
    };
    let header: Header = serde_json::from_str(htext).map_err(|e| err(hline + 1, format!("bad header: {e}")))?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(err(
            hline + 1,
            format!("unsupported schema {} v{}", header.schema, header.version),
        ));
    }
    let worlds = lines
        .map(|(i, l)| serde_json::from_str::<World>(l).map_err(|e| err(i + 1, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed: header.seed,
        worlds,
    })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, render_dataset(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}
