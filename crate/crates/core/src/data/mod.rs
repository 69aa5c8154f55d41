//! Deterministic synthetic scenes with aligned captions, questions and
//! phrase groundings, plus the split discipline that keeps evaluation
//! worlds out of every training pool.

mod io;
mod splits;
mod world;

pub use io::{load_dataset, parse_dataset, render_dataset, save_dataset, Dataset, DATASET_SCHEMA, DATASET_VERSION};
pub use splits::{check_contamination, check_evaluation, make_splits, Regime, SplitManifest, TaskSplits};
pub use world::{
    generate_world, generate_worlds, AnswerWeight, Color, Object, Phrase, QuestionKind, Region, ShapeKind, Size,
    World, FRAME, NUM_ANNOTATORS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of a raw region feature: shape (3) + color (4) + size (2) one-hots,
/// four normalised box coordinates and three noise-only slots.
pub const REGION_DIM: usize = 16;

/// Closed template vocabulary.
pub const TOKENS: [&str; 21] = [
    "a", "and", "small", "large", "red", "green", "blue", "yellow", "circle", "square", "triangle", "circles",
    "squares", "triangles", "is", "there", "how", "many", "what", "color", "the",
];

/// Closed answer set.
pub const ANSWERS: [&str; 11] = ["yes", "no", "0", "1", "2", "3", "4", "red", "green", "blue", "yellow"];

/// Token lookup over [`TOKENS`].
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<&'static str>,
}

impl Vocab {
    pub fn standard() -> Self {
        Self {
            tokens: TOKENS.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| *t == token)
            .ok_or_else(|| Error::InvalidInput(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> &'static str {
        self.tokens[id]
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&'static str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

pub fn answer_id(answer: &str) -> Option<usize> {
    ANSWERS.iter().position(|a| *a == answer)
}

/// Axis-aligned box `(x1, y1, x2, y2)` in image units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}
