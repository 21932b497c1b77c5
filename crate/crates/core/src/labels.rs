use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 6;

/// The six waste categories, in canonical (alphabetical) index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Cardboard = 0,
    Glass = 1,
    Metal = 2,
    Paper = 3,
    Plastic = 4,
    Trash = 5,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Cardboard,
        ClassLabel::Glass,
        ClassLabel::Metal,
        ClassLabel::Paper,
        ClassLabel::Plastic,
        ClassLabel::Trash,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Cardboard => "cardboard",
            ClassLabel::Glass => "glass",
            ClassLabel::Metal => "metal",
            ClassLabel::Paper => "paper",
            ClassLabel::Plastic => "plastic",
            ClassLabel::Trash => "trash",
        }
    }

    /// Canonical label names in index order.
    pub fn names() -> [&'static str; NUM_CLASSES] {
        Self::ALL.map(Self::name)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown class label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for ClassLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
