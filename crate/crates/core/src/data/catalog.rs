//! Fixed object catalog and the answer vocabulary.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

/// Category names. Consecutive pairs are "visually near": the simulated
/// detector confuses them more often and their prototypes overlap.
pub const CATEGORIES: [&str; 12] = [
    "cube", "box", "sphere", "ball", "cylinder", "can", "cone", "pyramid", "torus", "ring", "disk", "coin",
];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "purple", "gray"];
pub const MATERIALS: [&str; 3] = ["metal", "rubber", "glass"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const LOCATIONS: [&str; 2] = ["left", "right"];

/// Width of the one-hot symbolic token: category, color, material, size, box.
pub const ORACLE_WIDTH: usize = CATEGORIES.len() + COLORS.len() + MATERIALS.len() + SIZES.len() + 4;

pub fn near_category(c: usize) -> usize {
    c ^ 1
}

/// Answer label; the index into [`answer_vocab`] is the class id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Answer {
    Yes,
    No,
    Color(u8),
    Material(u8),
    Size(u8),
    Location(u8),
}

impl Answer {
    pub fn index(self) -> usize {
        match self {
            Self::Yes => 0,
            Self::No => 1,
            Self::Color(c) => 2 + c as usize,
            Self::Material(m) => 2 + COLORS.len() + m as usize,
            Self::Size(s) => 2 + COLORS.len() + MATERIALS.len() + s as usize,
            Self::Location(l) => 2 + COLORS.len() + MATERIALS.len() + SIZES.len() + l as usize,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        let mut k = i;
        if k < 2 {
            return Some(if k == 0 { Self::Yes } else { Self::No });
        }
        k -= 2;
        for (n, make) in [
            (COLORS.len(), Self::Color as fn(u8) -> Self),
            (MATERIALS.len(), Self::Material),
            (SIZES.len(), Self::Size),
            (LOCATIONS.len(), Self::Location),
        ] {
            if k < n {
                return Some(make(k as u8));
            }
            k -= n;
        }
        None
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Yes => "yes",
            Self::No => "no",
            Self::Color(c) => COLORS[c as usize],
            Self::Material(m) => MATERIALS[m as usize],
            Self::Size(s) => SIZES[s as usize],
            Self::Location(l) => LOCATIONS[l as usize],
        }
    }

    pub fn from_bool(b: bool) -> Self {
        if b {
            Self::Yes
        } else {
            Self::No
        }
    }
}

impl From<Answer> for String {
    fn from(a: Answer) -> String {
        a.name().into()
    }
}

impl TryFrom<String> for Answer {
    type Error = LensError;
    fn try_from(s: String) -> Result<Self> {
        (0..ANSWER_COUNT)
            .filter_map(Answer::from_index)
            .find(|a| a.name() == s)
            .ok_or(LensError::Vocabulary(s))
    }
}

pub fn answer_vocab() -> Vec<String> {
    let mut v: Vec<String> = ["yes", "no"].iter().map(|s| String::from(*s)).collect();
    for list in [&COLORS[..], &MATERIALS[..], &SIZES[..], &LOCATIONS[..]] {
        v.extend(list.iter().map(|s| String::from(*s)));
    }
    v
}

pub const ANSWER_COUNT: usize = 2 + COLORS.len() + MATERIALS.len() + SIZES.len() + LOCATIONS.len();
