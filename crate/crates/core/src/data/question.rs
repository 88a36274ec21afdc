//! Template questions, their function annotations and the symbolic executor.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{Answer, CATEGORIES, COLORS, LOCATIONS, MATERIALS, SIZES};
use super::scene::Scene;
use crate::error::{LensError, Result};
use crate::rng::LensRng;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($v:ident => $s:literal),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(into = "String", try_from = "String")]
        pub enum $name { $($v),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$v),*];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$v => $s),* }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = LensError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$v),)*
                    _ => Err(LensError::Config(format!(concat!("unknown ", stringify!($name), " `{}`"), s))),
                }
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.as_str().to_string()
            }
        }

        impl TryFrom<String> for $name {
            type Error = LensError;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }
    };
}

named_enum!(
    /// Atomic reasoning operations annotated on questions.
    Function {
        Select => "select",
        FilterColor => "filter-color",
        FilterSize => "filter-size",
        Exist => "exist",
        VerifyColor => "verify-color",
        VerifySize => "verify-size",
        VerifyMaterial => "verify-material",
        QueryColor => "query-color",
        QueryMaterial => "query-material",
        QuerySize => "query-size",
        ChooseColor => "choose-color",
        ChooseSize => "choose-size",
        ChooseLocation => "choose-location",
        And => "and",
        SameColor => "same-color",
    }
);

named_enum!(
    Template {
        ExistColor => "exist-color",
        VerifyColor => "verify-color",
        VerifySize => "verify-size",
        VerifyMaterial => "verify-material",
        QueryColor => "query-color",
        QueryMaterial => "query-material",
        QuerySize => "query-size",
        ChooseColor => "choose-color",
        ChooseSize => "choose-size",
        ChooseLocation => "choose-location",
        AndExist => "and",
        SameColor => "same-color",
    }
);

impl Template {
    pub fn functions(self) -> Vec<Function> {
        use Function as F;
        match self {
            Self::ExistColor => vec![F::Select, F::FilterColor, F::Exist],
            Self::VerifyColor => vec![F::Select, F::VerifyColor],
            Self::VerifySize => vec![F::Select, F::VerifySize],
            Self::VerifyMaterial => vec![F::Select, F::VerifyMaterial],
            Self::QueryColor => vec![F::Select, F::QueryColor],
            Self::QueryMaterial => vec![F::Select, F::QueryMaterial],
            Self::QuerySize => vec![F::Select, F::QuerySize],
            Self::ChooseColor => vec![F::Select, F::ChooseColor],
            Self::ChooseSize => vec![F::Select, F::ChooseSize],
            Self::ChooseLocation => vec![F::Select, F::ChooseLocation],
            Self::AndExist => vec![F::Select, F::FilterColor, F::FilterSize, F::Exist, F::And],
            Self::SameColor => vec![F::Select, F::SameColor],
        }
    }
}

/// Executable form of a question. Category and attribute fields are catalog
/// indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Program {
    ExistColor { category: u8, color: u8 },
    VerifyColor { category: u8, color: u8 },
    VerifySize { category: u8, size: u8 },
    VerifyMaterial { category: u8, material: u8 },
    QueryColor { category: u8 },
    QueryMaterial { category: u8 },
    QuerySize { category: u8 },
    ChooseColor { category: u8, first: u8, second: u8 },
    ChooseSize { category: u8, first: u8 },
    ChooseLocation { category: u8, first: u8 },
    AndExist { category: u8, color: u8, other: u8, size: u8 },
    SameColor { category: u8, other: u8 },
}

/// Result of running a program on a scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub answer: Answer,
    /// Objects the answer depends on.
    pub needed: Vec<usize>,
}

fn cat(c: u8) -> &'static str {
    CATEGORIES[c as usize]
}

impl Program {
    pub fn template(&self) -> Template {
        match self {
            Self::ExistColor { .. } => Template::ExistColor,
            Self::VerifyColor { .. } => Template::VerifyColor,
            Self::VerifySize { .. } => Template::VerifySize,
            Self::VerifyMaterial { .. } => Template::VerifyMaterial,
            Self::QueryColor { .. } => Template::QueryColor,
            Self::QueryMaterial { .. } => Template::QueryMaterial,
            Self::QuerySize { .. } => Template::QuerySize,
            Self::ChooseColor { .. } => Template::ChooseColor,
            Self::ChooseSize { .. } => Template::ChooseSize,
            Self::ChooseLocation { .. } => Template::ChooseLocation,
            Self::AndExist { .. } => Template::AndExist,
            Self::SameColor { .. } => Template::SameColor,
        }
    }

    /// Rarity is measured within question groups: template and subject
    /// category, plus the asked value for yes/no templates.
    pub fn group(&self) -> String {
        let t = self.template().as_str();
        match *self {
            Self::ExistColor { category, color } | Self::VerifyColor { category, color } => {
                format!("{t}:{}:{}", cat(category), COLORS[color as usize])
            }
            Self::VerifySize { category, size } => format!("{t}:{}:{}", cat(category), SIZES[size as usize]),
            Self::VerifyMaterial { category, material } => {
                format!("{t}:{}:{}", cat(category), MATERIALS[material as usize])
            }
            Self::QueryColor { category }
            | Self::QueryMaterial { category }
            | Self::QuerySize { category }
            | Self::ChooseColor { category, .. }
            | Self::ChooseSize { category, .. }
            | Self::ChooseLocation { category, .. }
            | Self::AndExist { category, .. }
            | Self::SameColor { category, .. } => format!("{t}:{}", cat(category)),
        }
    }

    pub fn text(&self) -> String {
        let s = match *self {
            Self::ExistColor { category, color } => {
                format!("is there a {} {} ?", COLORS[color as usize], cat(category))
            }
            Self::VerifyColor { category, color } => format!("is the {} {} ?", cat(category), COLORS[color as usize]),
            Self::VerifySize { category, size } => format!("is the {} {} ?", cat(category), SIZES[size as usize]),
            Self::VerifyMaterial { category, material } => {
                format!("is the {} made of {} ?", cat(category), MATERIALS[material as usize])
            }
            Self::QueryColor { category } => format!("what color is the {} ?", cat(category)),
            Self::QueryMaterial { category } => format!("what material is the {} made of ?", cat(category)),
            Self::QuerySize { category } => format!("what size is the {} ?", cat(category)),
            Self::ChooseColor { category, first, second } => format!(
                "is the {} {} or {} ?",
                cat(category),
                COLORS[first as usize],
                COLORS[second as usize]
            ),
            Self::ChooseSize { category, first } => format!(
                "is the {} {} or {} ?",
                cat(category),
                SIZES[first as usize],
                SIZES[1 - first as usize]
            ),
            Self::ChooseLocation { category, first } => format!(
                "is the {} on the {} or {} ?",
                cat(category),
                LOCATIONS[first as usize],
                LOCATIONS[1 - first as usize]
            ),
            Self::AndExist { category, color, other, size } => format!(
                "is there a {} {} and a {} {} ?",
                COLORS[color as usize],
                cat(category),
                SIZES[size as usize],
                cat(other)
            ),
            Self::SameColor { category, other } => {
                format!("are the {} and the {} the same color ?", cat(category), cat(other))
            }
        };
        s
    }

    /// Inverse of [`Program::text`].
    pub fn parse(text: &str) -> Result<Self> {
        let w: Vec<&str> = text.split_whitespace().collect();
        let bad = || LensError::Contract(format!("not a template question: `{text}`"));
        let idx = |list: &[&str], s: &str| list.iter().position(|x| *x == s).map(|i| i as u8);
        let c = |s: &str| idx(&CATEGORIES, s).ok_or_else(bad);
        let col = |s: &str| idx(&COLORS, s).ok_or_else(bad);
        let p = match w.as_slice() {
            ["is", "there", "a", color, category, "?"] => Self::ExistColor { category: c(category)?, color: col(color)? },
            ["is", "there", "a", color, category, "and", "a", size, other, "?"] => Self::AndExist {
                category: c(category)?,
                color: col(color)?,
                other: c(other)?,
                size: idx(&SIZES, size).ok_or_else(bad)?,
            },
            ["is", "the", category, "made", "of", material, "?"] => Self::VerifyMaterial {
                category: c(category)?,
                material: idx(&MATERIALS, material).ok_or_else(bad)?,
            },
            ["is", "the", category, "on", "the", first, "or", _, "?"] => Self::ChooseLocation {
                category: c(category)?,
                first: idx(&LOCATIONS, first).ok_or_else(bad)?,
            },
            ["is", "the", category, a, "or", b, "?"] => match (idx(&COLORS, a), idx(&SIZES, a)) {
                (Some(first), _) => Self::ChooseColor { category: c(category)?, first, second: col(b)? },
                (_, Some(first)) => Self::ChooseSize { category: c(category)?, first },
                _ => return Err(bad()),
            },
            ["is", "the", category, value, "?"] => match (idx(&COLORS, value), idx(&SIZES, value)) {
                (Some(color), _) => Self::VerifyColor { category: c(category)?, color },
                (_, Some(size)) => Self::VerifySize { category: c(category)?, size },
                _ => return Err(bad()),
            },
            ["what", "color", "is", "the", category, "?"] => Self::QueryColor { category: c(category)? },
            ["what", "material", "is", "the", category, "made", "of", "?"] => {
                Self::QueryMaterial { category: c(category)? }
            }
            ["what", "size", "is", "the", category, "?"] => Self::QuerySize { category: c(category)? },
            ["are", "the", category, "and", "the", other, "the", "same", "color", "?"] => {
                Self::SameColor { category: c(category)?, other: c(other)? }
            }
            _ => return Err(bad()),
        };
        Ok(p)
    }

    /// Runs the program on ground truth. `None` when the question does not
    /// apply (a referenced object is missing or ambiguous).
    pub fn execute(&self, scene: &Scene) -> Option<Execution> {
        let objs = &scene.objects;
        let of_cat = |c: u8| -> Vec<usize> { (0..objs.len()).filter(|&i| objs[i].category == c).collect() };
        let one = |answer: Answer, i: usize| Some(Execution { answer, needed: vec![i] });
        match *self {
            Self::ExistColor { category, color } => {
                let needed = of_cat(category);
                let yes = needed.iter().any(|&i| objs[i].color == color);
                Some(Execution { answer: Answer::from_bool(yes), needed })
            }
            Self::VerifyColor { category, color } => {
                let i = scene.unique(category)?;
                one(Answer::from_bool(objs[i].color == color), i)
            }
            Self::VerifySize { category, size } => {
                let i = scene.unique(category)?;
                one(Answer::from_bool(objs[i].size == size), i)
            }
            Self::VerifyMaterial { category, material } => {
                let i = scene.unique(category)?;
                one(Answer::from_bool(objs[i].material == material), i)
            }
            Self::QueryColor { category } => {
                let i = scene.unique(category)?;
                one(Answer::Color(objs[i].color), i)
            }
            Self::QueryMaterial { category } => {
                let i = scene.unique(category)?;
                one(Answer::Material(objs[i].material), i)
            }
            Self::QuerySize { category } => {
                let i = scene.unique(category)?;
                one(Answer::Size(objs[i].size), i)
            }
            Self::ChooseColor { category, first, second } => {
                let i = scene.unique(category)?;
                let c = objs[i].color;
                if first == second || (c != first && c != second) {
                    return None;
                }
                one(Answer::Color(c), i)
            }
            Self::ChooseSize { category, .. } => {
                let i = scene.unique(category)?;
                one(Answer::Size(objs[i].size), i)
            }
            Self::ChooseLocation { category, .. } => {
                let i = scene.unique(category)?;
                let right = objs[i].bbox.center_x() >= 0.5;
                one(Answer::Location(right as u8), i)
            }
            Self::AndExist { category, color, other, size } => {
                if category == other {
                    return None;
                }
                let a = of_cat(category);
                let b = of_cat(other);
                let yes = a.iter().any(|&i| objs[i].color == color) && b.iter().any(|&i| objs[i].size == size);
                let mut needed = a;
                needed.extend(b);
                Some(Execution { answer: Answer::from_bool(yes), needed })
            }
            Self::SameColor { category, other } => {
                if category == other {
                    return None;
                }
                let i = scene.unique(category)?;
                let j = scene.unique(other)?;
                Some(Execution { answer: Answer::from_bool(objs[i].color == objs[j].color), needed: vec![i, j] })
            }
        }
    }
}

fn other_than(rng: &mut LensRng, n: usize, avoid: u8) -> u8 {
    let k = rng.random_range(0..n - 1) as u8;
    if k >= avoid {
        k + 1
    } else {
        k
    }
}

/// A value from `0..n` not in `taken`, if one exists.
fn absent(rng: &mut LensRng, n: usize, taken: &[u8]) -> Option<u8> {
    let free: Vec<u8> = (0..n as u8).filter(|v| !taken.contains(v)).collect();
    if free.is_empty() {
        None
    } else {
        Some(free[rng.random_range(0..free.len())])
    }
}

/// Draws parameters for `template` on `scene`. Returns `None` when the
/// template cannot be instantiated (the caller resamples).
pub fn sample_program(rng: &mut LensRng, scene: &Scene, template: Template) -> Option<Program> {
    let objs = &scene.objects;
    if objs.is_empty() {
        return None;
    }
    let uniques: Vec<usize> = (0..objs.len()).filter(|&i| scene.unique(objs[i].category).is_some()).collect();
    let pick_unique = |rng: &mut LensRng| -> Option<usize> {
        if uniques.is_empty() {
            None
        } else {
            Some(uniques[rng.random_range(0..uniques.len())])
        }
    };
    let colors_of = |c: u8| -> Vec<u8> { objs.iter().filter(|o| o.category == c).map(|o| o.color).collect() };
    let truthful = rng.random::<bool>();
    let p = match template {
        Template::ExistColor => {
            let o = &objs[rng.random_range(0..objs.len())];
            let color = if truthful { o.color } else { absent(rng, COLORS.len(), &colors_of(o.category))? };
            Program::ExistColor { category: o.category, color }
        }
        Template::VerifyColor => {
            let o = &objs[pick_unique(rng)?];
            let color = if truthful { o.color } else { other_than(rng, COLORS.len(), o.color) };
            Program::VerifyColor { category: o.category, color }
        }
        Template::VerifySize => {
            let o = &objs[pick_unique(rng)?];
            let size = if truthful { o.size } else { 1 - o.size };
            Program::VerifySize { category: o.category, size }
        }
        Template::VerifyMaterial => {
            let o = &objs[pick_unique(rng)?];
            let material = if truthful { o.material } else { other_than(rng, MATERIALS.len(), o.material) };
            Program::VerifyMaterial { category: o.category, material }
        }
        Template::QueryColor => Program::QueryColor { category: objs[pick_unique(rng)?].category },
        Template::QueryMaterial => Program::QueryMaterial { category: objs[pick_unique(rng)?].category },
        Template::QuerySize => Program::QuerySize { category: objs[pick_unique(rng)?].category },
        Template::ChooseColor => {
            let o = &objs[pick_unique(rng)?];
            let decoy = other_than(rng, COLORS.len(), o.color);
            let (first, second) = if rng.random::<bool>() { (o.color, decoy) } else { (decoy, o.color) };
            Program::ChooseColor { category: o.category, first, second }
        }
        Template::ChooseSize => {
            Program::ChooseSize { category: objs[pick_unique(rng)?].category, first: rng.random_range(0..2) }
        }
        Template::ChooseLocation => {
            Program::ChooseLocation { category: objs[pick_unique(rng)?].category, first: rng.random_range(0..2) }
        }
        Template::AndExist => {
            let a = &objs[rng.random_range(0..objs.len())];
            let others: Vec<usize> = (0..objs.len()).filter(|&i| objs[i].category != a.category).collect();
            if others.is_empty() {
                return None;
            }
            let b = &objs[others[rng.random_range(0..others.len())]];
            // Each conjunct holds with probability ~0.7, so "yes" is about half.
            let color = if rng.random::<f64>() < 0.7 {
                a.color
            } else {
                absent(rng, COLORS.len(), &colors_of(a.category)).unwrap_or(a.color)
            };
            let sizes: Vec<u8> = objs.iter().filter(|o| o.category == b.category).map(|o| o.size).collect();
            let size = if rng.random::<f64>() < 0.7 { b.size } else { absent(rng, SIZES.len(), &sizes).unwrap_or(b.size) };
            Program::AndExist { category: a.category, color, other: b.category, size }
        }
        Template::SameColor => {
            if uniques.len() < 2 {
                return None;
            }
            let i = rng.random_range(0..uniques.len());
            let mut j = rng.random_range(0..uniques.len() - 1);
            if j >= i {
                j += 1;
            }
            Program::SameColor { category: objs[uniques[i]].category, other: objs[uniques[j]].category }
        }
    };
    Some(p)
}

/// A generated question with its annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub program: Program,
    pub text: String,
    pub functions: Vec<Function>,
    pub group: String,
    pub answer: Answer,
    pub needed: Vec<usize>,
}

pub fn generate_question(rng: &mut LensRng, scene: &Scene, template: Template) -> Option<QuestionSpec> {
    let program = sample_program(rng, scene, template)?;
    let exec = program.execute(scene)?;
    Some(QuestionSpec {
        text: program.text(),
        functions: template.functions(),
        group: program.group(),
        answer: exec.answer,
        needed: exec.needed,
        program,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{BBox, ObjectGT};

    fn obj(category: u8, color: u8) -> ObjectGT {
        ObjectGT { category, color, material: 0, size: 0, bbox: BBox { x: 0.1, y: 0.1, w: 0.1, h: 0.1 } }
    }

    #[test]
    fn only_cube_is_red() {
        let scene = Scene { objects: vec![obj(0, 0), obj(2, 1)] };
        let p = Program::VerifyColor { category: 0, color: 0 };
        assert_eq!(p.text(), "is the cube red ?");
        assert_eq!(p.execute(&scene).unwrap().answer, Answer::Yes);
    }

    #[test]
    fn ambiguous_reference_does_not_apply() {
        let scene = Scene { objects: vec![obj(0, 0), obj(0, 1)] };
        assert!(Program::QueryColor { category: 0 }.execute(&scene).is_none());
    }

    #[test]
    fn choose_color_is_annotated() {
        assert!(Template::ChooseColor.functions().contains(&Function::ChooseColor));
    }

    #[test]
    fn names_round_trip() {
        for f in Function::ALL {
            assert_eq!(f.as_str().parse::<Function>().unwrap(), *f);
        }
        for t in Template::ALL {
            assert_eq!(t.as_str().parse::<Template>().unwrap(), *t);
        }
    }
}
