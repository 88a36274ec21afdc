use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

/// Kind of visual input a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Ground-truth objects as concatenated one-hot class/attribute codes plus box.
    OracleSymbolic,
    /// Simulated detector features plus jittered box.
    NoisyDense,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub lang_layers: usize,
    pub vis_layers: usize,
    pub cross_layers: usize,
    pub answer_vocab: usize,
    pub question_vocab: usize,
    pub max_question_len: usize,
    pub max_objects: usize,
    pub encoder: EncoderKind,
    pub visual_width: usize,
    pub ffn_mult: usize,
}

impl ModelConfig {
    /// Desk default: d=32, h=4, 9 language, 5 vision and 5 cross-modal layers.
    pub fn desk(encoder: EncoderKind, visual_width: usize, question_vocab: usize, answer_vocab: usize) -> Self {
        Self {
            hidden: 32,
            heads: 4,
            lang_layers: 9,
            vis_layers: 5,
            cross_layers: 5,
            answer_vocab,
            question_vocab,
            max_question_len: 16,
            max_objects: 16,
            encoder,
            visual_width,
            ffn_mult: 4,
        }
    }

    /// Non-canonical 4/2/2 profile for fast runs.
    pub fn mini(encoder: EncoderKind, visual_width: usize, question_vocab: usize, answer_vocab: usize) -> Self {
        Self {
            lang_layers: 4,
            vis_layers: 2,
            cross_layers: 2,
            ..Self::desk(encoder, visual_width, question_vocab, answer_vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(LensError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        let counts = [
            ("lang_layers", self.lang_layers),
            ("vis_layers", self.vis_layers),
            ("cross_layers", self.cross_layers),
            ("answer_vocab", self.answer_vocab),
            ("question_vocab", self.question_vocab),
            ("max_question_len", self.max_question_len),
            ("max_objects", self.max_objects),
            ("visual_width", self.visual_width),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LensError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn layers_of(&self, block: BlockType) -> usize {
        match block {
            BlockType::Lang => self.lang_layers,
            BlockType::Vis => self.vis_layers,
            _ => self.cross_layers,
        }
    }

    /// Every head in canonical order: language-only layers, vision-only
    /// layers, then per cross-modal layer the `vl`, `ll`, `lv`, `vv` blocks.
    pub fn all_heads(&self) -> Vec<HeadAddress> {
        let mut out = Vec::new();
        for block in [BlockType::Lang, BlockType::Vis] {
            for layer in 0..self.layers_of(block) {
                for head in 0..self.heads {
                    out.push(HeadAddress { block, layer, head });
                }
            }
        }
        out.extend(self.cross_heads());
        out
    }

    /// Cross-modal heads in behavior-vector order (layer, block, head).
    pub fn cross_heads(&self) -> Vec<HeadAddress> {
        let mut out = Vec::new();
        for layer in 0..self.cross_layers {
            for block in BlockType::CROSS {
                for head in 0..self.heads {
                    out.push(HeadAddress { block, layer, head });
                }
            }
        }
        out
    }

    pub fn check_head(&self, h: HeadAddress) -> Result<()> {
        if h.layer >= self.layers_of(h.block) || h.head >= self.heads {
            return Err(LensError::HeadAddress(h.to_string()));
        }
        Ok(())
    }

    /// Fields that must agree for parameters to move between two models.
    pub fn transfer_mismatches(&self, other: &Self) -> Vec<&'static str> {
        let mut bad = Vec::new();
        let pairs = [
            ("hidden", self.hidden, other.hidden),
            ("heads", self.heads, other.heads),
            ("lang_layers", self.lang_layers, other.lang_layers),
            ("vis_layers", self.vis_layers, other.vis_layers),
            ("cross_layers", self.cross_layers, other.cross_layers),
            ("answer_vocab", self.answer_vocab, other.answer_vocab),
            ("question_vocab", self.question_vocab, other.question_vocab),
            ("max_question_len", self.max_question_len, other.max_question_len),
            ("ffn_mult", self.ffn_mult, other.ffn_mult),
        ];
        for (name, a, b) in pairs {
            if a != b {
                bad.push(name);
            }
        }
        bad
    }
}

/// Attention block families, abbreviated as in the architecture notation:
/// `lang`/`vis` are the single-modality stacks; inside cross-modal layers
/// `vl` is language attending to vision, `ll` the following language
/// self-attention, `lv` vision attending to language and `vv` the following
/// vision self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    Lang,
    Vis,
    Vl,
    Ll,
    Lv,
    Vv,
}

impl BlockType {
    pub const ALL: [BlockType; 6] = [Self::Lang, Self::Vis, Self::Vl, Self::Ll, Self::Lv, Self::Vv];
    pub const CROSS: [BlockType; 4] = [Self::Vl, Self::Ll, Self::Lv, Self::Vv];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lang => "lang",
            Self::Vis => "vis",
            Self::Vl => "vl",
            Self::Ll => "ll",
            Self::Lv => "lv",
            Self::Vv => "vv",
        }
    }

    pub fn is_cross(self) -> bool {
        !matches!(self, Self::Lang | Self::Vis)
    }
}

impl FromStr for BlockType {
    type Err = LensError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| LensError::HeadAddress(format!("unknown block type `{s}`")))
    }
}

/// `(block-type, layer, head)`, written `vl,2,3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadAddress {
    pub block: BlockType,
    pub layer: usize,
    pub head: usize,
}

impl HeadAddress {
    pub fn new(block: BlockType, layer: usize, head: usize) -> Self {
        Self { block, layer, head }
    }
}

impl fmt::Display for HeadAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.block.as_str(), self.layer, self.head)
    }
}

impl FromStr for HeadAddress {
    type Err = LensError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || LensError::HeadAddress(String::from(s));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(Self {
            block: parts[0].parse()?,
            layer: parts[1].parse().map_err(|_| bad())?,
            head: parts[2].parse().map_err(|_| bad())?,
        })
    }
}

/// Heads whose attention map is replaced by the uniform map at inference.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    heads: BTreeSet<HeadAddress>,
}

impl PruneMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(config: &ModelConfig, heads: impl IntoIterator<Item = HeadAddress>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for h in heads {
            config.check_head(h)?;
            set.insert(h);
        }
        Ok(Self { heads: set })
    }

    /// Every head of the given block types.
    pub fn blocks(config: &ModelConfig, blocks: &[BlockType]) -> Self {
        let heads = config.all_heads().into_iter().filter(|h| blocks.contains(&h.block)).collect();
        Self { heads }
    }

    pub fn contains(&self, h: &HeadAddress) -> bool {
        self.heads.contains(h)
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HeadAddress> {
        self.heads.iter()
    }

    /// Per-head flags for one block instance.
    pub fn flags(&self, block: BlockType, layer: usize, heads: usize) -> Vec<bool> {
        (0..heads).map(|head| self.contains(&HeadAddress { block, layer, head })).collect()
    }
}
