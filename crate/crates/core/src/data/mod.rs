//! Synthetic visual question answering task: scenes of simple objects with
//! skewed attribute priors, template questions annotated with the functions
//! they exercise, perfect-sight and simulated-detector visual encodings, and
//! rare-answer annotation for out-of-distribution evaluation.

pub mod catalog;
pub mod dataset;
pub mod encode;
pub mod question;
pub mod scene;
pub mod vocab;

pub use catalog::{answer_vocab, Answer, ANSWER_COUNT, CATEGORIES, COLORS, MATERIALS, ORACLE_WIDTH, SIZES};
pub use dataset::{build_splits, generate_sample, DataConfig, Dataset, InputKind, Rarity, RarityTable, Sample};
pub use encode::{
    encode_dense, encode_oracle, encode_predicted, simulate_detection, Decoded, DetectedScene, Detection,
    NoiseConfig, PrototypeConfig, Prototypes,
};
pub use question::{generate_question, Execution, Function, Program, QuestionSpec, Template};
pub use scene::{generate_scene, iou, BBox, ObjectGT, Scene, SceneConfig};
pub use vocab::{Tokenized, Vocab, CLS_ID, PAD_ID};
