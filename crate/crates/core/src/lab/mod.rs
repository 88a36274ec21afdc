//! Attention analyses over trained models.

pub mod knum;
pub mod modes;
pub mod ood;
pub mod prune;
pub mod tsne;

pub use knum::{head_k_stats, k_number, median, record_ks, KStat, Pooling, DEFAULT_THETA};
pub use modes::{
    behavior_vector, classify_mode, function_head_matrix, head_modes, FunctionHeadMatrix, KTable, Mode, ModeLabel,
    ModeThresholds,
};
pub use ood::{ood_curve, recall_confounder_check, OodCurve, OodPoint, RecallRow, RecallTable, RECALL_IOUS};
pub use prune::{fraction_curve, random_cross_mask, FractionPoint, MeanStd, PruneCategory};
pub use tsne::{nn_purity, nn_purity_high, tsne, TsneConfig, TsneResult};
