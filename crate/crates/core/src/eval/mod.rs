//! Identity and style metrics, combination studies and block-group
//! ablations.

mod metrics;
mod study;

pub use metrics::{foreground_mask, identity_score, style_score, StyleFeatures, StyleReference, ALIGN_RADIUS, EDGE_SCALE, FOREGROUND_THRESHOLD};
pub use study::{
    evaluate_cell, run_block_group_ablation, run_combination_study, write_study, Ablation, AblationConfig, AdapterRecord, BlockGroup,
    CellReport, CellSpec, FidelityReport, ImageScore, Scorer, StudyConfig,
};
