//! The learnable correspondence pipeline and its objectives.

mod attention;
mod config;
mod losses;
mod network;

pub use attention::{
    build_gt_attention, cell_centers, nearest_cell, readout_baseline, AttentionMap, GtAttention, Readout, GT_RADIUS,
    GT_SIGMA,
};
pub use config::{Ablation, AttentionNorm, EncoderConfig, TrainConfig};
pub use losses::{l1_error_map, loss_att, loss_msk, loss_par, loss_tgt, total_loss, LossTerms};
pub use network::{
    align_background, background_input, cross_attention, flatten_cells, foreground_input, predict_filter_mask,
    predict_targets, Conv, Forward, Linear, MaskHead, Model,
};
