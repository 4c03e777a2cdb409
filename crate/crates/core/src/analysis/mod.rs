//! Parameter and FLOP accounting.
//!
//! Counts come from closed-form formulas over a [`ModelConfig`](crate::model::ModelConfig),
//! independent of any built model, so they can be cross-checked against
//! parameter enumeration and the MAC counts a tape records.

mod cost;
mod report;

pub use cost::{
    compare_decoder_channels, count_params, estimate_flops, estimate_flops_with, DecoderComparison, DecoderDelta,
};
pub use report::{emit_report, CostClass, CostMeta, CostReport, CostRow, CostTotals, FlopConvention, ReportFormat};
