//! Desk-scale ultra-compact transformer compression pipeline: a small
//! transformer teacher, cross-distillation into a much smaller student,
//! attention-based hard token pruning, and module-wise int8 quantization,
//! with storage and operation-count accounting throughout.

pub mod data;
pub mod distill;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod quant;
pub mod vocab;
