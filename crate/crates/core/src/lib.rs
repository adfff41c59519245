//! Lidar-only tree-species segmentation on gridded elevation data.
//!
//! The crate covers the whole chain: canopy height from surface and terrain
//! models, refinement of coarse 16 m weak labels, a from-scratch U-Net trained
//! with focal loss and CowBatchMix augmentation, tiled inference with logit
//! smoothing and edge cropping, and dominant-class evaluation over circular
//! reference plots. A procedural scene generator stands in for field data.

pub mod eval;
pub mod grid;
pub mod synth;
pub mod labels;
pub mod net;
pub mod train;
pub mod infer;
