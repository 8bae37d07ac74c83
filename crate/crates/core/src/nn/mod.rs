//! Network building blocks: parameter storage, conv blocks and the U-Net.

pub mod layers;
pub mod params;
pub mod unet;

pub use layers::{group_count, Conv2d, ConvBlock, ConvStage, GroupNorm, Upsample};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use unet::{spatial_multiple, Channels, DecoderLevel, OuterUNet, Segment, SegmentSpec, UNetBackbone, DEPTH};
