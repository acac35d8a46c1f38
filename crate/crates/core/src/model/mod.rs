//! The EDT network and its building blocks.

mod block;
mod layers;
mod modules;
mod network;
mod params;

pub use block::EdtBlock;
pub use layers::{
    expand_index, merge_index, modulate, patchify, patchify_index, sincos_2d, timestep_features,
    unpatchify, unpatchify_index, AdaLn, Init, Linear,
};
pub use modules::{Downsample, FinalLayer, LongSkip, MaskHook, Upsample};
pub use network::{AttachedAmm, Edt, ForwardOptions, Trace};
pub use params::ParamStore;
