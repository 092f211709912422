//! Audio I/O, STFT, primitive separators, patch labels and metrics.

pub mod audio;
pub mod dsp;
pub mod eval;
pub mod formats;
pub mod hash;
pub mod labels;
pub mod par;
pub mod primitives;
pub mod synth;
