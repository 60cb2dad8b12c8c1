//! Signal front end: STFT framing, bounded complex masking, WAV I/O and the
//! streaming enhancer.

pub mod enhance;
pub mod mask;
pub mod stft;
pub mod wav;

pub use enhance::{enhance_file, EnhanceStats, Enhancer};
pub use mask::{bound_and_apply_mask, bound_mask};
pub use stft::{istft, stft, FrameConfig};
