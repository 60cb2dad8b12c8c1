//! Loss, data preparation, optimization and evaluation.

pub mod data;
pub mod level;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use data::{read_manifest, Dataset, ManifestEntry, Split, Utterance};
pub use level::{active_speech_level, mix_at_snr, Mixture};
pub use loss::LossConfig;
pub use metrics::{delta_snr, SnrGain};
pub use optim::{Adam, Plateau, ScheduleConfig, StopReason};
pub use trainer::{train, EpochLog, Finish, TrainConfig, TrainReport};
