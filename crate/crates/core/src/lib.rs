//! Conditional denoising-diffusion contrast harmonization.
//!
//! A noise predictor is trained on paired source/target slices. Each source
//! slice is concatenated with the current noisy state at every reverse step,
//! so the anatomy comes from the source image while the intensity
//! characteristics come from the learned target contrast. Translated slices
//! are stacked back into a volume and scored with MSE, histogram distance and
//! segmentation agreement metrics.

mod codec;
pub mod diffusion;
pub mod error;
pub mod hvol;
pub mod metrics;
pub mod phantom;
pub mod predictor;
pub mod rng;
pub mod schedule;
pub mod slice;
pub mod volume;

pub use diffusion::{
    q_sample, reverse_step, translate_slice, translate_volume, ConditionedState, NoiseDraw,
    VolumeTranslation,
};
pub use error::{Error, Result};
pub use predictor::{
    Activation, Checkpoint, Direction, EpsilonPredictor, NetDescriptor, OraclePredictor,
    Precision, SmallNet, TrainConfig, TrainOutcome,
};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec, VarianceMode};
pub use slice::Slice;
pub use volume::{Spacing, Volume};
