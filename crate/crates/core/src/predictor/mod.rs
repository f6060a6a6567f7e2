//! Noise predictors: the `ε_θ` contract, an analytic oracle for verifying
//! the sampler, and a small trainable network.

mod adam;
mod checkpoint;
mod net;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::ConditionedState;
use crate::error::{invalid, Result};
use crate::schedule::NoiseSchedule;
use crate::slice::Slice;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{
    time_features, Activation, ForwardCache, NetDescriptor, OutputHead, SmallNet, IMAGE_CHANNELS, KERNEL,
    TIME_FEATURES,
};
pub use train::{
    loss_gradient, train, train_with_progress, training_loss, BatchItem, TimestepDraw, TrainConfig,
    TrainOutcome,
};

/// Maps a conditioned noisy state to a predicted noise field of the same
/// shape. Implementations must be callable from several threads at once.
pub trait EpsilonPredictor: Sync {
    /// Slice shape the predictor was built for, if it is restricted to one.
    fn geometry(&self) -> Option<(usize, usize)> {
        None
    }

    fn predict(&self, cs: &ConditionedState<'_>, sched: &NoiseSchedule) -> Result<Slice>;
}

impl<P: EpsilonPredictor + ?Sized> EpsilonPredictor for &P {
    fn geometry(&self) -> Option<(usize, usize)> {
        (**self).geometry()
    }

    fn predict(&self, cs: &ConditionedState<'_>, sched: &NoiseSchedule) -> Result<Slice> {
        (**self).predict(cs, sched)
    }
}

type TargetMap = dyn Fn(&Slice) -> Slice + Send + Sync;

/// Knows the true contrast map `f` and returns the exact noise that explains
/// `x_t` given `x_0 = f(condition)`:
/// `(x_t − √ᾱ_t f(b)) / √(1 − ᾱ_t)`.
pub struct OraclePredictor {
    target_map: Box<TargetMap>,
}

impl OraclePredictor {
    pub fn new(target_map: impl Fn(&Slice) -> Slice + Send + Sync + 'static) -> Self {
        Self {
            target_map: Box::new(target_map),
        }
    }

    pub fn target(&self, condition: &Slice) -> Slice {
        (self.target_map)(condition)
    }
}

impl fmt::Debug for OraclePredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OraclePredictor").finish_non_exhaustive()
    }
}

impl EpsilonPredictor for OraclePredictor {
    fn predict(&self, cs: &ConditionedState<'_>, sched: &NoiseSchedule) -> Result<Slice> {
        let t = cs.t();
        sched.check_timestep(t)?;
        let x0 = self.target(cs.condition());
        cs.state().ensure_same_shape(&x0, "oracle target")?;
        let a = sched.signal_scale(t);
        let b = sched.noise_scale(t);
        let data = cs
            .state()
            .data()
            .iter()
            .zip(x0.data())
            .map(|(x, y)| (x - a * y) / b)
            .collect();
        Slice::new(x0.height(), x0.width(), data)
    }
}

/// Mapping direction a model was trained for. The two directions need two
/// separately trained models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "s2t")]
    SourceToTarget,
    #[serde(rename = "t2s")]
    TargetToSource,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::SourceToTarget => "s2t",
            Direction::TargetToSource => "t2s",
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Direction::SourceToTarget => Direction::TargetToSource,
            Direction::TargetToSource => Direction::SourceToTarget,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Direction {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s2t" => Ok(Direction::SourceToTarget),
            "t2s" => Ok(Direction::TargetToSource),
            other => Err(invalid(format!("unknown direction {other:?} (expected s2t or t2s)"))),
        }
    }
}

/// Storage precision of network weights. Arithmetic is always 64-bit; with
/// `F32` the weights are rounded to single precision after every update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::q_sample;
    use crate::rng;
    use crate::schedule::{ScheduleKind, VarianceMode};

    #[test]
    fn oracle_recovers_forward_noise() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear, VarianceMode::Posterior).unwrap();
        let oracle = OraclePredictor::new(|b: &Slice| b.map(|v| 0.5 * v + 0.2));
        let mut r = rng::stream(5);
        let b = rng::gaussian_slice(&mut r, 6, 6).map(|v| v.abs().min(1.0));
        let eps = rng::gaussian_slice(&mut r, 6, 6);
        for t in [1, 17, 500, 1000] {
            let xt = q_sample(&oracle.target(&b), t, &eps, &s).unwrap();
            let cs = ConditionedState::new(&b, &xt, t).unwrap();
            let pred = oracle.predict(&cs, &s).unwrap();
            assert!(pred.max_abs_diff(&eps) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn direction_tags() {
        assert_eq!("s2t".parse::<Direction>().unwrap(), Direction::SourceToTarget);
        assert_eq!(Direction::SourceToTarget.reversed().tag(), "t2s");
        assert!("up".parse::<Direction>().is_err());
    }
}
