//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HXCK" | u16 version | str direction
//! u32 T | u8 schedule kind | u8 variance mode
//! u8 activation | u8 output head | f64 residual scale
//! u32 hidden count | u32 width...
//! u8 has geometry | [u32 height | u32 width]
//! u8 precision (0 = f32, 1 = f64)
//! u32 array count | { str name | u32 length | values }...
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{invalid, Result};
use crate::schedule::{ScheduleKind, ScheduleSpec, VarianceMode};

use super::net::{Activation, NetDescriptor, OutputHead, SmallNet};
use super::{Direction, Precision};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HXCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A trained network together with the direction and schedule it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub direction: Direction,
    pub schedule: ScheduleSpec,
    pub precision: Precision,
    pub net: SmallNet,
}

impl Checkpoint {
    /// Fails unless the checkpoint was trained for `requested`.
    pub fn ensure_direction(&self, requested: Direction) -> Result<()> {
        if self.direction != requested {
            return Err(invalid(format!(
                "checkpoint was trained for {} but {} was requested",
                self.direction, requested
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.str(self.direction.tag());

        w.u32(self.schedule.steps as u32);
        w.u8(match self.schedule.kind {
            ScheduleKind::Linear => 0,
            ScheduleKind::Cosine => 1,
        });
        w.u8(match self.schedule.variance_mode {
            VarianceMode::Posterior => 0,
            VarianceMode::Beta => 1,
        });

        let desc = self.net.descriptor();
        w.u8(desc.activation.code());
        w.u8(desc.head.code());
        w.f64(desc.residual_scale);
        w.u32(desc.hidden.len() as u32);
        for &c in &desc.hidden {
            w.u32(c as u32);
        }
        match crate::predictor::EpsilonPredictor::geometry(&self.net) {
            Some((h, wd)) => {
                w.u8(1);
                w.u32(h as u32);
                w.u32(wd as u32);
            }
            None => w.u8(0),
        }

        w.u8(self.precision.code());
        let arrays = self.net.weight_arrays();
        w.u32(arrays.len() as u32);
        for (name, values) in arrays {
            w.str(&name);
            w.u32(values.len() as u32);
            for &v in values {
                match self.precision {
                    Precision::F32 => w.f32(v as f32),
                    Precision::F64 => w.f64(v),
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let direction = r.str()?.parse::<Direction>()?;

        let steps = r.u32()? as usize;
        let kind = match r.u8()? {
            0 => ScheduleKind::Linear,
            1 => ScheduleKind::Cosine,
            k => return Err(r.error(format!("unknown schedule kind {k}"))),
        };
        let variance_mode = match r.u8()? {
            0 => VarianceMode::Posterior,
            1 => VarianceMode::Beta,
            k => return Err(r.error(format!("unknown variance mode {k}"))),
        };

        let act_code = r.u8()?;
        let activation = Activation::from_code(act_code)
            .ok_or_else(|| r.error(format!("unknown activation {act_code}")))?;
        let head_code = r.u8()?;
        let head = OutputHead::from_code(head_code)
            .ok_or_else(|| r.error(format!("unknown output head {head_code}")))?;
        let residual_scale = r.f64()?;
        let n_hidden = r.u32()? as usize;
        let hidden = (0..n_hidden)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        let geometry = match r.u8()? {
            0 => None,
            1 => Some((r.u32()? as usize, r.u32()? as usize)),
            g => return Err(r.error(format!("bad geometry flag {g}"))),
        };

        let prec_code = r.u8()?;
        let precision = Precision::from_code(prec_code)
            .ok_or_else(|| r.error(format!("unknown precision {prec_code}")))?;
        let descriptor = NetDescriptor {
            hidden,
            activation,
            head,
            residual_scale,
        };
        let expected = SmallNet::zeroed(descriptor.clone())?;
        let expected_arrays = expected.weight_arrays();

        let n_arrays = r.u32()? as usize;
        if n_arrays != expected_arrays.len() {
            return Err(r.error(format!(
                "descriptor implies {} weight arrays, file has {n_arrays}",
                expected_arrays.len()
            )));
        }
        let mut params = Vec::with_capacity(descriptor.parameter_count());
        for (want_name, want) in &expected_arrays {
            let name = r.str()?;
            let len = r.u32()? as usize;
            if &name != want_name || len != want.len() {
                return Err(r.error(format!(
                    "array {name:?} of length {len} where {want_name:?} of length {} was expected",
                    want.len()
                )));
            }
            for _ in 0..len {
                params.push(match precision {
                    Precision::F32 => r.f32()? as f64,
                    Precision::F64 => r.f64()?,
                });
            }
        }
        r.expect_end()?;

        Ok(Self {
            direction,
            schedule: ScheduleSpec {
                steps,
                kind,
                variance_mode,
            },
            precision,
            net: SmallNet::from_params(descriptor, params, geometry)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
