//! Forward noising, the conditional reverse step and slice/volume translation.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::predictor::EpsilonPredictor;
use crate::rng::{self, NoiseRng};
use crate::schedule::NoiseSchedule;
use crate::slice::Slice;
use crate::volume::{slice_sagittal, stack_sagittal, Volume};

/// The predictor input: the source-contrast condition paired channel-wise
/// with the current noisy state at timestep `t`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionedState<'a> {
    condition: &'a Slice,
    state: &'a Slice,
    t: usize,
}

impl<'a> ConditionedState<'a> {
    pub fn new(condition: &'a Slice, state: &'a Slice, t: usize) -> Result<Self> {
        condition.ensure_same_shape(state, "conditioned state")?;
        if t == 0 {
            return Err(invalid("timestep must be at least 1"));
        }
        Ok(Self {
            condition,
            state,
            t,
        })
    }

    pub fn condition(&self) -> &'a Slice {
        self.condition
    }

    pub fn state(&self) -> &'a Slice {
        self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn shape(&self) -> (usize, usize) {
        self.state.shape()
    }
}

/// Forward-process noise `epsilon` and reverse-process noise `z` drawn from
/// one seeded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub epsilon: Slice,
    pub z: Slice,
    pub rng_seed: u64,
}

impl NoiseDraw {
    pub fn generate(rng_seed: u64, height: usize, width: usize) -> Self {
        let mut rng = rng::stream(rng_seed);
        let epsilon = rng::gaussian_slice(&mut rng, height, width);
        let z = rng::gaussian_slice(&mut rng, height, width);
        Self {
            epsilon,
            z,
            rng_seed,
        }
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(x0: &Slice, t: usize, epsilon: &Slice, sched: &NoiseSchedule) -> Result<Slice> {
    sched.check_timestep(t)?;
    x0.ensure_same_shape(epsilon, "q_sample noise")?;
    let a = sched.signal_scale(t);
    let b = sched.noise_scale(t);
    let data = x0
        .data()
        .iter()
        .zip(epsilon.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Slice::new(x0.height(), x0.width(), data)
}

/// One ancestral denoising step from `x_t` to `x_{t−1}`:
///
/// `x_{t−1} = (x_t − β_t / √(1 − ᾱ_t) · ε_pred) / √α_t + σ_t z`.
///
/// `z = None` means a zero draw. The noise term is dropped at `t = 1`
/// whatever the variance mode.
pub fn reverse_step(
    cs: &ConditionedState<'_>,
    eps_pred: &Slice,
    z: Option<&Slice>,
    sched: &NoiseSchedule,
) -> Result<Slice> {
    let t = cs.t();
    sched.check_timestep(t)?;
    let state = cs.state();
    state.ensure_same_shape(eps_pred, "predicted noise")?;
    if let Some(z) = z {
        state.ensure_same_shape(z, "reverse noise")?;
    }
    if !eps_pred.is_finite() {
        return Err(Error::NumericFailure(format!(
            "non-finite noise prediction at t={t}"
        )));
    }

    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let eps_coef = sched.beta(t) / sched.noise_scale(t);
    let sigma = if t == 1 { 0.0 } else { sched.sigma(t) };

    let mut out: Vec<f64> = state
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(x, e)| inv_sqrt_alpha * (x - eps_coef * e))
        .collect();
    if let (Some(z), true) = (z, sigma > 0.0) {
        for (o, zv) in out.iter_mut().zip(z.data()) {
            *o += sigma * zv;
        }
    }
    Slice::new(state.height(), state.width(), out)
}

/// Runs the reverse chain from `start` (taken as `x_T`) down to `x_0`,
/// re-pairing `condition` with the state at every step. With `rng = None`
/// every `z` is zero.
pub fn reverse_chain<P: EpsilonPredictor + ?Sized>(
    condition: &Slice,
    start: Slice,
    predictor: &P,
    sched: &NoiseSchedule,
    mut rng: Option<&mut NoiseRng>,
) -> Result<Slice> {
    condition.ensure_same_shape(&start, "initial state")?;
    let (h, w) = condition.shape();
    let mut x = start;
    for t in (1..=sched.steps()).rev() {
        let cs = ConditionedState::new(condition, &x, t)?;
        let eps = predictor.predict(&cs, sched)?;
        let z = match (&mut rng, t > 1) {
            (Some(r), true) => Some(rng::gaussian_slice(r, h, w)),
            _ => None,
        };
        x = reverse_step(&cs, &eps, z.as_ref(), sched)?;
        if !x.is_finite() {
            return Err(Error::NumericFailure(format!(
                "state became non-finite at t={t}"
            )));
        }
    }
    Ok(x)
}

/// Translates one source slice: draws `x_T ~ N(0, I)` from `rng` and runs
/// the stochastic reverse chain. The result is not clamped.
pub fn translate_slice<P: EpsilonPredictor + ?Sized>(
    condition: &Slice,
    predictor: &P,
    sched: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<Slice> {
    if let Some((h, w)) = predictor.geometry() {
        if condition.shape() != (h, w) {
            return Err(invalid(format!(
                "predictor expects {h}x{w} slices, got {:?}",
                condition.shape()
            )));
        }
    }
    let start = rng::gaussian_slice(rng, condition.height(), condition.width());
    reverse_chain(condition, start, predictor, sched, Some(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslateOptions {
    /// Zero every output voxel whose source voxel is exactly zero
    /// (skull-stripped background).
    pub mask_background: bool,
}

impl Default for TranslateOptions {
    fn default() -> Self {
        Self {
            mask_background: true,
        }
    }
}

/// A translated volume: `volume` is clamped to `[0, 1]` (and optionally
/// masked), `raw` keeps the unclamped chain outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTranslation {
    pub volume: Volume,
    pub raw: Volume,
}

/// Translates every sagittal slice of `source` and stacks the results.
/// Slice `i` uses the seed `seed ^ i`, so the output does not depend on how
/// many worker threads the current rayon pool has.
pub fn translate_volume<P: EpsilonPredictor + ?Sized>(
    source: &Volume,
    predictor: &P,
    sched: &NoiseSchedule,
    seed: u64,
    options: TranslateOptions,
) -> Result<VolumeTranslation> {
    let slices = slice_sagittal(source);
    let raw: Vec<Slice> = slices
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng::stream(rng::slice_seed(seed, i));
            translate_slice(s, predictor, sched, &mut rng).map_err(|e| Error::AtSlice {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let finished: Vec<Slice> = raw
        .iter()
        .zip(&slices)
        .map(|(out, src)| {
            let mut o = out.map(|v| v.clamp(0.0, 1.0));
            if options.mask_background {
                for (v, s) in o.data_mut().iter_mut().zip(src.data()) {
                    if *s == 0.0 {
                        *v = 0.0;
                    }
                }
            }
            o
        })
        .collect();

    let spacing = source.spacing();
    let tag = &source.contrast_tag;
    let id = &source.subject_id;
    Ok(VolumeTranslation {
        volume: stack_sagittal(&finished, spacing, tag, id)?,
        raw: stack_sagittal(&raw, spacing, tag, id)?,
    })
}
