//! A small fully convolutional noise predictor.
//!
//! Input channels are the condition slice and the noisy state. The timestep
//! enters through three scalar features `(t/T, √ᾱ_t, √(1−ᾱ_t))` which every
//! hidden layer projects into a per-channel bias; this is the same as
//! appending them as constant image channels with replicate padding.
//! Every layer is a 3×3 "same" convolution with zero padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ConditionedState;
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::slice::Slice;

use super::EpsilonPredictor;

pub const IMAGE_CHANNELS: usize = 2;
pub const TIME_FEATURES: usize = 3;
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let a = z.tanh();
                1.0 - a * a
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// What the last convolution produces before it is turned into a noise
/// prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    /// The convolution output is `ε̂` itself.
    Epsilon,
    /// The convolution output is a clean-slice estimate `x̂0`, mapped to
    /// `ε̂ = (x_t − √ᾱ_t x̂0) / √(1 − ᾱ_t)`.
    Sample,
    /// The convolution output is a correction added to the condition slice:
    /// `x̂0 = b + F`, then mapped to `ε̂` as for `Sample`.
    #[default]
    Residual,
    /// Skip/output scaling in the space of residuals `y = x − √ᾱ_t b`.
    /// With `a = √ᾱ_t`, `s = √(1 − ᾱ_t)`, `σ` the residual scale and
    /// `d = √(s² + a²σ²)`: `ε̂ = s·y_t / d² − (aσ / d)·F`. The clean estimate
    /// follows `y_t` at low noise and `σF` at high noise, and errors in `F`
    /// reach `ε̂` with a gain of at most 1.
    Preconditioned,
}

impl OutputHead {
    pub fn code(self) -> u8 {
        match self {
            OutputHead::Epsilon => 0,
            OutputHead::Sample => 1,
            OutputHead::Residual => 2,
            OutputHead::Preconditioned => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutputHead::Epsilon),
            1 => Some(OutputHead::Sample),
            2 => Some(OutputHead::Residual),
            3 => Some(OutputHead::Preconditioned),
            _ => None,
        }
    }
}

/// Layer widths, nonlinearity and output head. `hidden` lists the channel
/// count of each hidden layer; the default single hidden layer gives two
/// convolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetDescriptor {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: OutputHead,
    /// Expected spread of `x0 − b`, used by [`OutputHead::Preconditioned`].
    pub residual_scale: f64,
}

impl Default for NetDescriptor {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Tanh,
            head: OutputHead::default(),
            residual_scale: 0.2,
        }
    }
}

impl NetDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(invalid("hidden layers need at least one channel"));
        }
        if !(self.residual_scale.is_finite() && self.residual_scale > 0.0) {
            return Err(invalid("residual scale must be positive"));
        }
        Ok(())
    }

    /// `(s / d², aσ / d)` for the preconditioned head.
    fn preconditioning(&self, a: f64, s: f64) -> (f64, f64) {
        let sigma = self.residual_scale;
        let d2 = s * s + a * a * sigma * sigma;
        (s / d2, a * sigma / d2.sqrt())
    }

    fn layouts(&self) -> Vec<LayerLayout> {
        let mut widths = vec![IMAGE_CHANNELS];
        widths.extend(&self.hidden);
        widths.push(1);
        let mut offset = 0;
        let last = widths.len() - 2;
        (0..=last)
            .map(|l| {
                let (in_ch, out_ch) = (widths[l], widths[l + 1]);
                let kernel = offset;
                offset += out_ch * in_ch * TAPS;
                let bias = offset;
                offset += out_ch;
                let features = (l < last).then(|| {
                    let f = offset;
                    offset += out_ch * TIME_FEATURES;
                    f
                });
                LayerLayout {
                    in_ch,
                    out_ch,
                    kernel,
                    bias,
                    features,
                }
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layouts()
            .last()
            .map(|l| l.bias + l.out_ch)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    bias: usize,
    features: Option<usize>,
}

impl LayerLayout {
    fn kernel_len(&self) -> usize {
        self.out_ch * self.in_ch * TAPS
    }
}

/// Timestep features shared by every pixel.
pub fn time_features(sched: &NoiseSchedule, t: usize) -> [f64; TIME_FEATURES] {
    [
        t as f64 / sched.steps() as f64,
        sched.signal_scale(t),
        sched.noise_scale(t),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallNet {
    descriptor: NetDescriptor,
    layouts: Vec<LayerLayout>,
    params: Vec<f64>,
    geometry: Option<(usize, usize)>,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    features: [f64; TIME_FEATURES],
    /// Input to each layer, channel-major.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl SmallNet {
    /// Uniform initialization on `±1/√fan_in` for kernels and feature
    /// projections; biases start at zero.
    pub fn new(descriptor: NetDescriptor, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(descriptor)?;
        let mut rng = rng::stream(seed);
        for layer in net.layouts.clone() {
            let fan_in = (layer.in_ch * TAPS + layer.features.map_or(0, |_| TIME_FEATURES)) as f64;
            let bound = 1.0 / fan_in.sqrt();
            for w in &mut net.params[layer.kernel..layer.kernel + layer.kernel_len()] {
                *w = rng.random_range(-bound..bound);
            }
            if let Some(f) = layer.features {
                for w in &mut net.params[f..f + layer.out_ch * TIME_FEATURES] {
                    *w = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    pub fn zeroed(descriptor: NetDescriptor) -> Result<Self> {
        descriptor.validate()?;
        let layouts = descriptor.layouts();
        let params = vec![0.0; descriptor.parameter_count()];
        Ok(Self {
            descriptor,
            layouts,
            params,
            geometry: None,
        })
    }

    /// Rebuilds a network from a flat parameter vector.
    pub fn from_params(
        descriptor: NetDescriptor,
        params: Vec<f64>,
        geometry: Option<(usize, usize)>,
    ) -> Result<Self> {
        let mut net = Self::zeroed(descriptor)?;
        if params.len() != net.params.len() {
            return Err(invalid(format!(
                "descriptor needs {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericFailure("non-finite network weight".into()));
        }
        net.params = params;
        net.geometry = geometry;
        Ok(net)
    }

    pub fn descriptor(&self) -> &NetDescriptor {
        &self.descriptor
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_geometry(&mut self, geometry: Option<(usize, usize)>) {
        self.geometry = geometry;
    }

    /// Named views of each weight array, in storage order.
    pub fn weight_arrays(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.layouts.iter().enumerate() {
            out.push((
                format!("conv{l}.kernel"),
                &self.params[layer.kernel..layer.kernel + layer.kernel_len()],
            ));
            out.push((
                format!("conv{l}.bias"),
                &self.params[layer.bias..layer.bias + layer.out_ch],
            ));
            if let Some(f) = layer.features {
                out.push((
                    format!("conv{l}.time"),
                    &self.params[f..f + layer.out_ch * TIME_FEATURES],
                ));
            }
        }
        out
    }

    /// Which entries of the flat parameter vector are biases.
    pub fn bias_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for layer in &self.layouts {
            for m in &mut mask[layer.bias..layer.bias + layer.out_ch] {
                *m = true;
            }
        }
        mask
    }

    pub fn forward(
        &self,
        condition: &Slice,
        state: &Slice,
        features: [f64; TIME_FEATURES],
    ) -> Result<ForwardCache> {
        condition.ensure_same_shape(state, "network input")?;
        let (h, w) = state.shape();
        let n = h * w;
        let mut input = Vec::with_capacity(IMAGE_CHANNELS * n);
        input.extend_from_slice(condition.data());
        input.extend_from_slice(state.data());

        let last = self.layouts.len() - 1;
        let mut inputs = Vec::with_capacity(self.layouts.len());
        let mut pre = Vec::with_capacity(last);
        for (l, layer) in self.layouts.iter().enumerate() {
            let mut z = vec![0.0; layer.out_ch * n];
            for o in 0..layer.out_ch {
                let mut b = self.params[layer.bias + o];
                if let Some(f) = layer.features {
                    let proj = &self.params[f + o * TIME_FEATURES..f + (o + 1) * TIME_FEATURES];
                    b += proj.iter().zip(&features).map(|(p, x)| p * x).sum::<f64>();
                }
                z[o * n..(o + 1) * n].fill(b);
            }
            let kernel = &self.params[layer.kernel..layer.kernel + layer.kernel_len()];
            conv3x3_forward(&input, &mut z, kernel, layer.in_ch, layer.out_ch, h, w);
            if l < last {
                let act = self.descriptor.activation;
                let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
                inputs.push(std::mem::replace(&mut input, a));
                pre.push(z);
            } else {
                inputs.push(std::mem::take(&mut input));
                let (a, b) = (features[1], features[2]);
                match self.descriptor.head {
                    OutputHead::Epsilon => {}
                    OutputHead::Sample => {
                        for (v, x) in z.iter_mut().zip(state.data()) {
                            *v = (x - a * *v) / b;
                        }
                    }
                    OutputHead::Residual => {
                        for ((v, x), c) in z.iter_mut().zip(state.data()).zip(condition.data()) {
                            *v = (x - a * (c + *v)) / b;
                        }
                    }
                    OutputHead::Preconditioned => {
                        let (skip, out) = self.descriptor.preconditioning(a, b);
                        for ((v, x), c) in z.iter_mut().zip(state.data()).zip(condition.data()) {
                            *v = skip * (x - a * c) - out * *v;
                        }
                    }
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericFailure("non-finite network output".into()));
                }
                return Ok(ForwardCache {
                    height: h,
                    width: w,
                    features,
                    inputs,
                    pre,
                    output: z,
                });
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output` for one sample.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64], grad: &mut [f64]) -> Result<()> {
        let (h, w) = (cache.height, cache.width);
        let n = h * w;
        if d_output.len() != n || grad.len() != self.params.len() {
            return Err(invalid("gradient buffer sizes do not match the network"));
        }
        let mut delta = d_output.to_vec();
        let scale = match self.descriptor.head {
            OutputHead::Epsilon => 1.0,
            OutputHead::Sample | OutputHead::Residual => -cache.features[1] / cache.features[2],
            OutputHead::Preconditioned => {
                -self.descriptor.preconditioning(cache.features[1], cache.features[2]).1
            }
        };
        if scale != 1.0 {
            for d in &mut delta {
                *d *= scale;
            }
        }
        for (l, layer) in self.layouts.iter().enumerate().rev() {
            if l < self.layouts.len() - 1 {
                let act = self.descriptor.activation;
                for (d, &z) in delta.iter_mut().zip(&cache.pre[l]) {
                    *d *= act.derivative(z);
                }
                if delta.iter().any(|d| !d.is_finite()) {
                    return Err(Error::NumericFailure(format!(
                        "non-finite error signal in layer {l}"
                    )));
                }
            }
            for o in 0..layer.out_ch {
                let s: f64 = delta[o * n..(o + 1) * n].iter().sum();
                grad[layer.bias + o] += s;
                if let Some(f) = layer.features {
                    for (k, x) in cache.features.iter().enumerate() {
                        grad[f + o * TIME_FEATURES + k] += s * x;
                    }
                }
            }
            let input = &cache.inputs[l];
            let kernel = &self.params[layer.kernel..layer.kernel + layer.kernel_len()];
            let kgrad = &mut grad[layer.kernel..layer.kernel + layer.kernel_len()];
            let mut d_input = if l > 0 {
                Some(vec![0.0; layer.in_ch * n])
            } else {
                None
            };
            conv3x3_backward(
                input,
                &delta,
                kernel,
                kgrad,
                d_input.as_deref_mut(),
                layer.in_ch,
                layer.out_ch,
                h,
                w,
            );
            if let Some(d) = d_input {
                delta = d;
            }
        }
        Ok(())
    }

    pub fn predict_slice(&self, condition: &Slice, state: &Slice, features: [f64; TIME_FEATURES]) -> Result<Slice> {
        let cache = self.forward(condition, state, features)?;
        Slice::new(cache.height, cache.width, cache.output)
    }
}

impl EpsilonPredictor for SmallNet {
    fn geometry(&self) -> Option<(usize, usize)> {
        self.geometry
    }

    fn predict(&self, cs: &ConditionedState<'_>, sched: &NoiseSchedule) -> Result<Slice> {
        sched.check_timestep(cs.t())?;
        self.predict_slice(cs.condition(), cs.state(), time_features(sched, cs.t()))
    }
}

/// Rows `r` of the output for which the input row `r + dy - 1` exists, and
/// the matching column range for offset `dx`.
#[inline]
fn valid_range(len: usize, d: usize) -> (usize, usize) {
    // d ∈ {0,1,2}; source index = dst + d - 1
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { len - 1 } else { len };
    (lo, hi.max(lo))
}

fn conv3x3_forward(
    input: &[f64],
    out: &mut [f64],
    kernel: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) {
    let n = h * w;
    for o in 0..out_ch {
        let dst = &mut out[o * n..(o + 1) * n];
        for i in 0..in_ch {
            let src = &input[i * n..(i + 1) * n];
            let k = &kernel[(o * in_ch + i) * TAPS..(o * in_ch + i + 1) * TAPS];
            for dy in 0..KERNEL {
                let (r0, r1) = valid_range(h, dy);
                for dx in 0..KERNEL {
                    let kv = k[dy * KERNEL + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    let (c0, c1) = valid_range(w, dx);
                    for r in r0..r1 {
                        let sr = r + dy - 1;
                        let d = &mut dst[r * w + c0..r * w + c1];
                        let s = &src[sr * w + c0 + dx - 1..sr * w + c1 + dx - 1];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += kv * sv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    delta: &[f64],
    kernel: &[f64],
    kgrad: &mut [f64],
    mut d_input: Option<&mut [f64]>,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) {
    let n = h * w;
    for o in 0..out_ch {
        let dl = &delta[o * n..(o + 1) * n];
        for i in 0..in_ch {
            let src = &input[i * n..(i + 1) * n];
            let base = (o * in_ch + i) * TAPS;
            for dy in 0..KERNEL {
                let (r0, r1) = valid_range(h, dy);
                for dx in 0..KERNEL {
                    let (c0, c1) = valid_range(w, dx);
                    let kv = kernel[base + dy * KERNEL + dx];
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let sr = r + dy - 1;
                        let d = &dl[r * w + c0..r * w + c1];
                        let s = &src[sr * w + c0 + dx - 1..sr * w + c1 + dx - 1];
                        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(di) = d_input.as_deref_mut() {
                            let row = &mut di[i * n + sr * w + c0 + dx - 1..i * n + sr * w + c1 + dx - 1];
                            for (g, dv) in row.iter_mut().zip(d) {
                                *g += kv * dv;
                            }
                        }
                    }
                    kgrad[base + dy * KERNEL + dx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a zero-padded 3×3 convolution, one tap at a time.
    fn naive_conv(input: &[f64], kernel: &[f64], in_ch: usize, out_ch: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_ch * h * w];
        for o in 0..out_ch {
            for r in 0..h as isize {
                for c in 0..w as isize {
                    let mut acc = 0.0;
                    for i in 0..in_ch {
                        for dy in -1..=1isize {
                            for dx in -1..=1isize {
                                let (sr, sc) = (r + dy, c + dx);
                                if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                    continue;
                                }
                                let k = kernel[(o * in_ch + i) * 9 + ((dy + 1) * 3 + dx + 1) as usize];
                                acc += k * input[i * h * w + (sr as usize) * w + sc as usize];
                            }
                        }
                    }
                    out[o * h * w + r as usize * w + c as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut r = rng::stream(1);
        let (in_ch, out_ch, h, w) = (3, 2, 5, 4);
        let input: Vec<f64> = (0..in_ch * h * w).map(|_| rng::standard_normal(&mut r)).collect();
        let kernel: Vec<f64> = (0..out_ch * in_ch * 9).map(|_| rng::standard_normal(&mut r)).collect();
        let mut out = vec![0.0; out_ch * h * w];
        conv3x3_forward(&input, &mut out, &kernel, in_ch, out_ch, h, w);
        let expected = naive_conv(&input, &kernel, in_ch, out_ch, h, w);
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_pixel_slices_work() {
        let net = SmallNet::new(NetDescriptor::default(), 4).unwrap();
        let s = Slice::filled(1, 1, 0.5);
        let out = net.predict_slice(&s, &s, [0.1, 0.9, 0.4]).unwrap();
        assert_eq!(out.shape(), (1, 1));
    }

    #[test]
    fn parameter_count_matches_layout() {
        let d = NetDescriptor {
            hidden: vec![4, 3],
            activation: Activation::Silu,
            head: OutputHead::Epsilon,
            ..NetDescriptor::default()
        };
        // conv0: 4*2*9 + 4 + 4*3, conv1: 3*4*9 + 3 + 3*3, conv2: 1*3*9 + 1
        assert_eq!(d.parameter_count(), 88 + 120 + 28);
        let net = SmallNet::new(d, 0).unwrap();
        let total: usize = net.weight_arrays().iter().map(|(_, a)| a.len()).sum();
        assert_eq!(total, net.params().len());
    }

    #[test]
    fn rejects_empty_hidden_layer() {
        let d = NetDescriptor {
            hidden: vec![0],
            activation: Activation::Tanh,
            head: OutputHead::Epsilon,
            ..NetDescriptor::default()
        };
        assert!(SmallNet::new(d, 0).is_err());
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Tanh, Activation::Silu, Activation::Relu] {
            for z in [-2.0, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (act.apply(z + h) - act.apply(z - h)) / (2.0 * h);
                assert!((fd - act.derivative(z)).abs() < 1e-8, "{act:?} at {z}");
            }
        }
    }

    #[test]
    fn activation_codes_round_trip() {
        for act in [Activation::Tanh, Activation::Silu, Activation::Relu] {
            assert_eq!(Activation::from_code(act.code()), Some(act));
        }
        assert_eq!(Activation::from_code(9), None);
    }
}
