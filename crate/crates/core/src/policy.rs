//! Velocity-field approximator `v_theta(x_t, t, context, observation)`.
//!
//! A plain MLP: the input is the concatenation `[x, t, context, observation]`
//! with `t` as a raw scalar, hidden layers use the configured activation and
//! the output layer is linear. Parameters live in one flat vector so that
//! optimizers, EMA and checkpoints can treat them uniformly.
//!
//! Flat layout, layer by layer: the `fan_in * fan_out` weights stored
//! input-major (`w[i * fan_out + o]` connects input `i` to output `o`),
//! followed by the `fan_out` biases.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a = f(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub state_dim: usize,
    pub context_dim: usize,
    pub observation_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(
        state_dim: usize,
        context_dim: usize,
        observation_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
    ) -> Result<Self> {
        let arch = Self {
            state_dim,
            context_dim,
            observation_dim,
            hidden,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Builds an architecture from a full width list `[input, hidden.., output]`.
    /// Inputs beyond `x` and `t` are all treated as context.
    pub fn from_widths(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("widths", "need at least input and output widths"));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::config(
                format!("widths[{pos}]"),
                "layer widths must be at least 1",
            ));
        }
        let input = widths[0];
        let state_dim = *widths.last().unwrap();
        if input < state_dim + 1 {
            return Err(Error::config(
                "widths[0]",
                format!("input width {input} cannot hold state ({state_dim}) plus time"),
            ));
        }
        Self::new(
            state_dim,
            input - state_dim - 1,
            0,
            widths[1..widths.len() - 1].to_vec(),
            activation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("state_dim", "must be at least 1"));
        }
        if let Some(pos) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::config(
                format!("hidden[{pos}]"),
                "layer widths must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + 1 + self.context_dim + self.observation_dim
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim());
        w.extend_from_slice(&self.hidden);
        w.push(self.state_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Scalar loss defined on the field output.
///
/// Implementations return the loss value and its gradient with respect to the
/// output vector; [`VelocityField::backward`] chains that through the network.
pub trait ScalarLoss {
    fn value_and_grad(&self, output: &[f64]) -> (f64, Vec<f64>);
}

impl<F> ScalarLoss for F
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn value_and_grad(&self, output: &[f64]) -> (f64, Vec<f64>) {
        self(output)
    }
}

/// `0.5 * ||v||^2`.
#[derive(Debug, Clone, Copy)]
pub struct HalfSquaredNorm;

impl ScalarLoss for HalfSquaredNorm {
    fn value_and_grad(&self, output: &[f64]) -> (f64, Vec<f64>) {
        let value = 0.5 * output.iter().map(|v| v * v).sum::<f64>();
        (value, output.to_vec())
    }
}

/// `sum_i v_i`.
#[derive(Debug, Clone, Copy)]
pub struct SumOfOutputs;

impl ScalarLoss for SumOfOutputs {
    fn value_and_grad(&self, output: &[f64]) -> (f64, Vec<f64>) {
        (output.iter().sum(), vec![1.0; output.len()])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantLoss(pub f64);

impl ScalarLoss for ConstantLoss {
    fn value_and_grad(&self, output: &[f64]) -> (f64, Vec<f64>) {
        (self.0, vec![0.0; output.len()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Activations recorded by a forward pass: `acts[0]` is the input,
/// `acts[l + 1]` the output of layer `l`.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    arch: Architecture,
    params: Vec<f64>,
}

impl VelocityField {
    /// Seeded init: every weight and bias of a layer is drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` using the keyed stream `(INIT, seed)`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::keyed_rng(&[tag::INIT, seed]);
        let mut params = Vec::with_capacity(arch.param_count());
        for pair in arch.widths().windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.random_range(-bound..=bound));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Self {
            arch,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_len("parameter vector", params.len(), arch.param_count())?;
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Concatenates `[x, t, context, observation]` after checking shapes.
    pub fn assemble_input(
        &self,
        x: &[f64],
        t: f64,
        context: &[f64],
        observation: &[f64],
    ) -> Result<Vec<f64>> {
        check_len("state x", x.len(), self.arch.state_dim)?;
        check_len("context", context.len(), self.arch.context_dim)?;
        check_len("observation", observation.len(), self.arch.observation_dim)?;
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x);
        input.push(t);
        input.extend_from_slice(context);
        input.extend_from_slice(observation);
        Ok(input)
    }

    pub fn forward(&self, x: &[f64], t: f64, context: &[f64], observation: &[f64]) -> Result<Vec<f64>> {
        let input = self.assemble_input(x, t, context, observation)?;
        let mut trace = Trace::default();
        self.forward_traced_into(&input, &mut trace);
        Ok(trace.acts.pop().unwrap_or_default())
    }

    /// Forward pass on an already assembled input, keeping activations for
    /// a later [`accumulate_vjp`](Self::accumulate_vjp).
    pub fn forward_traced(&self, input: &[f64]) -> Trace {
        let mut trace = Trace::default();
        self.forward_traced_into(input, &mut trace);
        trace
    }

    /// Like [`forward_traced`](Self::forward_traced) but reuses `trace` buffers.
    pub fn forward_traced_into(&self, input: &[f64], trace: &mut Trace) {
        debug_assert_eq!(input.len(), self.arch.input_dim());
        let widths = self.arch.widths();
        let n_layers = widths.len() - 1;
        trace.acts.resize_with(widths.len(), Vec::new);
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);

        let mut offset = 0;
        for layer in 0..n_layers {
            let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;

            let (lower, upper) = trace.acts.split_at_mut(layer + 1);
            let a_in = &lower[layer];
            let out = &mut upper[0];
            out.clear();
            out.extend_from_slice(b);
            for (i, &xi) in a_in.iter().enumerate() {
                let row = &w[i * fan_out..(i + 1) * fan_out];
                for (o, &wio) in out.iter_mut().zip(row) {
                    *o += xi * wio;
                }
            }
            if layer + 1 < n_layers {
                let act = self.arch.activation;
                for o in out.iter_mut() {
                    *o = act.apply(*o);
                }
            }
        }
    }

    /// Adds `scale * (d output / d params)^T grad_output` into `grad`.
    ///
    /// This is the reverse sweep of the network: one vector-Jacobian product.
    pub fn accumulate_vjp(&self, trace: &Trace, grad_output: &[f64], scale: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let widths = self.arch.widths();
        let n_layers = widths.len() - 1;
        let mut g: Vec<f64> = grad_output.iter().map(|v| v * scale).collect();
        let mut g_in = Vec::new();
        let mut offset = self.params.len();
        for layer in (0..n_layers).rev() {
            let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
            offset -= fan_in * fan_out + fan_out;
            let w = &self.params[offset..offset + fan_in * fan_out];
            let (gw, gb) = grad[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            let a_in = &trace.acts[layer];

            for (gbo, &go) in gb.iter_mut().zip(&g) {
                *gbo += go;
            }
            for (i, &xi) in a_in.iter().enumerate() {
                let row = &mut gw[i * fan_out..(i + 1) * fan_out];
                for (gwo, &go) in row.iter_mut().zip(&g) {
                    *gwo += xi * go;
                }
            }
            if layer == 0 {
                break;
            }
            g_in.clear();
            let act = self.arch.activation;
            for (i, &ai) in a_in.iter().enumerate() {
                let row = &w[i * fan_out..(i + 1) * fan_out];
                let dot: f64 = row.iter().zip(&g).map(|(a, b)| a * b).sum();
                g_in.push(dot * act.derivative_from_output(ai));
            }
            std::mem::swap(&mut g, &mut g_in);
        }
    }

    /// Gradient of a scalar loss of the output with respect to every parameter.
    pub fn backward(
        &self,
        x: &[f64],
        t: f64,
        context: &[f64],
        observation: &[f64],
        loss: &dyn ScalarLoss,
    ) -> Result<GradientTape> {
        let input = self.assemble_input(x, t, context, observation)?;
        let trace = self.forward_traced(&input);
        let (value, grad_out) = loss.value_and_grad(trace.output());
        if grad_out.len() != self.arch.state_dim {
            return Err(Error::Contract(format!(
                "loss must be scalar in the field output: output gradient has length {}, output has {}",
                grad_out.len(),
                self.arch.state_dim
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_vjp(&trace, &grad_out, 1.0, &mut grad);
        Ok(GradientTape { loss: value, grad })
    }

    /// Directional derivative of the output along an input perturbation
    /// (forward-mode through the same weights). Used for input-sensitivity
    /// tests and diagnostics.
    pub fn input_jvp(&self, input: &[f64], direction: &[f64]) -> Vec<f64> {
        let trace = self.forward_traced(input);
        let widths = self.arch.widths();
        let n_layers = widths.len() - 1;
        let mut dir = direction.to_vec();
        let mut offset = 0;
        for layer in 0..n_layers {
            let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut next = vec![0.0; fan_out];
            for (i, &di) in dir.iter().enumerate() {
                for (n, &wio) in next.iter_mut().zip(&w[i * fan_out..(i + 1) * fan_out]) {
                    *n += di * wio;
                }
            }
            if layer + 1 < n_layers {
                for (n, &a) in next.iter_mut().zip(&trace.acts[layer + 1]) {
                    *n *= self.arch.activation.derivative_from_output(a);
                }
            }
            dir = next;
        }
        dir
    }

    /// Zeroes the weights and bias of the output layer.
    pub fn zero_output_layer(&mut self) {
        let widths = self.arch.widths();
        let (fan_in, fan_out) = (widths[widths.len() - 2], widths[widths.len() - 1]);
        let n = self.params.len();
        self.params[n - fan_in * fan_out - fan_out..].fill(0.0);
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SNFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint, all integers and floats little-endian:
///
/// ```text
/// magic      8 bytes  "SNFTCKPT"
/// version    u32      currently 1
/// state_dim, context_dim, observation_dim   u32 each
/// activation u8       0 = tanh, 1 = relu, 2 = identity
/// n_hidden   u32, then n_hidden widths as u32
/// n_params   u64, then n_params f64 values
/// ```
impl VelocityField {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [self.arch.state_dim, self.arch.context_dim, self.arch.observation_dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.arch.activation.code());
        out.extend_from_slice(&(self.arch.hidden.len() as u32).to_le_bytes());
        for &h in &self.arch.hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let state_dim = r.u32()? as usize;
        let context_dim = r.u32()? as usize;
        let observation_dim = r.u32()? as usize;
        let activation =
            Activation::from_code(r.take(1)?[0]).ok_or_else(|| corrupt("unknown activation code"))?;
        let n_hidden = r.u32()? as usize;
        let hidden = (0..n_hidden).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let arch = Architecture::new(state_dim, context_dim, observation_dim, hidden, activation)?;
        let n_params = r.u64()? as usize;
        if n_params != arch.param_count() {
            return Err(corrupt(format!(
                "parameter count {n_params} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let params = (0..n_params).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Self::from_params(arch, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

fn corrupt(message: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        message: message.into(),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn arch(widths: &[usize]) -> Architecture {
        Architecture::from_widths(widths, Activation::Tanh).unwrap()
    }

    fn central_difference(field: &VelocityField, input: &[f64], loss: &dyn ScalarLoss) -> Vec<f64> {
        let mut probe = field.clone();
        (0..field.num_params())
            .map(|k| {
                let p = field.params[k];
                let h = 1e-5 * p.abs().max(1.0);
                probe.params[k] = p + h;
                let up = loss.value_and_grad(probe.forward_traced(input).output()).0;
                probe.params[k] = p - h;
                let down = loss.value_and_grad(probe.forward_traced(input).output()).0;
                probe.params[k] = p;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = VelocityField::init(arch(&[4, 8, 2]), 0).unwrap();
        let b = VelocityField::init(arch(&[4, 8, 2]), 0).unwrap();
        let c = VelocityField::init(arch(&[4, 8, 2]), 1).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.num_params(), 4 * 8 + 8 + 8 * 2 + 2);
    }

    #[test]
    fn zero_width_is_config_error() {
        let err = Architecture::from_widths(&[4, 0, 2], Activation::Tanh).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let field = VelocityField::init(arch(&[5, 16, 3]), 3).unwrap();
        let first = 5 * 16 + 16;
        assert!(field.params[..first].iter().all(|p| p.abs() <= 1.0 / 5f64.sqrt()));
        assert!(field.params[first..].iter().all(|p| p.abs() <= 0.25));
    }

    #[test]
    fn zeroed_field_outputs_zero() {
        let field = VelocityField::zeros(arch(&[5, 8, 8, 2])).unwrap();
        let v = field.forward(&[0.3, -1.0], 0.5, &[2.0, 7.0], &[]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);

        let mut field = VelocityField::init(arch(&[5, 8, 2]), 9).unwrap();
        field.zero_output_layer();
        let v = field.forward(&[0.3, -1.0], 0.5, &[2.0, 7.0], &[]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shapes() {
        let field = VelocityField::init(arch(&[5, 8, 2]), 2).unwrap();
        let a = field.forward(&[0.1, 0.2], 0.7, &[1.0, -1.0], &[]).unwrap();
        let b = field.forward(&[0.1, 0.2], 0.7, &[1.0, -1.0], &[]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            field.forward(&[0.1], 0.7, &[1.0, -1.0], &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn input_perturbation_matches_directional_derivative() {
        let field = VelocityField::init(arch(&[6, 16, 16, 3]), 4).unwrap();
        let input = vec![0.2, -0.4, 0.9, 0.5, -0.3, 0.1];
        let delta = 1e-6;
        for coord in 0..input.len() {
            let mut dir = vec![0.0; input.len()];
            dir[coord] = 1.0;
            let jvp = field.input_jvp(&input, &dir);
            let mut plus = input.clone();
            plus[coord] += delta;
            let mut minus = input.clone();
            minus[coord] -= delta;
            let up = field.forward_traced(&plus);
            let down = field.forward_traced(&minus);
            for o in 0..3 {
                let fd = (up.output()[o] - down.output()[o]) / (2.0 * delta);
                let rel = (fd - jvp[o]).abs() / jvp[o].abs().max(1e-3);
                assert!(rel < 1e-3, "coord {coord} out {o}: fd {fd} jvp {}", jvp[o]);
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let field = VelocityField::init(arch(&[5, 8, 2]), 5).unwrap();
        let tape = field
            .backward(&[0.1, 0.2], 0.3, &[0.4, 0.5], &[], &ConstantLoss(3.0))
            .unwrap();
        assert_eq!(tape.loss, 3.0);
        assert_eq!(tape.grad.len(), field.num_params());
        assert!(tape.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn half_squared_norm_gradient_matches_finite_differences() {
        let field = VelocityField::init(arch(&[6, 12, 12, 3]), 6).unwrap();
        let input = field.assemble_input(&[0.3, -0.2, 0.8], 0.6, &[0.5, -0.7], &[]).unwrap();
        let tape = field
            .backward(&[0.3, -0.2, 0.8], 0.6, &[0.5, -0.7], &[], &HalfSquaredNorm)
            .unwrap();
        let fd = central_difference(&field, &input, &HalfSquaredNorm);
        for (k, (a, n)) in tape.grad.iter().zip(&fd).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn linear_layer_weight_gradient_is_the_input() {
        let arch = Architecture::new(2, 1, 0, vec![], Activation::Identity).unwrap();
        let field = VelocityField::init(arch, 8).unwrap();
        let (x, t, c) = ([0.25, -1.5], 0.75, [2.0]);
        let tape = field.backward(&x, t, &c, &[], &SumOfOutputs).unwrap();
        let input = [x[0], x[1], t, c[0]];
        for (i, xi) in input.iter().enumerate() {
            for o in 0..2 {
                assert_eq!(tape.grad[i * 2 + o], *xi);
            }
        }
        assert_eq!(&tape.grad[8..], &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let field = VelocityField::init(arch(&[5, 8, 2]), 5).unwrap();
        let bad = |out: &[f64]| (0.0, vec![0.0; out.len() + 1]);
        assert!(matches!(
            field.backward(&[0.1, 0.2], 0.3, &[0.4, 0.5], &[], &bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let arch = Architecture::new(3, 2, 4, vec![7, 5], Activation::Relu).unwrap();
        let field = VelocityField::init(arch, 11).unwrap();
        let bytes = field.to_checkpoint_bytes();
        let back = VelocityField::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(field, back);
        let input: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        assert_eq!(
            field.forward_traced(&input).output(),
            back.forward_traced(&input).output()
        );
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let field = VelocityField::init(arch(&[5, 4, 2]), 1).unwrap();
        let mut bytes = field.to_checkpoint_bytes();
        assert!(VelocityField::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(VelocityField::from_checkpoint_bytes(&bytes).is_err());
    }

    #[test]
    fn gradient_check_over_random_instances() {
        let mut rng = rng::keyed_rng(&[99]);
        for trial in 0..20 {
            let hidden = rng.random_range(1..10);
            let a = Architecture::new(2, 1, 1, vec![hidden, 6], Activation::Tanh).unwrap();
            let field = VelocityField::init(a, trial).unwrap();
            let input: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = move |out: &[f64]| {
                let diff: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
                (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
            };
            let trace = field.forward_traced(&input);
            let mut grad = vec![0.0; field.num_params()];
            field.accumulate_vjp(&trace, &loss(trace.output()).1, 1.0, &mut grad);
            let fd = central_difference(&field, &input, &loss);
            for (g, n) in grad.iter().zip(&fd) {
                assert!((g - n).abs() / g.abs().max(n.abs()).max(1e-6) < 1e-4);
            }
        }
    }
}
