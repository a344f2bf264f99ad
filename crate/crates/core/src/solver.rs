//! Discretized flow samplers.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (action). One solver step goes
//! from `t` to `t - delta`. The deterministic Euler update is
//! `x' = x - v * delta`. The stochastic Euler–Maruyama update is
//!
//! ```text
//! x' = x - delta * [v + sigma^2 / (2t) * (x + (1 - t) v)] + sigma * sqrt(delta) * eps
//! ```
//!
//! whose mean is affine in the velocity: `mu = U x + B v` with
//! `U = 1 - sigma^2 delta / (2t)` and `B = -delta - (1 - t) sigma^2 delta / (2t)`,
//! and whose covariance is `sigma^2 delta I`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::policy::VelocityField;
use crate::rng::NoiseSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ode,
    Sde,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Ode => "ode",
            SamplerMode::Sde => "sde",
        })
    }
}

/// Time grid `1 = t_0 > t_1 > ... > t_K = 0` plus one noise level per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSchedule {
    times: Vec<f64>,
    noise_levels: Vec<f64>,
}

impl SolverSchedule {
    pub fn new(times: Vec<f64>, noise_levels: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::config("schedule.times", "need at least two time points"));
        }
        if times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(Error::config("schedule.times", "must start at 1 and end at 0"));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::config("schedule.times", "must be strictly decreasing"));
        }
        if noise_levels.len() != times.len() - 1 {
            return Err(Error::config(
                "schedule.noise_levels",
                format!("expected {} levels, got {}", times.len() - 1, noise_levels.len()),
            ));
        }
        if noise_levels.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("schedule.noise_levels", "must be finite and nonnegative"));
        }
        Ok(Self { times, noise_levels })
    }

    /// Uniform grid with `delta = 1/K` and constant noise level `sigma` on
    /// every step. When `final_step_noise` is false the last step (into
    /// `t = 0`) gets `sigma = 0`, making it a plain Euler step.
    pub fn uniform(k: usize, sigma: f64, final_step_noise: bool) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("k", "need at least one solver step"));
        }
        let mut times: Vec<f64> = (0..=k).map(|j| 1.0 - j as f64 / k as f64).collect();
        times[k] = 0.0;
        let mut noise = vec![sigma; k];
        if !final_step_noise {
            noise[k - 1] = 0.0;
        }
        Self::new(times, noise)
    }

    pub fn steps(&self) -> usize {
        self.noise_levels.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn noise_levels(&self) -> &[f64] {
        &self.noise_levels
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    pub fn delta(&self, j: usize) -> f64 {
        self.times[j] - self.times[j + 1]
    }

    pub fn sigma(&self, j: usize) -> f64 {
        self.noise_levels[j]
    }

    /// Same grid with every noise level zeroed.
    pub fn deterministic(&self) -> Self {
        Self {
            times: self.times.clone(),
            noise_levels: vec![0.0; self.noise_levels.len()],
        }
    }
}

/// `(U_t, B_t)` of the affine one-step mean `mu = U_t x + B_t v`.
pub fn affine_coefficients(t: f64, delta: f64, sigma: f64) -> Result<(f64, f64)> {
    check_step_domain(t, delta, sigma)?;
    let correction = sigma * sigma * delta / (2.0 * t);
    Ok((1.0 - correction, -delta - (1.0 - t) * correction))
}

/// Weights `(w0, w1)` of the mean written as a mix of the two rectified-flow
/// endpoint predictions `x - t v` and `x + (1 - t) v`. An independent route to
/// the affine coefficients: `U = w0 + w1`, `B = -t w0 + (1 - t) w1`.
pub fn endpoint_weights(t: f64, delta: f64, sigma: f64) -> Result<(f64, f64)> {
    check_step_domain(t, delta, sigma)?;
    let w0 = 1.0 - t + delta;
    let w1 = (t - delta) - sigma * sigma * delta / (2.0 * t);
    Ok((w0, w1))
}

fn check_step_domain(t: f64, delta: f64, sigma: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("solver time must be in (0, 1], got {t}")));
    }
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::Domain(format!("step size must be positive, got {delta}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise level must be nonnegative, got {sigma}")));
    }
    Ok(())
}

/// Deterministic Euler step `x - v * delta`.
pub fn ode_step(x: &[f64], v: &[f64], delta: f64) -> Result<Vec<f64>> {
    check_len("velocity", v.len(), x.len())?;
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {delta}")));
    }
    Ok(x.iter().zip(v).map(|(xi, vi)| xi - vi * delta).collect())
}

/// Gaussian one-step transition `N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStep {
    pub mean: Vec<f64>,
    /// Isotropic covariance scale `sigma^2 * delta`.
    pub variance: f64,
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
}

/// One Euler–Maruyama step with caller-supplied noise `eps`.
///
/// The next state is computed through the affine mean so that the recorded
/// transition and the objective's mean agree exactly.
pub fn sde_step(
    x: &[f64],
    v: &[f64],
    t: f64,
    delta: f64,
    sigma: f64,
    eps: &[f64],
) -> Result<(Vec<f64>, GaussianStep)> {
    check_len("velocity", v.len(), x.len())?;
    check_len("noise", eps.len(), x.len())?;
    let (u, b) = affine_coefficients(t, delta, sigma)?;
    let scale = sigma * delta.sqrt();
    let mean: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| u * xi + b * vi).collect();
    let next = mean.iter().zip(eps).map(|(m, e)| m + scale * e).collect();
    Ok((
        next,
        GaussianStep {
            mean,
            variance: sigma * sigma * delta,
            t,
            delta,
            sigma,
        },
    ))
}

/// Euler–Maruyama step evaluated term by term in its drift form, without the
/// affine rewrite. Kept as a second route for consistency checks.
pub fn sde_step_direct(x: &[f64], v: &[f64], t: f64, delta: f64, sigma: f64, eps: &[f64]) -> Vec<f64> {
    let corr = sigma * sigma / (2.0 * t);
    let scale = sigma * delta.sqrt();
    x.iter()
        .zip(v)
        .zip(eps)
        .map(|((xi, vi), ei)| xi + (vi + corr * (xi + (1.0 - t) * vi)) * (-delta) + scale * ei)
        .collect()
}

/// A full sampler run: `K + 1` states, `K` velocities and `K` noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerChain {
    pub mode: SamplerMode,
    pub states: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
}

impl SamplerChain {
    /// The terminal sample `x_{t_K}`, i.e. the action.
    pub fn terminal(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Runs the sampler from `x1` using `field` for the velocities.
///
/// In SDE mode one standard-normal vector is drawn per step (also on steps
/// whose noise level is zero, so stream positions do not depend on the
/// schedule). ODE mode draws nothing and records zero noise.
/// Anything that can be integrated by the samplers.
pub trait Velocity {
    fn state_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, context: &[f64], observation: &[f64]) -> Result<Vec<f64>>;
}

impl Velocity for VelocityField {
    fn state_dim(&self) -> usize {
        self.architecture().state_dim
    }

    fn velocity(&self, x: &[f64], t: f64, context: &[f64], observation: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, t, context, observation)
    }
}

/// Exact velocity of the linear interpolation `x_t = t x1 + (1 - t) x0`
/// between `x1 ~ N(0, I)` and data `x0 ~ N(mean, diag(std^2))`:
///
/// `v(x, t) = -m + (t - (1 - t) s^2) / (t^2 + (1 - t)^2 s^2) * (x - (1 - t) m)`
/// per coordinate. Both samplers should land on `N(mean, diag(std^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianFlow {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Velocity for LinearGaussianFlow {
    fn state_dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity(&self, x: &[f64], t: f64, _context: &[f64], _observation: &[f64]) -> Result<Vec<f64>> {
        check_len("state", x.len(), self.mean.len())?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(xi, (m, s))| {
                let s2 = s * s;
                let var = t * t + (1.0 - t) * (1.0 - t) * s2;
                -m + (t - (1.0 - t) * s2) / var * (xi - (1.0 - t) * m)
            })
            .collect())
    }
}

pub fn run_chain(
    field: &dyn Velocity,
    schedule: &SolverSchedule,
    x1: &[f64],
    context: &[f64],
    observation: &[f64],
    noise: &mut dyn NoiseSource,
    mode: SamplerMode,
) -> Result<SamplerChain> {
    let dim = field.state_dim();
    check_len("initial state", x1.len(), dim)?;
    let k = schedule.steps();
    let mut states = Vec::with_capacity(k + 1);
    let mut velocities = Vec::with_capacity(k);
    let mut noises = Vec::with_capacity(k);
    states.push(x1.to_vec());
    let mut eps = vec![0.0; dim];
    for j in 0..k {
        let x = &states[j];
        let t = schedule.time(j);
        let v = field.velocity(x, t, context, observation)?;
        let next = match mode {
            SamplerMode::Ode => {
                eps.fill(0.0);
                ode_step(x, &v, schedule.delta(j))?
            }
            SamplerMode::Sde => {
                noise.fill_standard_normal(&mut eps);
                sde_step(x, &v, t, schedule.delta(j), schedule.sigma(j), &eps)?.0
            }
        };
        velocities.push(v);
        noises.push(eps.clone());
        states.push(next);
    }
    Ok(SamplerChain {
        mode,
        states,
        velocities,
        noises,
    })
}

/// Rebuilds the states of a chain from its recorded velocities and noise.
pub fn replay_chain(
    schedule: &SolverSchedule,
    x1: &[f64],
    velocities: &[Vec<f64>],
    noises: &[Vec<f64>],
    mode: SamplerMode,
) -> Result<Vec<Vec<f64>>> {
    check_len("recorded velocities", velocities.len(), schedule.steps())?;
    check_len("recorded noise", noises.len(), schedule.steps())?;
    let mut states = vec![x1.to_vec()];
    for j in 0..schedule.steps() {
        let x = &states[j];
        let next = match mode {
            SamplerMode::Ode => ode_step(x, &velocities[j], schedule.delta(j))?,
            SamplerMode::Sde => {
                sde_step(
                    x,
                    &velocities[j],
                    schedule.time(j),
                    schedule.delta(j),
                    schedule.sigma(j),
                    &noises[j],
                )?
                .0
            }
        };
        states.push(next);
    }
    Ok(states)
}

/// Line-oriented text dump of a chain.
///
/// ```text
/// # stepnft-chain v1
/// # mode=sde seed=0 k=4
/// # times=1 0.75 0.5 0.25 0
/// # sigmas=0.2 0.2 0.2 0
/// <j> <x_0> <x_1> ...        one line per state, j = 0..=K
/// ```
/// Floats are written in Rust's shortest round-trip form.
pub fn write_chain_dump(chain: &SamplerChain, schedule: &SolverSchedule, seed: u64) -> String {
    let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    let _ = writeln!(out, "# stepnft-chain v1");
    let _ = writeln!(out, "# mode={} seed={seed} k={}", chain.mode, schedule.steps());
    let _ = writeln!(out, "# times={}", join(schedule.times()));
    let _ = writeln!(out, "# sigmas={}", join(schedule.noise_levels()));
    for (j, s) in chain.states.iter().enumerate() {
        let _ = writeln!(out, "{j} {}", join(s));
    }
    out
}

/// Parses the states back out of a chain dump.
pub fn read_chain_dump(text: &str) -> Result<(SolverSchedule, Vec<Vec<f64>>)> {
    let bad = |m: String| Error::Format {
        what: "chain dump",
        message: m,
    };
    let parse_list = |s: &str| -> Result<Vec<f64>> {
        s.split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|e| bad(format!("bad float {x:?}: {e}"))))
            .collect()
    };
    let mut times = None;
    let mut sigmas = None;
    let mut states = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# times=") {
            times = Some(parse_list(rest)?);
        } else if let Some(rest) = line.strip_prefix("# sigmas=") {
            sigmas = Some(parse_list(rest)?);
        } else if line.starts_with('#') || line.trim().is_empty() {
            continue;
        } else {
            let (idx, values) = line.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            let idx: usize = idx.parse().map_err(|_| bad(format!("bad index in {line:?}")))?;
            if idx != states.len() {
                return Err(bad(format!("state index {idx} out of order")));
            }
            states.push(parse_list(values)?);
        }
    }
    let schedule = SolverSchedule::new(
        times.ok_or_else(|| bad("missing times header".into()))?,
        sigmas.ok_or_else(|| bad("missing sigmas header".into()))?,
    )?;
    Ok((schedule, states))
}
