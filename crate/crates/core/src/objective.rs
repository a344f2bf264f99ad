//! Mirrored branches, step errors and the losses built on them.
//!
//! Given the rollout velocity `v_old` and the current prediction `v_theta`,
//! the two branches are `v± = v_old ± beta (v_theta - v_old)`. Each branch
//! induces a Gaussian transition `N(base + gain * v±, variance * I)` and the
//! step error `E±` is the squared distance of the observed next state to that
//! mean, divided by `variance`.
//!
//! All losses here come with their gradient with respect to `v_theta`, which
//! the trainer chains through the network.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::solver::affine_coefficients;

/// `ln(1 + e^z)`, exact at 64-bit over the whole real line.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirroredBranches {
    pub v_old: Vec<f64>,
    pub v_theta: Vec<f64>,
    pub beta: f64,
    pub v_plus: Vec<f64>,
    pub v_minus: Vec<f64>,
    pub delta_v: Vec<f64>,
}

/// `v+ = (1 - beta) v_old + beta v_theta`, `v- = (1 + beta) v_old - beta v_theta`.
pub fn mirror(v_old: &[f64], v_theta: &[f64], beta: f64) -> Result<MirroredBranches> {
    check_len("v_theta", v_theta.len(), v_old.len())?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Contract(format!("beta must be finite and nonnegative, got {beta}")));
    }
    let delta_v: Vec<f64> = v_old.iter().zip(v_theta).map(|(o, n)| n - o).collect();
    let v_plus = v_old.iter().zip(&delta_v).map(|(o, d)| o + beta * d).collect();
    let v_minus = v_old.iter().zip(&delta_v).map(|(o, d)| o - beta * d).collect();
    Ok(MirroredBranches {
        v_old: v_old.to_vec(),
        v_theta: v_theta.to_vec(),
        beta,
        v_plus,
        v_minus,
        delta_v,
    })
}

/// Transition whose mean is affine in the velocity: `N(base + gain * v, variance * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransition {
    pub base: Vec<f64>,
    pub gain: f64,
    pub variance: f64,
}

impl AffineTransition {
    /// One solver step from `x_t`: `base = U_t x_t`, `gain = B_t`,
    /// `variance = sigma^2 delta`.
    pub fn solver_step(x_t: &[f64], t: f64, delta: f64, sigma: f64) -> Result<Self> {
        let (u, b) = affine_coefficients(t, delta, sigma)?;
        Ok(Self::from_coefficients(x_t, u, b, sigma * sigma * delta))
    }

    pub fn from_coefficients(x_t: &[f64], u: f64, b: f64, variance: f64) -> Self {
        Self {
            base: x_t.iter().map(|x| u * x).collect(),
            gain: b,
            variance,
        }
    }

    pub fn mean(&self, v: &[f64]) -> Vec<f64> {
        self.base.iter().zip(v).map(|(b, vi)| b + self.gain * vi).collect()
    }

    /// The same mean with unit covariance: the unnormalized fallback used
    /// when the transition is deterministic.
    pub fn with_unit_covariance(mut self) -> Self {
        self.variance = 1.0;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepErrors {
    pub e_plus: f64,
    pub e_minus: f64,
    /// `e = x_next - mu_old`.
    pub residual: Vec<f64>,
    /// `d = mu+ - mu_old = beta * gain * delta_v`.
    pub displacement: Vec<f64>,
    /// Isotropic covariance scale of the transition.
    pub variance: f64,
    pub gain: f64,
    pub beta: f64,
}

impl StepErrors {
    /// `<Sigma^{-1} e, d>`.
    pub fn alignment(&self) -> f64 {
        dot(&self.residual, &self.displacement) / self.variance
    }

    /// `d E+ / d v_theta` and `d E- / d v_theta`.
    pub fn branch_gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let k = 2.0 * self.gain * self.beta / self.variance;
        let plus = self
            .residual
            .iter()
            .zip(&self.displacement)
            .map(|(e, d)| -k * (e - d))
            .collect();
        let minus = self
            .residual
            .iter()
            .zip(&self.displacement)
            .map(|(e, d)| k * (e + d))
            .collect();
        (plus, minus)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Step errors of the two branches for one solver transition `x_t -> x_next`.
pub fn step_errors(
    x_next: &[f64],
    branches: &MirroredBranches,
    x_t: &[f64],
    t: f64,
    delta: f64,
    sigma: f64,
) -> Result<StepErrors> {
    if sigma * sigma * delta == 0.0 {
        return Err(Error::DegenerateCovariance { t, sigma, delta });
    }
    check_len("x_t", x_t.len(), x_next.len())?;
    let transition = AffineTransition::solver_step(x_t, t, delta, sigma)?;
    errors_against(x_next, &transition, branches)
}

/// Step errors against an arbitrary affine-Gaussian transition.
pub fn errors_against(
    observed: &[f64],
    transition: &AffineTransition,
    branches: &MirroredBranches,
) -> Result<StepErrors> {
    check_len("observed state", observed.len(), transition.base.len())?;
    check_len("branch velocity", branches.v_old.len(), observed.len())?;
    if !(transition.variance > 0.0) {
        return Err(Error::Contract(format!(
            "transition variance must be positive, got {}",
            transition.variance
        )));
    }
    let mu_plus = transition.mean(&branches.v_plus);
    let mu_minus = transition.mean(&branches.v_minus);
    let mu_old = transition.mean(&branches.v_old);
    let residual: Vec<f64> = observed.iter().zip(&mu_old).map(|(x, m)| x - m).collect();
    let displacement: Vec<f64> = branches
        .delta_v
        .iter()
        .map(|dv| branches.beta * transition.gain * dv)
        .collect();
    Ok(StepErrors {
        e_plus: squared_distance(observed, &mu_plus) / transition.variance,
        e_minus: squared_distance(observed, &mu_minus) / transition.variance,
        residual,
        displacement,
        variance: transition.variance,
        gain: transition.gain,
        beta: branches.beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ranking: f64,
    pub trust_region: f64,
    pub total: f64,
    /// Softplus logit `z = y (E+ - E-) / 2`.
    pub logit: f64,
    pub label: f64,
}

/// `softplus(y (E+ - E-) / 2)`; the trust-region term is left at zero.
pub fn ranking_loss(errors: &StepErrors, y: f64) -> Result<LossBreakdown> {
    if !y.is_finite() {
        return Err(Error::Contract(format!("label must be finite, got {y}")));
    }
    let logit = 0.5 * y * (errors.e_plus - errors.e_minus);
    let ranking = softplus(logit);
    Ok(LossBreakdown {
        ranking,
        trust_region: 0.0,
        total: ranking,
        logit,
        label: y,
    })
}

/// Adds `lambda * ||delta_v||^2` to a ranking breakdown.
pub fn total_loss(ranking: LossBreakdown, delta_v: &[f64], lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("trust-region weight must be >= 0, got {lambda}")));
    }
    let trust_region = lambda * dot(delta_v, delta_v);
    Ok(LossBreakdown {
        trust_region,
        total: ranking.ranking + trust_region,
        ..ranking
    })
}

fn check_unit_interval(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Contract(format!("reward must lie in [0, 1], got {r}")));
    }
    Ok(())
}

/// Reward-weighted regression `r E+ + (1 - r) E-`.
pub fn wmse_loss(errors: &StepErrors, r: f64) -> Result<f64> {
    check_unit_interval(r)?;
    Ok(r * errors.e_plus + (1.0 - r) * errors.e_minus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    PositiveOnly,
    NegativeOnly,
}

/// Single-branch ablations.
///
/// * `PositiveOnly`: `r * E+`, pulling the positive branch onto successful
///   transitions and ignoring failures.
/// * `NegativeOnly`: `(1 - r) * E-`, pulling the negative branch onto failed
///   transitions (which pushes `v_theta` away from them) and ignoring successes.
pub fn single_branch_loss(errors: &StepErrors, r: f64, branch: Branch) -> Result<f64> {
    check_unit_interval(r)?;
    Ok(match branch {
        Branch::PositiveOnly => r * errors.e_plus,
        Branch::NegativeOnly => (1.0 - r) * errors.e_minus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Ranking,
    Wmse,
    PositiveOnly,
    NegativeOnly,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Ranking => "ranking",
            ObjectiveKind::Wmse => "wmse",
            ObjectiveKind::PositiveOnly => "positive_only",
            ObjectiveKind::NegativeOnly => "negative_only",
        })
    }
}

/// Loss value, its breakdown and `d loss / d v_theta` for one record.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    pub grad_v: Vec<f64>,
}

/// Evaluates the configured objective plus the trust-region term for one
/// transition with reward `r` (label `y = 2r - 1`).
pub fn evaluate(
    kind: ObjectiveKind,
    errors: &StepErrors,
    delta_v: &[f64],
    r: f64,
    lambda: f64,
) -> Result<ObjectiveValue> {
    check_unit_interval(r)?;
    let y = 2.0 * r - 1.0;
    let (d_plus, d_minus) = errors.branch_gradients();
    let ranking = ranking_loss(errors, y)?;
    let (main, mut grad_v): (f64, Vec<f64>) = match kind {
        ObjectiveKind::Ranking => {
            let w = sigmoid(ranking.logit) * 0.5 * y;
            let g = d_plus.iter().zip(&d_minus).map(|(p, m)| w * (p - m)).collect();
            (ranking.ranking, g)
        }
        ObjectiveKind::Wmse => {
            let g = d_plus
                .iter()
                .zip(&d_minus)
                .map(|(p, m)| r * p + (1.0 - r) * m)
                .collect();
            (wmse_loss(errors, r)?, g)
        }
        ObjectiveKind::PositiveOnly => (
            single_branch_loss(errors, r, Branch::PositiveOnly)?,
            d_plus.iter().map(|p| r * p).collect(),
        ),
        ObjectiveKind::NegativeOnly => (
            single_branch_loss(errors, r, Branch::NegativeOnly)?,
            d_minus.iter().map(|m| (1.0 - r) * m).collect(),
        ),
    };
    let breakdown = total_loss(ranking, delta_v, lambda)?;
    for (g, dv) in grad_v.iter_mut().zip(delta_v) {
        *g += 2.0 * lambda * dv;
    }
    Ok(ObjectiveValue {
        loss: main + breakdown.trust_region,
        breakdown,
        grad_v,
    })
}
