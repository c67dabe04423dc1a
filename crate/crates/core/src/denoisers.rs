//! Controlled denoiser functions.
//!
//! A denoiser is a time-indexed two-argument function applied entrywise,
//! differentiable (a.e.) in its first argument, with a growth certificate
//! |f(u, s)| <= c1·exp(c2·(|u|^λ + |s|^λ)), 1 <= λ < 2. Kink loci (points
//! where the derivative jumps) are declared so that finite-difference
//! checks can avoid them and the expectation engine can split integrals
//! there.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::KeyStream;
use crate::ScalarDistribution;

/// Growth certificate of Eq.-(4) form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlledBound {
    pub c1: f64,
    pub c2: f64,
    pub lambda: f64,
}

impl ControlledBound {
    pub fn new(c1: f64, c2: f64, lambda: f64) -> Result<Self> {
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "bound constants must be positive: c1={c1}, c2={c2}"
            )));
        }
        if !(1.0..2.0).contains(&lambda) {
            return Err(Error::InvalidInput(format!(
                "lambda = {lambda} outside [1, 2)"
            )));
        }
        Ok(ControlledBound { c1, c2, lambda })
    }

    /// The certified envelope c1·exp(c2·(|u|^λ + |s|^λ)).
    pub fn envelope(&self, u: f64, s: f64) -> f64 {
        self.c1 * (self.c2 * (u.abs().powf(self.lambda) + s.abs().powf(self.lambda))).exp()
    }
}

/// A time-indexed entrywise controlled function with analytic
/// first-argument derivative.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;
    fn eval(&self, t: usize, u: f64, s: f64) -> f64;
    /// ∂/∂u, with a deterministic convention at kinks.
    fn deriv(&self, t: usize, u: f64, s: f64) -> f64;
    fn bound(&self) -> ControlledBound;
    /// u-values where f(t, ·, s) is not differentiable.
    fn kinks_u(&self, _t: usize, _s: f64) -> Vec<f64> {
        Vec::new()
    }
    /// s-values where f(t, u, ·) is not smooth.
    fn kinks_s(&self, _t: usize, _u: f64) -> Vec<f64> {
        Vec::new()
    }
}

/// Distance from u to the nearest declared kink of f(t, ·, s).
pub fn kink_distance(d: &dyn Denoiser, t: usize, u: f64, s: f64) -> f64 {
    d.kinks_u(t, s)
        .into_iter()
        .filter(|k| k.is_finite())
        .map(|k| (u - k).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Entrywise evaluation over equal-length slices.
pub fn eval_vec(d: &dyn Denoiser, t: usize, u: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    apply_vec(u, s, |ui, si| d.eval(t, ui, si), d.name())
}

/// Entrywise first-argument derivative over equal-length slices.
pub fn deriv_vec(d: &dyn Denoiser, t: usize, u: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    apply_vec(u, s, |ui, si| d.deriv(t, ui, si), d.name())
}

fn apply_vec(
    u: &[f64],
    s: &[f64],
    f: impl Fn(f64, f64) -> f64,
    name: &str,
) -> Result<Vec<f64>> {
    if u.len() != s.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            u.len(),
            s.len()
        )));
    }
    let mut out = Vec::with_capacity(u.len());
    for (&ui, &si) in u.iter().zip(s) {
        let v = f(ui, si);
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "{name} produced {v} at (u={ui}, s={si})"
            )));
        }
        out.push(v);
    }
    Ok(out)
}

/// Outcome of a sampled growth-certificate check.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub pass: bool,
    /// Smallest envelope − |eval| margin observed (negative = violation).
    pub worst_margin: f64,
    pub worst_at: (f64, f64),
    pub trials: usize,
}

/// Sample (u, s) pairs from the given laws and test |eval| against the
/// denoiser's certified envelope at iteration t.
pub fn check_controlled_bound(
    d: &dyn Denoiser,
    t: usize,
    sampler_u: &ScalarDistribution,
    sampler_s: &ScalarDistribution,
    trials: usize,
    seed: u64,
) -> BoundCheck {
    let bound = d.bound();
    let mut stream = KeyStream::new(seed, 0xB0DD);
    let mut worst_margin = f64::INFINITY;
    let mut worst_at = (0.0, 0.0);
    for _ in 0..trials.max(1) {
        let u = sampler_u.quantile(stream.next_unit_open());
        let s = sampler_s.quantile(stream.next_unit_open());
        let margin = bound.envelope(u, s) - d.eval(t, u, s).abs();
        if margin < worst_margin {
            worst_margin = margin;
            worst_at = (u, s);
        }
    }
    BoundCheck {
        pass: worst_margin >= 0.0,
        worst_margin,
        worst_at,
        trials: trials.max(1),
    }
}

/// Threshold (or parameter) schedule indexed by iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Fixed { value: f64 },
    Geometric { first: f64, ratio: f64 },
    Explicit { values: Vec<f64> },
}

impl Schedule {
    /// Value at index k; explicit schedules clamp to their last entry.
    pub fn value(&self, k: usize) -> f64 {
        match self {
            Schedule::Fixed { value } => *value,
            Schedule::Geometric { first, ratio } => first * ratio.powi(k as i32),
            Schedule::Explicit { values } => {
                values[k.min(values.len().saturating_sub(1))]
            }
        }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            Schedule::Explicit { values } => Some(values.len()),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }
}

/// Soft threshold η_θ(x) = sign(x)·max(|x| − θ, 0).
#[inline]
pub fn soft_threshold(x: f64, theta: f64) -> f64 {
    if x > theta {
        x - theta
    } else if x < -theta {
        x + theta
    } else {
        0.0
    }
}

/// Derivative of η_θ; defined as 0 at the kink |x| = θ (left limit).
#[inline]
pub fn soft_threshold_deriv(x: f64, theta: f64) -> f64 {
    if x.abs() > theta {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// builtins

struct Identity;

impl Denoiser for Identity {
    fn name(&self) -> &str {
        "identity"
    }
    fn eval(&self, _t: usize, u: f64, _s: f64) -> f64 {
        u
    }
    fn deriv(&self, _t: usize, _u: f64, _s: f64) -> f64 {
        1.0
    }
    fn bound(&self) -> ControlledBound {
        ControlledBound { c1: 1.0, c2: 1.0, lambda: 1.0 }
    }
}

struct Residual;

impl Denoiser for Residual {
    fn name(&self) -> &str {
        "residual"
    }
    fn eval(&self, _t: usize, u: f64, s: f64) -> f64 {
        u - s
    }
    fn deriv(&self, _t: usize, _u: f64, _s: f64) -> f64 {
        1.0
    }
    fn bound(&self) -> ControlledBound {
        ControlledBound { c1: 2.0, c2: 1.0, lambda: 1.0 }
    }
}

struct Add;

impl Denoiser for Add {
    fn name(&self) -> &str {
        "add"
    }
    fn eval(&self, _t: usize, u: f64, s: f64) -> f64 {
        u + s
    }
    fn deriv(&self, _t: usize, _u: f64, _s: f64) -> f64 {
        1.0
    }
    fn bound(&self) -> ControlledBound {
        ControlledBound { c1: 2.0, c2: 1.0, lambda: 1.0 }
    }
}

struct Linear {
    a: f64,
}

impl Denoiser for Linear {
    fn name(&self) -> &str {
        "linear"
    }
    fn eval(&self, _t: usize, u: f64, _s: f64) -> f64 {
        self.a * u
    }
    fn deriv(&self, _t: usize, _u: f64, _s: f64) -> f64 {
        self.a
    }
    fn bound(&self) -> ControlledBound {
        ControlledBound {
            c1: self.a.abs().max(1.0),
            c2: 1.0,
            lambda: 1.0,
        }
    }
}

struct ConstantSignal;

impl Denoiser for ConstantSignal {
    fn name(&self) -> &str {
        "constant_signal"
    }
    fn eval(&self, _t: usize, _u: f64, s: f64) -> f64 {
        s
    }
    fn deriv(&self, _t: usize, _u: f64, _s: f64) -> f64 {
        0.0
    }
    fn bound(&self) -> ControlledBound {
        ControlledBound { c1: 1.0, c2: 1.0, lambda: 1.0 }
    }
}

struct SoftThreshold {
    schedule: Schedule,
}

impl Denoiser for SoftThreshold {
    fn name(&self) -> &str {
        "soft_threshold"
    }
    fn eval(&self, t: usize, u: f64, _s: f64) -> f64 {
        soft_threshold(u, self.schedule.value(t))
    }
    fn deriv(&self, t: usize, u: f64, _s: f64) -> f64 {
        soft_threshold_deriv(u, self.schedule.value(t))
    }
    fn bound(&self) -> ControlledBound {
        ControlledBound { c1: 1.0, c2: 1.0, lambda: 1.0 }
    }
    fn kinks_u(&self, t: usize, _s: f64) -> Vec<f64> {
        let th = self.schedule.value(t);
        vec![-th, th]
    }
}

/// Posterior mean E[X | X + τZ' = u] under the sparse prior
/// X ~ ε·N(0, s²) + (1−ε)·δ₀, with the likelihood ratio evaluated in the
/// log domain.
struct BgPosteriorMean {
    eps: f64,
    var: f64,
    tau2: Schedule,
}

impl BgPosteriorMean {
    fn wiener(&self, tau2: f64) -> f64 {
        self.var / (self.var + tau2)
    }

    /// log odds of the slab given observation u
    fn log_odds(&self, u: f64, tau2: f64) -> f64 {
        (self.eps / (1.0 - self.eps)).ln() + 0.5 * (tau2 / (self.var + tau2)).ln()
            + u * u * self.var / (2.0 * tau2 * (self.var + tau2))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Denoiser for BgPosteriorMean {
    fn name(&self) -> &str {
        "bg_posterior_mean"
    }
    fn eval(&self, t: usize, u: f64, _s: f64) -> f64 {
        let tau2 = self.tau2.value(t);
        if self.eps >= 1.0 {
            return self.wiener(tau2) * u;
        }
        self.wiener(tau2) * u * sigmoid(self.log_odds(u, tau2))
    }
    fn deriv(&self, t: usize, u: f64, _s: f64) -> f64 {
        let tau2 = self.tau2.value(t);
        let w = self.wiener(tau2);
        if self.eps >= 1.0 {
            return w;
        }
        let p = sigmoid(self.log_odds(u, tau2));
        let dl = u * self.var / (tau2 * (self.var + tau2));
        w * (p + u * p * (1.0 - p) * dl)
    }
    fn bound(&self) -> ControlledBound {
        // |posterior mean| <= wiener * |u| <= |u|
        ControlledBound { c1: 1.0, c2: 1.0, lambda: 1.0 }
    }
    fn kinks_u(&self, t: usize, _s: f64) -> Vec<f64> {
        // smooth, but at small tau the slab/spike sigmoid turns into a
        // near-step at log_odds = 0; hand those transition points to the
        // quadrature as panel splits
        if self.eps >= 1.0 {
            return Vec::new();
        }
        let tau2 = self.tau2.value(t);
        let base = (self.eps / (1.0 - self.eps)).ln() + 0.5 * (tau2 / (self.var + tau2)).ln();
        if base >= 0.0 {
            return Vec::new();
        }
        let u_sq = -base * 2.0 * tau2 * (self.var + tau2) / self.var;
        let u = u_sq.sqrt();
        vec![-u, u]
    }
}

/// The compressed-sensing f-side composite f_t(h, x0) = η_{θ_{t−1}}(x0 − h) − x0.
///
/// Index convention: iteration t >= 1 uses schedule entry t−1; t = 0 uses
/// `theta_init`, so evaluating at (t = 0, u = 0) reproduces the q⁰ rule.
/// The default θ_init = ∞ gives the cold start q⁰ = −x0.
struct CsSoftThresholdF {
    schedule: Schedule,
    theta_init: f64,
}

impl CsSoftThresholdF {
    fn theta(&self, t: usize) -> f64 {
        if t == 0 {
            self.theta_init
        } else {
            self.schedule.value(t - 1)
        }
    }
}

impl Denoiser for CsSoftThresholdF {
    fn name(&self) -> &str {
        "cs_soft_threshold_f"
    }
    fn eval(&self, t: usize, u: f64, s: f64) -> f64 {
        let th = self.theta(t);
        if th.is_infinite() {
            return -s;
        }
        soft_threshold(s - u, th) - s
    }
    fn deriv(&self, t: usize, u: f64, s: f64) -> f64 {
        let th = self.theta(t);
        if th.is_infinite() {
            return 0.0;
        }
        -soft_threshold_deriv(s - u, th)
    }
    fn bound(&self) -> ControlledBound {
        ControlledBound { c1: 2.0, c2: 1.0, lambda: 1.0 }
    }
    fn kinks_u(&self, t: usize, s: f64) -> Vec<f64> {
        let th = self.theta(t);
        if th.is_infinite() {
            Vec::new()
        } else {
            vec![s - th, s + th]
        }
    }
    fn kinks_s(&self, t: usize, u: f64) -> Vec<f64> {
        let th = self.theta(t);
        if th.is_infinite() {
            Vec::new()
        } else {
            vec![u - th, u + th]
        }
    }
}

// ---------------------------------------------------------------------------
// config surface

/// Serializable denoiser description; `build` turns it into a live denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    Identity,
    Residual,
    Add,
    Linear { a: f64 },
    ConstantSignal,
    SoftThreshold { schedule: Schedule },
    BgPosteriorMean {
        eps: f64,
        var: f64,
        tau2: Schedule,
    },
    CsSoftThresholdF {
        schedule: Schedule,
        /// None means θ_init = ∞ (cold start).
        #[serde(default)]
        theta_init: Option<f64>,
    },
}

impl DenoiserSpec {
    pub fn build(&self) -> Result<Arc<dyn Denoiser>> {
        Ok(match self {
            DenoiserSpec::Identity => Arc::new(Identity),
            DenoiserSpec::Residual => Arc::new(Residual),
            DenoiserSpec::Add => Arc::new(Add),
            DenoiserSpec::Linear { a } => {
                if !a.is_finite() {
                    return Err(Error::InvalidInput("linear gain must be finite".into()));
                }
                Arc::new(Linear { a: *a })
            }
            DenoiserSpec::ConstantSignal => Arc::new(ConstantSignal),
            DenoiserSpec::SoftThreshold { schedule } => Arc::new(SoftThreshold {
                schedule: schedule.clone(),
            }),
            DenoiserSpec::BgPosteriorMean { eps, var, tau2 } => {
                if !(*eps > 0.0 && *eps <= 1.0) || *var <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "bg_posterior_mean parameters: eps={eps}, var={var}"
                    )));
                }
                Arc::new(BgPosteriorMean {
                    eps: *eps,
                    var: *var,
                    tau2: tau2.clone(),
                })
            }
            DenoiserSpec::CsSoftThresholdF {
                schedule,
                theta_init,
            } => Arc::new(CsSoftThresholdF {
                schedule: schedule.clone(),
                theta_init: theta_init.unwrap_or(f64::INFINITY),
            }),
        })
    }
}

/// Build a builtin by name with JSON parameters; unknown names are
/// `Unsupported`.
pub fn builtin(name: &str, params: serde_json::Value) -> Result<Arc<dyn Denoiser>> {
    let mut obj = match params {
        serde_json::Value::Null => serde_json::Map::new(),
        serde_json::Value::Object(m) => m,
        other => {
            return Err(Error::InvalidInput(format!(
                "denoiser params must be an object, got {other}"
            )))
        }
    };
    obj.insert("type".into(), serde_json::Value::String(name.into()));
    let spec: DenoiserSpec = serde_json::from_value(serde_json::Value::Object(obj))
        .map_err(|e| Error::Unsupported(format!("denoiser {name}: {e}")))?;
    spec.build()
}
