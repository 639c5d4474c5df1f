//! Server-side aggregation and optimizer steps.

use serde::{Deserialize, Serialize};

use crate::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerHyper {
    pub eta_g: f64,
    /// FedAvgM momentum.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    /// Diagnostic: pin FedEve's Kalman gain to a constant.
    pub force_gain: Option<f64>,
    /// FedEve broadcasts the momentum lookahead `w − eta_g·M` instead of `w`.
    pub broadcast_prediction: bool,
}

impl Default for ServerHyper {
    fn default() -> Self {
        ServerHyper {
            eta_g: 1.0,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            force_gain: None,
            broadcast_prediction: true,
        }
    }
}

impl ServerHyper {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let in_unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.eta_g > 0.0 && self.eta_g.is_finite()) {
            return Err(("eta_g", "must be finite and > 0".into()));
        }
        if !in_unit(self.beta) {
            return Err(("beta", "must be in [0, 1)".into()));
        }
        if !in_unit(self.beta1) {
            return Err(("beta1", "must be in [0, 1)".into()));
        }
        if !in_unit(self.beta2) {
            return Err(("beta2", "must be in [0, 1)".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(("tau", "must be finite and > 0".into()));
        }
        if let Some(g) = self.force_gain {
            if !(0.0..=1.0).contains(&g) {
                return Err(("force_gain", "must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Weighted mean of the client deltas with `p_k = n_k / Σ_{j∈S} n_j`,
/// accumulated in ascending client id order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let first = ordered
        .first()
        .ok_or_else(|| Error::invalid("no client updates to aggregate"))?;
    let dim = first.delta.len();
    let total: usize = ordered.iter().map(|u| u.n_k).sum();
    if total == 0 {
        return Err(Error::invalid("client updates carry no samples"));
    }
    let mut acc = ParamVector::zeros(dim);
    for (i, u) in ordered.iter().enumerate() {
        u.delta.check_dim(dim)?;
        let p = u.n_k as f64 / total as f64;
        if i == 0 {
            acc = u.delta.scaled(p);
        } else {
            acc.axpy(p, &u.delta);
        }
    }
    Ok(acc)
}

/// `w − eta_g·Δ`
pub fn fedavg_step(w: &ParamVector, delta: &ParamVector, eta_g: f64) -> ParamVector {
    w.sub_scaled(eta_g, delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub w: ParamVector,
    pub momentum: ParamVector,
}

impl MomentumState {
    pub fn new(w: ParamVector) -> Self {
        let momentum = ParamVector::zeros(w.len());
        MomentumState { w, momentum }
    }
}

/// FedAvgM: `M' = beta·M + Δ`, `w' = w − eta_g·M'`.
pub fn fedavgm_step(state: &MomentumState, delta: &ParamVector, beta: f64, eta_g: f64) -> MomentumState {
    let momentum: ParamVector = state
        .momentum
        .iter()
        .zip(delta.iter())
        .map(|(m, d)| beta * m + d)
        .collect::<Vec<_>>()
        .into();
    MomentumState {
        w: state.w.sub_scaled(eta_g, &momentum),
        momentum,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub w: ParamVector,
    pub m: ParamVector,
    pub v: ParamVector,
}

impl AdamState {
    pub fn new(w: ParamVector) -> Self {
        let d = w.len();
        AdamState {
            w,
            m: ParamVector::zeros(d),
            v: ParamVector::zeros(d),
        }
    }
}

/// FedOpt with a server Adam (no bias correction):
/// `m' = β1 m + (1−β1)Δ`, `v' = β2 v + (1−β2)Δ²`, `w' = w − eta_g·m'/(√v' + tau)`.
pub fn fedopt_adam_step(
    state: &AdamState,
    delta: &ParamVector,
    beta1: f64,
    beta2: f64,
    tau: f64,
    eta_g: f64,
) -> AdamState {
    let d = delta.len();
    let mut next = AdamState {
        w: state.w.clone(),
        m: ParamVector::zeros(d),
        v: ParamVector::zeros(d),
    };
    for i in 0..d {
        let m = beta1 * state.m[i] + (1.0 - beta1) * delta[i];
        let v = beta2 * state.v[i] + (1.0 - beta2) * delta[i] * delta[i];
        next.m[i] = m;
        next.v[i] = v;
        next.w[i] -= eta_g * m / (v.sqrt() + tau);
    }
    next
}

/// Estimated variances of period drift (`sigma_q2`) and client drift (`sigma_r2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftEstimates {
    pub sigma_q2: f64,
    pub sigma_r2: f64,
}

/// Scalar drift variances shared by all coordinates:
///
/// `σ_Q² = Σ_i (M_i − Δ̃_i)² / (|S|·d)` and
/// `σ_R² = Σ_k Σ_i (Δ_k,i − Δ̃_i)² / (|S|²·d)`,
///
/// with the raw (unweighted) client deltas `Δ_k` measured against the
/// weighted aggregate `Δ̃`.
pub fn estimate_drift_variances(
    momentum: &ParamVector,
    updates: &[ClientUpdate],
    aggregate: &ParamVector,
) -> Result<DriftEstimates> {
    if updates.is_empty() {
        return Err(Error::invalid("need at least one client update"));
    }
    let d = aggregate.len();
    momentum.check_dim(d)?;
    let s = updates.len() as f64;
    let sigma_q2 = momentum.dist_sq(aggregate) / (s * d as f64);
    let mut spread = 0.0;
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    for u in ordered {
        u.delta.check_dim(d)?;
        spread += u.delta.dist_sq(aggregate);
    }
    let sigma_r2 = spread / (s * s * d as f64);
    Ok(DriftEstimates { sigma_q2, sigma_r2 })
}

fn check_variance(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")))
    }
}

/// `G = σ̂² / (σ̂² + σ_R²)`; `0/0` is taken as 1 (trust the observation).
pub fn kalman_gain(sigma_hat2: f64, sigma_r2: f64) -> Result<f64> {
    check_variance("predicted variance", sigma_hat2)?;
    check_variance("observation variance", sigma_r2)?;
    let total = sigma_hat2 + sigma_r2;
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(sigma_hat2 / total)
}

/// Variance of the product of two Gaussians, `s1·s2 / (s1 + s2)`. This is
/// also the filter's posterior variance `(1 − G)·s1`, evaluated without the
/// cancellation in `1 − G` when the gain is close to one.
pub fn fused_variance(s1: f64, s2: f64) -> Result<f64> {
    check_variance("variance", s1)?;
    check_variance("variance", s2)?;
    let total = s1 + s2;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(s1 * s2 / total)
}

/// Fuses `N(mu1, s1)` and `N(mu2, s2)` into the normalised product density.
pub fn fuse_gaussians(mu1: f64, s1: f64, mu2: f64, s2: f64) -> Result<(f64, f64)> {
    check_variance("s1", s1)?;
    check_variance("s2", s2)?;
    if s1 == 0.0 && s2 == 0.0 {
        return Err(Error::invalid("cannot fuse two zero-variance estimates"));
    }
    let mean = (mu1 * s2 + mu2 * s1) / (s1 + s2);
    Ok((mean, fused_variance(s1, s2)?))
}

/// FedEve server state.
#[derive(Clone, Debug, PartialEq)]
pub struct FedEveState {
    pub w: ParamVector,
    pub momentum: ParamVector,
    pub sigma2: f64,
    pub eta_g: f64,
}

/// Telemetry of one observe/update step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KalmanStep {
    pub gain: f64,
    pub sigma_hat2: f64,
    pub drift: DriftEstimates,
}

impl FedEveState {
    /// Zero-information prior: `M_0 = 0`, `σ_0² = 0`.
    pub fn new(w: ParamVector, eta_g: f64) -> Self {
        let momentum = ParamVector::zeros(w.len());
        FedEveState {
            w,
            momentum,
            sigma2: 0.0,
            eta_g,
        }
    }

    /// Momentum lookahead `ŵ = w − eta_g·M`, the point broadcast to clients.
    pub fn predict(&self) -> ParamVector {
        self.w.sub_scaled(self.eta_g, &self.momentum)
    }

    /// `σ̂² = σ² + σ_Q²`
    pub fn predicted_variance(&self, sigma_q2: f64) -> Result<f64> {
        check_variance("sigma_q2", sigma_q2)?;
        Ok(self.sigma2 + sigma_q2)
    }

    /// Fuses the aggregated client update into the state:
    /// `G = σ̂²/(σ̂² + σ_R²)`, `M' = (1 − G)·M + G·Δ̃`, `w' = w − eta_g·M'`,
    /// `σ²' = (1 − G)·σ̂²`. `gain_override` pins `G` (diagnostics only).
    pub fn observe_update(
        &mut self,
        aggregate: &ParamVector,
        drift: DriftEstimates,
        gain_override: Option<f64>,
    ) -> Result<KalmanStep> {
        aggregate.check_dim(self.w.len())?;
        let sigma_hat2 = self.predicted_variance(drift.sigma_q2)?;
        let gain = match gain_override {
            Some(g) => g,
            None => kalman_gain(sigma_hat2, drift.sigma_r2)?,
        };
        let keep = 1.0 - gain;
        let momentum: ParamVector = self
            .momentum
            .iter()
            .zip(aggregate.iter())
            .map(|(m, d)| keep * m + gain * d)
            .collect::<Vec<_>>()
            .into();
        let w = self.w.sub_scaled(self.eta_g, &momentum);
        let sigma2 = match gain_override {
            Some(g) => (1.0 - g) * sigma_hat2,
            None => fused_variance(sigma_hat2, drift.sigma_r2)?,
        };
        if !w.is_finite() || !momentum.is_finite() || !sigma2.is_finite() {
            return Err(Error::invalid("non-finite FedEve state"));
        }
        self.w = w;
        self.momentum = momentum;
        self.sigma2 = sigma2;
        Ok(KalmanStep {
            gain,
            sigma_hat2,
            drift,
        })
    }
}
