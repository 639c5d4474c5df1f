//! Drift measurement: exact period drift, the finite-population sampling
//! variance identity, and moment-based normality diagnostics.

use rayon::prelude::*;

use crate::data::{LabeledDataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::experiment::RoundLog;
use crate::model::{Batch, Objective};
use crate::params::ParamVector;

/// Full-batch gradient of every client's objective at `w`, in client order.
pub fn client_gradients<O: Objective + ?Sized>(
    objective: &O,
    w: &ParamVector,
    data: &LabeledDataset,
    plan: &PartitionPlan,
) -> Result<Vec<ParamVector>> {
    plan.assignments()
        .par_iter()
        .map(|rows| {
            let batch = Batch::from_sorted(data, rows);
            objective.loss_and_grad(w, &batch).map(|(_, g)| g)
        })
        .collect()
}

/// `‖(1/|S|) Σ_{k∈S} ∇F_k(w) − ∇f(w)‖²` with `∇f = Σ_k (n_k/n) ∇F_k`.
pub fn exact_period_drift<O: Objective + ?Sized>(
    objective: &O,
    w: &ParamVector,
    data: &LabeledDataset,
    plan: &PartitionPlan,
    sampled: &[usize],
) -> Result<f64> {
    if sampled.is_empty() {
        return Err(Error::invalid("no sampled clients"));
    }
    if let Some(&bad) = sampled.iter().find(|&&k| k >= plan.n_clients()) {
        return Err(Error::invalid(format!("client {bad} is not in the plan")));
    }
    let grads = client_gradients(objective, w, data, plan)?;
    Ok(period_drift_from_gradients(&grads, &plan.client_sizes(), sampled))
}

pub(crate) fn period_drift_from_gradients(
    grads: &[ParamVector],
    sizes: &[usize],
    sampled: &[usize],
) -> f64 {
    let dim = grads[0].len();
    let n: usize = sizes.iter().sum();
    let mut global = ParamVector::zeros(dim);
    for (g, &nk) in grads.iter().zip(sizes) {
        global.axpy(nk as f64 / n as f64, g);
    }
    let mut subset = ParamVector::zeros(dim);
    let s = sampled.len() as f64;
    for &k in sampled {
        subset.axpy(1.0 / s, &grads[k]);
    }
    subset.dist_sq(&global)
}

/// Largest population the exhaustive subset enumeration accepts.
pub const MAX_ENUMERATION: usize = 12;

/// Mean of `(subset mean − population mean)²` over all `C(N, S)` subsets.
pub fn subset_variance_bruteforce(values: &[f64], s: usize) -> Result<f64> {
    let n = values.len();
    if n > MAX_ENUMERATION {
        return Err(Error::invalid(format!(
            "enumeration limited to N <= {MAX_ENUMERATION}, got {n}"
        )));
    }
    if s == 0 || s > n {
        return Err(Error::invalid("subset size must be in 1..=N"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != s {
            continue;
        }
        let sub = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| values[i])
            .sum::<f64>()
            / s as f64;
        total += (sub - mean) * (sub - mean);
        count += 1;
    }
    Ok(total / count as f64)
}

/// `(σ²/S)(1 − S/N)` with `σ²` the unbiased (N−1) sample variance.
pub fn subset_variance_closed_form(values: &[f64], s: usize) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid("need at least two values"));
    }
    if s == 0 || s > n {
        return Err(Error::invalid("subset size must be in 1..=N"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(var / s as f64 * (1.0 - s as f64 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalityReport {
    pub n: usize,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Jarque–Bera statistic `n(g1²/6 + g2²/24)`.
    pub jb_stat: f64,
}

/// Moment skewness `g1`, excess kurtosis `g2` and the Jarque–Bera statistic.
pub fn normality_diagnostic(samples: &[f64]) -> Result<NormalityReport> {
    let n = samples.len();
    if n < 8 {
        return Err(Error::invalid("normality diagnostic needs at least 8 samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if m2 <= 0.0 {
        return Err(Error::invalid("samples have zero variance"));
    }
    let skewness = m3 / m2.powf(1.5);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    Ok(NormalityReport {
        n,
        skewness,
        excess_kurtosis,
        jb_stat: nf * (skewness * skewness / 6.0 + excess_kurtosis * excess_kurtosis / 24.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftSample {
    pub round: usize,
    pub value: f64,
}

/// Per-round drift series extracted from run telemetry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DriftSeries {
    /// Exact period drift at the broadcast point.
    pub period: Vec<DriftSample>,
    /// Client spread `σ_R²` of the round's updates (client-drift proxy).
    pub client: Vec<DriftSample>,
    /// FedEve's `σ_Q²` estimate; empty for other methods.
    pub sigma_q2: Vec<DriftSample>,
    /// First coordinate of `Δ̃ − M`; empty for methods without momentum.
    pub probe: Vec<DriftSample>,
}

/// Requires every round to carry an exact period drift measurement.
pub fn track_drift_series(logs: &[RoundLog]) -> Result<DriftSeries> {
    let mut series = DriftSeries::default();
    for log in logs {
        let period = log.period_drift.ok_or_else(|| {
            Error::invalid(format!("round {} has no period drift measurement", log.t))
        })?;
        let sample = |value| DriftSample { round: log.t, value };
        series.period.push(sample(period));
        series.client.push(sample(log.client_spread));
        if let Some(q) = log.sigma_q2 {
            series.sigma_q2.push(sample(q));
        }
        if let Some(p) = log.probe {
            series.probe.push(sample(p));
        }
    }
    Ok(series)
}
