//! Local training on one sampled client.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Batch, Objective};
use crate::params::ParamVector;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalHyper {
    pub eta_l: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// FedProx proximal coefficient.
    pub mu: f64,
}

impl Default for LocalHyper {
    fn default() -> Self {
        LocalHyper {
            eta_l: 0.01,
            epochs: 1,
            batch_size: 10,
            mu: 0.01,
        }
    }
}

impl LocalHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_l >= 0.0 && self.eta_l.is_finite()) {
            return Err(Error::invalid("eta_l must be finite and >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid("mu must be finite and >= 0"));
        }
        Ok(())
    }

    /// `E · ceil(n / B)`; the last partial minibatch counts as a step.
    pub fn local_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// Identifies one client's job within a run; `seed` drives its shuffles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalJob {
    pub round: usize,
    pub client_id: usize,
    pub seed: u64,
}

impl LocalJob {
    pub fn new(round: usize, client_id: usize, run_seed: u64) -> Self {
        LocalJob {
            round,
            client_id,
            seed: seed::client_seed(run_seed, round, client_id),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `w_broadcast − w_local_final`
    pub delta: ParamVector,
    pub n_k: usize,
    pub local_steps: usize,
    /// Largest norm of a (corrected) step direction seen during training.
    pub max_step_norm: f64,
    /// Mean minibatch loss over the local steps.
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlVariate {
    pub client: ParamVector,
    pub global: ParamVector,
}

enum Correction<'a> {
    None,
    Proximal { mu: f64, anchor: &'a ParamVector },
    /// Added to every gradient: `c_global − c_k`.
    Shift(ParamVector),
}

fn run_local<O: Objective + ?Sized>(
    objective: &O,
    w_in: &ParamVector,
    data: &LabeledDataset,
    shard: &[usize],
    hyper: &LocalHyper,
    job: LocalJob,
    correction: Correction<'_>,
) -> Result<ClientUpdate> {
    hyper.validate()?;
    w_in.check_dim(objective.dim())?;
    if shard.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let diverged = |what| Error::Divergence {
        round: job.round,
        client: job.client_id,
        what,
    };
    let mut rng = seed::rng(job.seed);
    let mut order = shard.to_vec();
    let mut w = w_in.clone();
    let mut steps = 0usize;
    let mut max_step_norm = 0.0f64;
    let mut loss_sum = 0.0;

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch = Batch::new(data, chunk.to_vec())?;
            let start = match &correction {
                Correction::Proximal { mu, anchor } if *mu != 0.0 && steps > 0 => {
                    let start = w.clone();
                    // implicit pull toward the anchor (w == w_in before the first step)
                    let k = hyper.eta_l * mu;
                    for (wi, ai) in w.iter_mut().zip(anchor.iter()) {
                        *wi = (*wi + k * ai) / (1.0 + k);
                    }
                    Some(start)
                }
                _ => None,
            };
            let (loss, mut g) = objective.loss_and_grad(&w, &batch)?;
            if !loss.is_finite() {
                return Err(diverged("loss"));
            }
            if let Correction::Shift(shift) = &correction {
                g.axpy(1.0, shift);
            }
            w.axpy(-hyper.eta_l, &g);
            let step_norm = match start {
                Some(start) if hyper.eta_l > 0.0 => start.sub(&w).norm() / hyper.eta_l,
                _ => g.norm(),
            };
            max_step_norm = max_step_norm.max(step_norm);
            loss_sum += loss;
            steps += 1;
        }
    }

    let delta = w_in.sub(&w);
    if !delta.is_finite() {
        return Err(diverged("update"));
    }
    Ok(ClientUpdate {
        client_id: job.client_id,
        delta,
        n_k: shard.len(),
        local_steps: steps,
        max_step_norm,
        mean_loss: loss_sum / steps as f64,
    })
}

/// Plain minibatch SGD (FedAvg family).
pub fn local_train_sgd<O: Objective + ?Sized>(
    objective: &O,
    w_in: &ParamVector,
    data: &LabeledDataset,
    shard: &[usize],
    hyper: &LocalHyper,
    job: LocalJob,
) -> Result<ClientUpdate> {
    run_local(objective, w_in, data, shard, hyper, job, Correction::None)
}

/// SGD on the proximal objective `F_k(w) + (mu/2)‖w − w_in‖²`. The
/// quadratic term is applied implicitly before each gradient step,
/// `w ← (w + eta_l·mu·w_in) / (1 + eta_l·mu)`, which keeps the iteration
/// stable for any `mu` and leaves the first step untouched.
pub fn local_train_prox<O: Objective + ?Sized>(
    objective: &O,
    w_in: &ParamVector,
    data: &LabeledDataset,
    shard: &[usize],
    hyper: &LocalHyper,
    job: LocalJob,
) -> Result<ClientUpdate> {
    let correction = Correction::Proximal {
        mu: hyper.mu,
        anchor: w_in,
    };
    run_local(objective, w_in, data, shard, hyper, job, correction)
}

/// SCAFFOLD local steps `w ← w − eta_l (g − c_k + c_global)`. Returns the
/// update and the refreshed client variate (option II):
/// `c_k' = c_k − c_global + delta / (K · eta_l)`.
pub fn local_train_scaffold<O: Objective + ?Sized>(
    objective: &O,
    w_in: &ParamVector,
    data: &LabeledDataset,
    shard: &[usize],
    hyper: &LocalHyper,
    cv: &ControlVariate,
    job: LocalJob,
) -> Result<(ClientUpdate, ParamVector)> {
    cv.client.check_dim(objective.dim())?;
    cv.global.check_dim(objective.dim())?;
    if !(hyper.eta_l > 0.0) {
        return Err(Error::invalid("scaffold needs eta_l > 0"));
    }
    let correction = if cv.client == cv.global {
        Correction::None
    } else {
        Correction::Shift(cv.global.sub(&cv.client))
    };
    let update = run_local(objective, w_in, data, shard, hyper, job, correction)?;
    let scale = 1.0 / (update.local_steps as f64 * hyper.eta_l);
    let mut c_new = cv.client.sub(&cv.global);
    c_new.axpy(scale, &update.delta);
    Ok((update, c_new))
}
