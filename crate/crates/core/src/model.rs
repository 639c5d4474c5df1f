//! Desk-scale differentiable models: multinomial logistic regression and a
//! one-hidden-layer tanh MLP, both trained with mean softmax cross-entropy.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            n_classes,
            init_scale: 0.0,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            n_classes,
            init_scale: 0.0,
        }
    }

    pub fn with_init_scale(mut self, init_scale: f64) -> Self {
        self.init_scale = init_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("model needs at least 2 classes"));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("model input_dim must be positive"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::invalid("mlp hidden_dim must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("init_scale must be finite and >= 0"));
        }
        Ok(())
    }

    /// Number of parameters.
    pub fn dim(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        match self.kind {
            ModelKind::Logistic => d * c + c,
            ModelKind::Mlp => d * h + h + h * c + c,
        }
    }

    /// Ranges of the parameter vector holding bias terms.
    fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        match self.kind {
            ModelKind::Logistic => vec![d * c..d * c + c],
            ModelKind::Mlp => vec![d * h..d * h + h, d * h + h + h * c..self.dim()],
        }
    }

    /// Offset of the output-layer bias block.
    pub fn output_bias_offset(&self) -> usize {
        self.dim() - self.n_classes
    }
}

/// A set of rows of a dataset. Rows are kept in ascending index order so that
/// every reduction over the batch runs in one canonical order.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    data: &'a LabeledDataset,
    rows: Cow<'a, [usize]>,
}

impl<'a> Batch<'a> {
    pub fn new(data: &'a LabeledDataset, mut rows: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= data.len()) {
            return Err(Error::invalid(format!(
                "row {bad} out of range for dataset of {}",
                data.len()
            )));
        }
        rows.sort_unstable();
        Ok(Batch {
            data,
            rows: Cow::Owned(rows),
        })
    }

    /// Rows already sorted ascending; used on hot paths that maintain the order themselves.
    pub(crate) fn from_sorted(data: &'a LabeledDataset, rows: &'a [usize]) -> Self {
        debug_assert!(rows.windows(2).all(|w| w[0] <= w[1]));
        Batch {
            data,
            rows: Cow::Borrowed(rows),
        }
    }

    pub fn full(data: &'a LabeledDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Batch {
            data,
            rows: Cow::Owned((0..data.len()).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn data(&self) -> &LabeledDataset {
        self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.rows
            .iter()
            .map(move |&r| (self.data.row(r), self.data.label(r)))
    }
}

/// Anything the local trainer and drift probes can differentiate.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn loss(&self, params: &ParamVector, batch: &Batch<'_>) -> Result<f64>;

    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch<'_>)
        -> Result<(f64, ParamVector)>;
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let scale = spec.init_scale;
    let mut values: Vec<f64> = (0..spec.dim())
        .map(|_| {
            if scale > 0.0 {
                rng.random_range(-scale..=scale)
            } else {
                0.0
            }
        })
        .collect();
    for range in spec.bias_ranges() {
        values[range].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(ParamVector::from_vec(values))
}

fn check_batch(spec: &ModelSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<()> {
    params.check_dim(spec.dim())?;
    if batch.data().input_dim() != spec.input_dim {
        return Err(Error::Shape {
            expected: spec.input_dim,
            actual: batch.data().input_dim(),
        });
    }
    if batch.data().n_classes() > spec.n_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model only {}",
            batch.data().n_classes(),
            spec.n_classes
        )));
    }
    Ok(())
}

/// Writes logits into `logits` and, for the MLP, hidden activations into `hidden`.
fn logits_into(spec: &ModelSpec, w: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.n_classes);
    match spec.kind {
        ModelKind::Logistic => {
            let bias = &w[d * c..];
            for k in 0..c {
                let row = &w[k * d..(k + 1) * d];
                logits[k] = bias[k] + dot(row, x);
            }
        }
        ModelKind::Mlp => {
            let (w1, rest) = w.split_at(d * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h * c);
            for j in 0..h {
                hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh();
            }
            for k in 0..c {
                logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted softmax, in place.
fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    for l in logits.iter_mut() {
        *l /= z;
    }
}

/// Mean cross-entropy of the batch under `params`.
pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
    check_batch(spec, params, batch)?;
    let mut hidden = vec![0.0; spec.hidden_dim];
    let mut logits = vec![0.0; spec.n_classes];
    let mut total = 0.0;
    for (x, y) in batch.iter() {
        logits_into(spec, params, x, &mut hidden, &mut logits);
        total += log_sum_exp(&logits) - logits[y];
    }
    Ok(total / batch.len() as f64)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Analytic gradient of [`forward_loss`].
pub fn backward(spec: &ModelSpec, params: &ParamVector, batch: &Batch<'_>) -> Result<ParamVector> {
    loss_and_grad(spec, params, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch<'_>,
) -> Result<(f64, ParamVector)> {
    check_batch(spec, params, batch)?;
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.n_classes);
    let w = params.as_slice();
    let mut grad = vec![0.0; spec.dim()];
    let mut hidden = vec![0.0; h];
    let mut dhidden = vec![0.0; h];
    let mut logits = vec![0.0; c];
    let mut total = 0.0;

    for (x, y) in batch.iter() {
        logits_into(spec, w, x, &mut hidden, &mut logits);
        total += log_sum_exp(&logits) - logits[y];
        softmax_in_place(&mut logits);
        // logits now hold probabilities; turn them into dL/dlogits
        logits[y] -= 1.0;
        match spec.kind {
            ModelKind::Logistic => {
                let (gw, gb) = grad.split_at_mut(d * c);
                for k in 0..c {
                    let dl = logits[k];
                    for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += dl * xi;
                    }
                    gb[k] += dl;
                }
            }
            ModelKind::Mlp => {
                let w2 = &w[d * h + h..d * h + h + h * c];
                let (gw1, rest) = grad.split_at_mut(d * h);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h * c);
                dhidden.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..c {
                    let dl = logits[k];
                    let row = &w2[k * h..(k + 1) * h];
                    for j in 0..h {
                        gw2[k * h + j] += dl * hidden[j];
                        dhidden[j] += dl * row[j];
                    }
                    gb2[k] += dl;
                }
                for j in 0..h {
                    let dz = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                    for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                    gb1[j] += dz;
                }
            }
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, ParamVector::from_vec(grad)))
}

/// Central differences of an arbitrary scalar function.
pub fn central_difference<F>(f: F, params: &ParamVector, eps: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference eps must be > 0"));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(ParamVector::from_vec(out))
}

pub fn finite_diff_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch<'_>,
    eps: f64,
) -> Result<ParamVector> {
    check_batch(spec, params, batch)?;
    central_difference(|w| forward_loss(spec, w, batch), params, eps)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> usize {
    let mut hidden = vec![0.0; spec.hidden_dim];
    let mut logits = vec![0.0; spec.n_classes];
    logits_into(spec, params, x, &mut hidden, &mut logits);
    argmax(&logits)
}

/// Top-1 accuracy and mean loss over a whole dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &LabeledDataset) -> Result<Evaluation> {
    let batch = Batch::full(data)?;
    check_batch(spec, params, &batch)?;
    let mut hidden = vec![0.0; spec.hidden_dim];
    let mut logits = vec![0.0; spec.n_classes];
    let mut correct = 0usize;
    let mut total = 0.0;
    for (x, y) in batch.iter() {
        logits_into(spec, params, x, &mut hidden, &mut logits);
        total += log_sum_exp(&logits) - logits[y];
        if argmax(&logits) == y {
            correct += 1;
        }
    }
    let n = batch.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: total / n,
    })
}

impl Objective for ModelSpec {
    fn dim(&self) -> usize {
        ModelSpec::dim(self)
    }

    fn loss(&self, params: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
        forward_loss(self, params, batch)
    }

    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &Batch<'_>,
    ) -> Result<(f64, ParamVector)> {
        loss_and_grad(self, params, batch)
    }
}

/// `F(w) = mean_i ½‖w − x_i‖²` over the batch rows; labels are ignored.
/// Closed-form minimiser and gradient make it handy for checking the
/// training and drift machinery by hand.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticObjective {
    pub dim: usize,
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, params: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
        self.loss_and_grad(params, batch).map(|(l, _)| l)
    }

    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &Batch<'_>,
    ) -> Result<(f64, ParamVector)> {
        params.check_dim(self.dim)?;
        if batch.data().input_dim() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: batch.data().input_dim(),
            });
        }
        let mut grad = vec![0.0; self.dim];
        let mut total = 0.0;
        for (x, _) in batch.iter() {
            for ((g, w), a) in grad.iter_mut().zip(params.iter()).zip(x) {
                let r = w - a;
                *g += r;
                total += 0.5 * r * r;
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((total / n, ParamVector::from_vec(grad)))
    }
}
