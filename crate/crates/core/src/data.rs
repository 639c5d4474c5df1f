//! Datasets, partitioning across clients and per-round drift-isolation views.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::Shape {
                expected: labels.len() * input_dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(LabeledDataset {
            features,
            labels,
            input_dim,
            n_classes,
        })
    }

    pub fn empty(input_dim: usize, n_classes: usize) -> Self {
        LabeledDataset {
            features: Vec::new(),
            labels: Vec::new(),
            input_dim,
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the given rows, in the given order, into a new dataset.
    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(rows.len() * self.input_dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        LabeledDataset {
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            input_dim: self.input_dim,
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &r in rows {
            counts[self.labels[r]] += 1;
        }
        counts
    }

    /// Indices grouped by label, each group ascending.
    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Isotropic Gaussian blobs, one per class. Class `c` is centred at
/// `separation · μ_c` with `μ_c` a seeded random unit vector; samples are
/// stored class by class.
pub fn gen_synthetic(
    n_classes: usize,
    input_dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes == 0 || input_dim == 0 || per_class == 0 {
        return Err(Error::invalid("synthetic dataset counts must be >= 1"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid("separation must be finite and >= 0"));
    }
    let centers = class_centers(n_classes, input_dim, seed);
    let mut rng = seed::rng(seed::derive(&[seed, 0x5341_4D50]));
    let mut features = Vec::with_capacity(n_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for mu in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(separation * mu + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, labels, input_dim, n_classes.max(2))
}

/// Unit-norm class directions used by [`gen_synthetic`].
pub fn class_centers(n_classes: usize, input_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed::derive(&[seed, 0x4345_4E54]));
    (0..n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Stratified seeded split; returns `(train, test)`.
pub fn train_test_split(
    data: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid("test_fraction must be in [0, 1)"));
    }
    let mut rng = seed::rng(seed::derive(&[seed, 0x0053_504C_4954]));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut rows in data.indices_by_class() {
        rows.shuffle(&mut rng);
        let n_test = (rows.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            what,
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Parses an IDX3 image file; returns `(count, rows·cols, pixels in [0,1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32(bytes, 0, "images header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, "images header")? as usize;
    let rows = read_u32(bytes, 8, "images header")? as usize;
    let cols = read_u32(bytes, 12, "images header")? as usize;
    let pixels = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < pixels {
        return Err(Error::Truncated {
            what: "images payload",
            needed: pixels,
            available: payload.len(),
        });
    }
    let features = payload[..pixels].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((count, rows * cols, features))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "labels header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, "labels header")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Truncated {
            what: "labels payload",
            needed: count,
            available: payload.len(),
        });
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

pub fn idx_from_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let (count, dim, features) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    if dim == 0 {
        return Err(Error::invalid("idx images have zero pixels"));
    }
    let n_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    LabeledDataset::new(features, labels, dim, n_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    idx_from_bytes(&images, &labels)
}

/// How a plan was produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Dirichlet { alpha: f64 },
    Iid,
    External,
}

/// Assignment of example indices to clients.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    assignments: Vec<Vec<usize>>,
    kind: PartitionKind,
    class_proportions: Vec<Vec<f64>>,
}

impl PartitionPlan {
    /// Validates that `assignments` cover `0..data.len()` exactly once with
    /// no empty client.
    pub fn from_assignments(
        data: &LabeledDataset,
        mut assignments: Vec<Vec<usize>>,
        kind: PartitionKind,
    ) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::invalid("partition has no clients"));
        }
        let mut seen = vec![false; data.len()];
        for (k, rows) in assignments.iter_mut().enumerate() {
            if rows.is_empty() {
                return Err(Error::invalid(format!("client {k} has no examples")));
            }
            rows.sort_unstable();
            for &r in rows.iter() {
                if r >= data.len() || seen[r] {
                    return Err(Error::invalid(format!(
                        "index {r} out of range or assigned twice"
                    )));
                }
                seen[r] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("index {missing} is not assigned")));
        }
        let class_proportions = assignments
            .iter()
            .map(|rows| {
                let n = rows.len() as f64;
                data.class_counts(rows)
                    .into_iter()
                    .map(|c| c as f64 / n)
                    .collect()
            })
            .collect();
        Ok(PartitionPlan {
            assignments,
            kind,
            class_proportions,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn kind(&self) -> PartitionKind {
        self.kind
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.assignments[client]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Per-client label proportions `p_ij`.
    pub fn class_proportions(&self) -> &[Vec<f64>] {
        &self.class_proportions
    }

    /// Unweighted mean of the client label distributions, `P = (1/N) Σ_i D_i`.
    pub fn mean_proportions(&self) -> Vec<f64> {
        let m = self.class_proportions[0].len();
        let n = self.n_clients() as f64;
        (0..m)
            .map(|j| self.class_proportions.iter().map(|p| p[j]).sum::<f64>() / n)
            .collect()
    }
}

/// Samples Dirichlet(alpha·1_k) in log space so tiny concentrations do not
/// underflow to an all-zero draw.
pub fn sample_dirichlet(alpha: f64, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("dirichlet alpha must be finite and > 0"));
    }
    let boosted = alpha < 1.0;
    let gamma = Gamma::new(if boosted { alpha + 1.0 } else { alpha }, 1.0)
        .map_err(|e| Error::invalid(format!("gamma: {e}")))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let mut lg = g.ln();
            if boosted {
                // Gamma(a) = Gamma(a+1) · U^(1/a)
                let u: f64 = rng.random::<f64>();
                lg += u.max(f64::MIN_POSITIVE).ln() / alpha;
            }
            lg
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Splits `rows` class by class across `n_parts` using Dirichlet proportions,
/// then repairs empty parts by moving one example from the largest part.
fn dirichlet_split(
    data: &LabeledDataset,
    rows: &[usize],
    n_parts: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut parts = vec![Vec::new(); n_parts];
    let mut by_class = vec![Vec::new(); data.n_classes()];
    for &r in rows {
        by_class[data.label(r)].push(r);
    }
    for mut class_rows in by_class {
        if class_rows.is_empty() {
            continue;
        }
        class_rows.shuffle(rng);
        let props = sample_dirichlet(alpha, n_parts, rng)?;
        let n = class_rows.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == n_parts {
                n
            } else {
                ((cum * n as f64).floor() as usize).clamp(start, n)
            };
            parts[k].extend_from_slice(&class_rows[start..end]);
            start = end;
        }
    }
    repair_empty(&mut parts);
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(parts)
}

fn repair_empty(parts: &mut [Vec<usize>]) {
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let largest = (0..parts.len())
            .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
            .expect("at least one part");
        parts[largest].sort_unstable();
        let moved = parts[largest].pop().expect("largest part is nonempty");
        parts[empty].push(moved);
    }
}

/// Label-skewed partition: each class is spread over the clients with
/// proportions drawn from Dirichlet(alpha).
pub fn partition_dirichlet(
    data: &LabeledDataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients < 2 {
        return Err(Error::invalid("dirichlet partition needs at least 2 clients"));
    }
    if data.len() < n_clients {
        return Err(Error::invalid(format!(
            "cannot give {n_clients} clients an example each from {} examples",
            data.len()
        )));
    }
    let mut rng = seed::rng(seed::derive(&[seed, 0x4449_5249]));
    let all: Vec<usize> = (0..data.len()).collect();
    let parts = dirichlet_split(data, &all, n_clients, alpha, &mut rng)?;
    PartitionPlan::from_assignments(data, parts, PartitionKind::Dirichlet { alpha })
}

/// Uniformly random split into near-equal (±1) shards.
pub fn partition_iid(data: &LabeledDataset, n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::invalid("iid partition needs at least 1 client"));
    }
    if data.len() < n_clients {
        return Err(Error::invalid(format!(
            "cannot give {n_clients} clients an example each from {} examples",
            data.len()
        )));
    }
    let mut rng = seed::rng(seed::derive(&[seed, 0x0049_4944]));
    let mut all: Vec<usize> = (0..data.len()).collect();
    all.shuffle(&mut rng);
    PartitionPlan::from_assignments(data, deal_even(&all, n_clients), PartitionKind::Iid)
}

/// Contiguous chunks with sizes differing by at most one.
fn deal_even(rows: &[usize], n_parts: usize) -> Vec<Vec<usize>> {
    let base = rows.len() / n_parts;
    let extra = rows.len() % n_parts;
    let mut out = Vec::with_capacity(n_parts);
    let mut start = 0;
    for k in 0..n_parts {
        let len = base + usize::from(k < extra);
        let mut part = rows[start..start + len].to_vec();
        part.sort_unstable();
        out.push(part);
        start += len;
    }
    out
}

/// Data heterogeneity `H = (1/N) Σ_i (1/M) Σ_j (p_ij − p_j)²` where `p_j` is
/// the unweighted mean of the client label distributions.
pub fn heterogeneity(plan: &PartitionPlan) -> f64 {
    let mean = plan.mean_proportions();
    let m = mean.len() as f64;
    let per_client: f64 = plan
        .class_proportions()
        .iter()
        .map(|p| {
            p.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / m
        })
        .sum();
    per_client / plan.n_clients() as f64
}

/// Squared deviation of a client subset's mean label distribution from the
/// population mean, `D_S = (1/M) Σ_j (mean_{i∈S} p_ij − p_j)²`.
pub fn subset_distribution_gap(plan: &PartitionPlan, clients: &[usize]) -> f64 {
    let mean = plan.mean_proportions();
    let s = clients.len() as f64;
    let props = plan.class_proportions();
    mean.iter()
        .enumerate()
        .map(|(j, pj)| {
            let sub = clients.iter().map(|&k| props[k][j]).sum::<f64>() / s;
            (sub - pj) * (sub - pj)
        })
        .sum::<f64>()
        / mean.len() as f64
}

/// Which drift sources a run keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftIsolationMode {
    /// iid shards: neither period nor client drift.
    None,
    /// Sampled non-iid shards pooled and redealt evenly each round.
    PeriodOnly,
    /// iid shards re-partitioned non-iid among the sampled clients each round.
    ClientOnly,
    /// Plain non-iid shards.
    #[default]
    Both,
}

impl DriftIsolationMode {
    /// Whether the base plan for this mode is the iid one.
    pub fn uses_iid_base(self) -> bool {
        matches!(self, DriftIsolationMode::None | DriftIsolationMode::ClientOnly)
    }
}

/// Per-round training shards for the sampled clients (same order as
/// `sampled`). `base_plan` must be the iid plan for `None`/`ClientOnly` and
/// the non-iid plan for `PeriodOnly`/`Both`.
pub fn drift_isolation_view(
    mode: DriftIsolationMode,
    data: &LabeledDataset,
    base_plan: &PartitionPlan,
    sampled: &[usize],
    round_seed: u64,
    client_only_alpha: f64,
) -> Result<Vec<Vec<usize>>> {
    if sampled.is_empty() {
        return Err(Error::invalid("no sampled clients"));
    }
    if let Some(&bad) = sampled.iter().find(|&&k| k >= base_plan.n_clients()) {
        return Err(Error::invalid(format!("client {bad} is not in the plan")));
    }
    let own = || sampled.iter().map(|&k| base_plan.shard(k).to_vec()).collect();
    let pool = || -> Vec<usize> {
        let mut p: Vec<usize> = sampled
            .iter()
            .flat_map(|&k| base_plan.shard(k).iter().copied())
            .collect();
        p.sort_unstable();
        p
    };
    let mut rng = seed::rng(seed::derive(&[round_seed, 0x5649_4557]));
    match mode {
        DriftIsolationMode::None | DriftIsolationMode::Both => Ok(own()),
        DriftIsolationMode::PeriodOnly => Ok(stratified_redeal(data, &pool(), sampled.len(), &mut rng)),
        DriftIsolationMode::ClientOnly => {
            let pool = pool();
            if pool.len() < sampled.len() {
                return Err(Error::invalid("pool smaller than sample"));
            }
            if sampled.len() == 1 {
                return Ok(vec![pool]);
            }
            dirichlet_split(data, &pool, sampled.len(), client_only_alpha, &mut rng)
        }
    }
}

/// Shuffles the pool, orders it by label and deals round-robin, so every
/// part gets each label's count to within one.
fn stratified_redeal(
    data: &LabeledDataset,
    pool: &[usize],
    n_parts: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut rows = pool.to_vec();
    rows.shuffle(rng);
    rows.sort_by_key(|&r| data.label(r));
    let mut slots: Vec<usize> = (0..n_parts).collect();
    slots.shuffle(rng);
    let mut parts = vec![Vec::new(); n_parts];
    for (i, r) in rows.into_iter().enumerate() {
        parts[slots[i % n_parts]].push(r);
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    parts
}
