use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, Method, PartitionSpec};
use crate::client::{local_train_prox, local_train_scaffold, local_train_sgd, ClientUpdate, ControlVariate, LocalJob};
use crate::data::{
    drift_isolation_view, gen_synthetic, load_idx, partition_dirichlet, partition_iid, train_test_split,
    LabeledDataset, PartitionKind, PartitionPlan,
};
use crate::drift::exact_period_drift;
use crate::error::{Error, Result};
use crate::model::{evaluate, init_params, Batch, Evaluation, ModelSpec, Objective};
use crate::params::ParamVector;
use crate::seed;
use crate::server::{
    aggregate, estimate_drift_variances, fedavg_step, fedavgm_step, fedopt_adam_step, AdamState, FedEveState,
    MomentumState,
};

/// One JSONL record per round. Method-specific fields are omitted when not
/// applicable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub t: usize,
    pub sampled: Vec<usize>,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_kal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_q2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_drift: Option<f64>,
    /// Wall-clock time of the round.
    pub ms: u64,
    /// Spread of the raw client updates around their aggregate.
    #[serde(skip)]
    pub client_spread: f64,
    /// First coordinate of `Δ̃ − M` for momentum methods.
    #[serde(skip)]
    pub probe: Option<f64>,
}

/// Last line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub partition: String,
    pub drift_isolation: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_acc: f64,
    pub final_eval_loss: f64,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct SummaryLine {
    pub summary: RunSummary,
}

/// Data, model and initial point shared by the simulator and the GD oracle.
struct Setup {
    spec: ModelSpec,
    train: LabeledDataset,
    test: LabeledDataset,
    w0: ParamVector,
}

fn setup(config: &ExperimentConfig) -> Result<Setup> {
    let (train, test) = match &config.dataset {
        DatasetSpec::Synthetic {
            n_classes,
            input_dim,
            per_class,
            separation,
            seed,
            test_fraction,
        } => {
            let all = gen_synthetic(*n_classes, *input_dim, *per_class, *separation, *seed)?;
            train_test_split(&all, *test_fraction, *seed)?
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
    };
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let spec = match &config.model {
        Some(m) => m.clone(),
        None => ModelSpec::logistic(train.input_dim(), train.n_classes()).with_init_scale(0.0),
    };
    if spec.input_dim != train.input_dim() || spec.n_classes != train.n_classes() {
        return Err(Error::config(
            "model",
            format!(
                "model expects {}x{} but data is {}x{}",
                spec.input_dim,
                spec.n_classes,
                train.input_dim(),
                train.n_classes()
            ),
        ));
    }
    let w0 = init_params(&spec, seed::derive(&[config.seed, 0x494E_4954]))?;
    Ok(Setup { spec, train, test, w0 })
}

fn eval_set<'a>(train: &'a LabeledDataset, test: &'a LabeledDataset) -> &'a LabeledDataset {
    if test.is_empty() {
        train
    } else {
        test
    }
}

fn load_external(path: &Path, data: &LabeledDataset) -> Result<PartitionPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parts: Vec<Vec<usize>> =
        serde_json::from_str(&text).map_err(|e| Error::config("partition", format!("{}: {e}", path.display())))?;
    PartitionPlan::from_assignments(data, parts, PartitionKind::External)
}

/// `m` distinct clients drawn uniformly from `0..n`, ascending.
pub fn sample_clients(n: usize, m: usize, round_seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot sample {m} of {n} clients")));
    }
    let mut rng = seed::rng(seed::derive(&[round_seed, 0x5341_4D50]));
    let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

enum ServerState {
    Plain(ParamVector),
    Momentum(MomentumState),
    Adam(AdamState),
    Eve(FedEveState),
}

impl ServerState {
    fn params(&self) -> &ParamVector {
        match self {
            ServerState::Plain(w) => w,
            ServerState::Momentum(s) => &s.w,
            ServerState::Adam(s) => &s.w,
            ServerState::Eve(s) => &s.w,
        }
    }
}

struct Scaffold {
    clients: Vec<ParamVector>,
    global: ParamVector,
}

/// Round-by-round federated training driver.
pub struct Simulator {
    config: ExperimentConfig,
    spec: ModelSpec,
    train: LabeledDataset,
    test: LabeledDataset,
    plan: PartitionPlan,
    server: ServerState,
    scaffold: Option<Scaffold>,
    pool: Option<rayon::ThreadPool>,
    round: usize,
}

impl Simulator {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let Setup { spec, train, test, w0 } = setup(&config)?;
        let part_seed = seed::derive(&[config.seed, 0x5041_5254]);
        let n = config.n_clients;
        let plan = if config.drift_isolation.mode.uses_iid_base() {
            partition_iid(&train, n, part_seed)?
        } else {
            match &config.partition {
                PartitionSpec::Dirichlet { alpha } => partition_dirichlet(&train, n, *alpha, part_seed)?,
                PartitionSpec::Iid => partition_iid(&train, n, part_seed)?,
                PartitionSpec::External { path } => load_external(path, &train)?,
            }
        };
        if plan.n_clients() != n {
            return Err(Error::config(
                "n_clients",
                format!("partition has {} clients, config says {n}", plan.n_clients()),
            ));
        }
        let server = match config.method {
            Method::FedAvgM => ServerState::Momentum(MomentumState::new(w0)),
            Method::FedOpt => ServerState::Adam(AdamState::new(w0)),
            Method::FedEve => ServerState::Eve(FedEveState::new(w0, config.server.eta_g)),
            Method::FedAvg | Method::FedProx | Method::Scaffold => ServerState::Plain(w0),
        };
        let scaffold = (config.method == Method::Scaffold).then(|| Scaffold {
            clients: vec![ParamVector::zeros(spec.dim()); n],
            global: ParamVector::zeros(spec.dim()),
        });
        Ok(Simulator {
            config,
            spec,
            train,
            test,
            plan,
            server,
            scaffold,
            pool: None,
            round: 0,
        })
    }

    /// Runs client training on a dedicated pool of `threads` workers.
    /// Results do not depend on the thread count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        self.pool = Some(pool);
        Ok(self)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn train_data(&self) -> &LabeledDataset {
        &self.train
    }

    /// The plan clients are drawn from (the iid one in `none`/`client_only` modes).
    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn params(&self) -> &ParamVector {
        self.server.params()
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate(&self.spec, self.params(), eval_set(&self.train, &self.test))
    }

    fn broadcast_point(&self) -> ParamVector {
        match &self.server {
            ServerState::Eve(s) if self.config.server.broadcast_prediction => s.predict(),
            other => other.params().clone(),
        }
    }

    fn train_clients(
        &self,
        w: &ParamVector,
        sampled: &[usize],
        shards: &[Vec<usize>],
    ) -> Result<Vec<(ClientUpdate, Option<ParamVector>)>> {
        let t = self.round;
        let work = || {
            sampled
                .par_iter()
                .zip(shards.par_iter())
                .map(|(&k, shard)| {
                    let job = LocalJob::new(t, k, self.config.seed);
                    let hyper = &self.config.local;
                    match (self.config.method, &self.scaffold) {
                        (Method::FedProx, _) => {
                            local_train_prox(&self.spec, w, &self.train, shard, hyper, job).map(|u| (u, None))
                        }
                        (Method::Scaffold, Some(sc)) => {
                            let cv = ControlVariate {
                                client: sc.clients[k].clone(),
                                global: sc.global.clone(),
                            };
                            local_train_scaffold(&self.spec, w, &self.train, shard, hyper, &cv, job)
                                .map(|(u, c)| (u, Some(c)))
                        }
                        _ => local_train_sgd(&self.spec, w, &self.train, shard, hyper, job).map(|u| (u, None)),
                    }
                })
                .collect::<Vec<_>>()
        };
        let results = match &self.pool {
            Some(pool) => pool.install(work),
            None => work(),
        };
        // report the lowest-id failing client
        results.into_iter().collect()
    }

    /// Executes one communication round.
    pub fn step(&mut self) -> Result<RoundLog> {
        let started = Instant::now();
        let t = self.round;
        let cfg = &self.config;
        let round_seed = seed::round_seed(cfg.seed, t);
        let sampled = sample_clients(cfg.n_clients, cfg.clients_per_round, round_seed)?;
        let broadcast = self.broadcast_point();

        let period_drift = if cfg.period_drift_every > 0 && t.is_multiple_of(cfg.period_drift_every) {
            Some(exact_period_drift(&self.spec, &broadcast, &self.train, &self.plan, &sampled)?)
        } else {
            None
        };
        let shards = drift_isolation_view(
            cfg.drift_isolation.mode,
            &self.train,
            &self.plan,
            &sampled,
            round_seed,
            cfg.drift_isolation.client_only_alpha,
        )?;

        let results = self.train_clients(&broadcast, &sampled, &shards)?;
        let (updates, variates): (Vec<ClientUpdate>, Vec<Option<ParamVector>>) = results.into_iter().unzip();
        let delta = aggregate(&updates)?;
        let train_loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64;
        let zero = ParamVector::zeros(delta.len());
        let client_spread = estimate_drift_variances(&zero, &updates, &delta)?.sigma_r2;

        let hyper = &self.config.server;
        let mut log = RoundLog {
            t,
            sampled: sampled.clone(),
            train_loss,
            acc: None,
            eval_loss: None,
            g_kal: None,
            sigma_q2: None,
            sigma_r2: None,
            period_drift,
            ms: 0,
            client_spread,
            probe: None,
        };
        match &mut self.server {
            ServerState::Plain(w) => *w = fedavg_step(w, &delta, hyper.eta_g),
            ServerState::Momentum(s) => {
                log.probe = Some(delta[0] - s.momentum[0]);
                *s = fedavgm_step(s, &delta, hyper.beta, hyper.eta_g);
            }
            ServerState::Adam(s) => *s = fedopt_adam_step(s, &delta, hyper.beta1, hyper.beta2, hyper.tau, hyper.eta_g),
            ServerState::Eve(s) => {
                log.probe = Some(delta[0] - s.momentum[0]);
                let drift = estimate_drift_variances(&s.momentum, &updates, &delta)?;
                let step = s.observe_update(&delta, drift, hyper.force_gain).map_err(|_| Error::ServerDivergence {
                    round: t,
                    what: "fedeve state",
                })?;
                log.g_kal = Some(step.gain);
                log.sigma_q2 = Some(step.drift.sigma_q2);
                log.sigma_r2 = Some(step.drift.sigma_r2);
            }
        }
        if !self.server.params().is_finite() {
            return Err(Error::ServerDivergence { round: t, what: "parameters" });
        }

        if let Some(sc) = &mut self.scaffold {
            let n = sc.clients.len() as f64;
            for (u, c_new) in updates.iter().zip(variates) {
                let c_new = c_new.expect("scaffold clients return a variate");
                let k = u.client_id;
                let change = c_new.sub(&sc.clients[k]);
                sc.global.axpy(1.0 / n, &change);
                sc.clients[k] = c_new;
            }
        }

        self.round += 1;
        if self.round.is_multiple_of(self.config.eval_every) || self.round == self.config.rounds {
            let ev = self.evaluate()?;
            if !ev.loss.is_finite() {
                return Err(Error::ServerDivergence { round: t, what: "evaluation loss" });
            }
            log.acc = Some(ev.accuracy);
            log.eval_loss = Some(ev.loss);
        }
        log.ms = started.elapsed().as_millis() as u64;
        Ok(log)
    }

    /// Runs the remaining rounds, writing one JSON line per round and a final
    /// summary line. Lines already written survive an error.
    pub fn run_to<W: Write>(&mut self, out: &mut W) -> Result<RunSummary> {
        let io = |e| Error::io("<metrics>", e);
        while self.round < self.config.rounds {
            let log = self.step()?;
            serde_json::to_writer(&mut *out, &log).map_err(|e| io(e.into()))?;
            out.write_all(b"\n").map_err(io)?;
            out.flush().map_err(io)?;
        }
        let summary = self.summary()?;
        serde_json::to_writer(&mut *out, &SummaryLine { summary: summary.clone() }).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
        out.flush().map_err(io)?;
        Ok(summary)
    }

    /// Runs the remaining rounds in memory.
    pub fn run(&mut self) -> Result<Vec<RoundLog>> {
        let mut logs = Vec::with_capacity(self.config.rounds - self.round);
        while self.round < self.config.rounds {
            logs.push(self.step()?);
        }
        Ok(logs)
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let ev = self.evaluate()?;
        let cfg = &self.config;
        Ok(RunSummary {
            method: cfg.method.name().to_string(),
            partition: cfg.partition.label(),
            drift_isolation: serde_json::to_value(cfg.drift_isolation.mode)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            seed: cfg.seed,
            rounds: self.round,
            final_acc: ev.accuracy,
            final_eval_loss: ev.loss,
            config: cfg.fingerprint(),
        })
    }
}

/// Runs `config` and writes `metrics.jsonl` into `out_dir`.
pub fn run_experiment(config: ExperimentConfig, out_dir: &Path, threads: Option<usize>) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("metrics.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut sim = Simulator::new(config)?;
    if let Some(n) = threads {
        sim = sim.with_threads(n)?;
    }
    let mut out = BufWriter::new(file);
    sim.run_to(&mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(&path, source),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdRecord {
    pub t: usize,
    pub train_loss: f64,
    pub acc: f64,
    pub eval_loss: f64,
}

/// Full-batch gradient descent on the pooled training set with step
/// `local.eta_l`, from the same initial point as the simulator.
pub struct GdOracle {
    spec: ModelSpec,
    train: LabeledDataset,
    test: LabeledDataset,
    w: ParamVector,
    eta: f64,
    t: usize,
}

impl GdOracle {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let Setup { spec, train, test, w0 } = setup(config)?;
        Ok(GdOracle {
            spec,
            train,
            test,
            w: w0,
            eta: config.local.eta_l,
            t: 0,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.w
    }

    pub fn step(&mut self) -> Result<GdRecord> {
        let batch = Batch::full(&self.train)?;
        let (loss, grad) = self.spec.loss_and_grad(&self.w, &batch)?;
        self.w.axpy(-self.eta, &grad);
        if !self.w.is_finite() {
            return Err(Error::ServerDivergence { round: self.t, what: "parameters" });
        }
        let ev = evaluate(&self.spec, &self.w, eval_set(&self.train, &self.test))?;
        let rec = GdRecord {
            t: self.t,
            train_loss: loss,
            acc: ev.accuracy,
            eval_loss: ev.loss,
        };
        self.t += 1;
        Ok(rec)
    }
}
