//! Client/server rounds: local training, upload, aggregation, broadcast.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::config::{ExperimentConfig, StrategyKind};
use crate::error::{Error, Result};
use crate::metrics::{self, ClientRef, EvalResult, MetricRow, Protocol};
use crate::mkd::{build_teacher_streams, dual_ce_loss, kd_loss, MkdConfig};
use crate::model::{keys, BnMode, ConvMode, StGcn};
use crate::optim::SgdMomentum;
use crate::params::{is_running_stat, is_unique_key, Namespace, ParamSet};
use crate::scalar::Scalar;
use crate::synth::{self, ClientDatasetSpec, Dataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregationStrategy {
    pub kind: StrategyKind,
    /// Server momentum `β_s`; only the fsar strategy uses it.
    pub server_momentum: f64,
    /// Proximal coefficient of FedProx.
    pub mu: f64,
}

impl AggregationStrategy {
    pub fn new(kind: StrategyKind, server_momentum: f64, mu: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&server_momentum) {
            return Err(Error::Config(format!("server momentum must lie in [0, 1), got {server_momentum}")));
        }
        if mu < 0.0 {
            return Err(Error::Config(format!("mu must be nonnegative, got {mu}")));
        }
        Ok(Self {
            kind,
            server_momentum,
            mu,
        })
    }

    /// Whether `key` travels between clients and server.
    pub fn is_aggregatable(&self, key: &str) -> bool {
        match Namespace::of_key(key) {
            Some(Namespace::Backbone | Namespace::Inflected) => true,
            Some(Namespace::BatchNorm) => self.kind != StrategyKind::FedBn,
            _ => false,
        }
    }

    fn momentum(&self) -> f64 {
        if self.kind == StrategyKind::Fsar {
            self.server_momentum
        } else {
            0.0
        }
    }

    /// Weight of the parameter-distance penalty.
    pub fn reg_weight(&self, lambda_reg: f64) -> f64 {
        match self.kind {
            StrategyKind::Fsar => lambda_reg,
            StrategyKind::FedProx => self.mu,
            _ => 0.0,
        }
    }
}

/// Local optimization settings shared by every client.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lambda_ce: f64,
    pub lambda_kd: f64,
    pub lambda_reg: f64,
    pub mkd: MkdConfig,
}

impl LocalHyper {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            learning_rate: cfg.federation.learning_rate,
            momentum: cfg.federation.momentum,
            weight_decay: cfg.federation.weight_decay,
            local_epochs: cfg.federation.local_epochs,
            batch_size: cfg.federation.batch_size,
            lambda_ce: cfg.loss.lambda_ce,
            lambda_kd: cfg.loss.lambda_kd,
            lambda_reg: cfg.loss.lambda_reg,
            mkd: cfg.mkd(),
        }
    }
}

/// Mean loss components over the steps of one local update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub kd: f64,
    pub reg: f64,
    pub total: f64,
    pub steps: usize,
}

pub struct ClientState<T> {
    pub id: usize,
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub params: ParamSet<T>,
    pub optimizer: SgdMomentum<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(id: usize, train: Dataset<T>, test: Dataset<T>, params: ParamSet<T>, model: &StGcn<T>, hyper: &LocalHyper, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data(format!("client {id} has no training samples")));
        }
        let mut optimizer = SgdMomentum::new(T::of(hyper.learning_rate), T::of(hyper.momentum), T::of(hyper.weight_decay))?;
        optimizer.register(params.keys().filter(|k| model.is_trainable(k)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7 + id as u64);
        Ok(Self {
            id,
            train,
            test,
            params,
            optimizer,
            rng,
        })
    }

    /// Sample count `n_i` used as the aggregation weight.
    pub fn n(&self) -> usize {
        self.train.len()
    }

    /// The aggregatable part of the client's parameters.
    pub fn upload(&self, strategy: &AggregationStrategy) -> ParamSet<T> {
        self.params.filter(|k| strategy.is_aggregatable(k))
    }
}

pub struct ServerState<T> {
    pub params: ParamSet<T>,
    velocity: BTreeMap<String, Tensor<T>>,
    pub round: usize,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(params: ParamSet<T>) -> Self {
        Self {
            params,
            velocity: BTreeMap::new(),
            round: 0,
        }
    }

    pub fn velocity(&self, key: &str) -> Option<&Tensor<T>> {
        self.velocity.get(key)
    }
}

/// `½‖W_g − W_i‖²` over `keys` and its gradient with respect to `W_i`.
pub fn reg_loss<T: Scalar>(server: &ParamSet<T>, client: &ParamSet<T>, keys: &[String]) -> Result<(f64, ParamSet<T>)> {
    let mut value = 0.0;
    let mut grads = ParamSet::new();
    for k in keys {
        let (g, c) = (server.require(k)?, client.require(k)?);
        let diff: Vec<T> = c.data().iter().zip(g.data()).map(|(&ci, &gi)| ci - gi).collect();
        value += diff.iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>();
        grads.insert(k.clone(), Tensor::from_vec(c.shape(), diff)?);
    }
    Ok((0.5 * value, grads))
}

fn non_finite(client: usize, step: usize, what: &str, v: f64) -> Error {
    Error::NonFinite(format!("client {client}, step {step}: {what} is {v}"))
}

/// K local epochs of SGD on `λ₁·CE + λ₂·KD + λ·Reg`.
pub fn local_train<T: Scalar>(
    model: &StGcn<T>,
    client: &mut ClientState<T>,
    server: &ParamSet<T>,
    hyper: &LocalHyper,
    strategy: &AggregationStrategy,
) -> Result<LossParts> {
    let fsar = strategy.kind == StrategyKind::Fsar;
    let reg_w = strategy.reg_weight(hyper.lambda_reg);
    let reg_keys: Vec<String> = client
        .params
        .keys()
        .filter(|k| strategy.is_aggregatable(k) && model.is_trainable(k) && server.contains(k))
        .map(str::to_owned)
        .collect();
    let registered: Vec<String> = client.optimizer.registered().map(str::to_owned).collect();
    let (l_ce, l_kd) = (T::of(hyper.lambda_ce), T::of(hyper.lambda_kd));
    let mut parts = LossParts::default();
    let mut g = Graph::new();
    let mut order: Vec<usize> = (0..client.n()).collect();
    for _ in 0..hyper.local_epochs {
        order.shuffle(&mut client.rng);
        for idx in order.chunks(hyper.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let step = parts.steps;
            g.clear();
            let bound = client.params.bind(&mut g, |k| model.is_trainable(k));
            let (x, labels) = client.train.batch(idx)?;
            let xi = g.constant(x.clone());
            let trace = model.forward(&mut g, &bound, xi, BnMode::Batch)?;
            let student = trace.logits.ok_or_else(|| Error::Usage("classifier is not bound".into()))?;
            let streams = if fsar {
                build_teacher_streams(model, server, &client.params, &mut g, &bound, &x, &hyper.mkd)?
            } else {
                Vec::new()
            };
            let ce = dual_ce_loss(&mut g, &streams, student, &labels)?;
            let kd = kd_loss(&mut g, &streams, student, hyper.mkd.kd_temperature)?;
            let ce_v = g.value(ce).item().as_f64();
            let kd_v = g.value(kd).item().as_f64();
            let (reg_v, reg_grads) = if reg_w > 0.0 {
                reg_loss(server, &client.params, &reg_keys)?
            } else {
                (0.0, ParamSet::new())
            };
            for (what, v) in [("CE loss", ce_v), ("KD loss", kd_v), ("Reg loss", reg_v)] {
                if !v.is_finite() {
                    return Err(non_finite(client.id, step, what, v));
                }
            }
            let a = g.scale(ce, l_ce);
            let b = g.scale(kd, l_kd);
            let total = g.add(a, b)?;
            g.backward(total)?;
            let mut grads = bound.grads(&g);
            for k in &registered {
                if !grads.contains(k) {
                    grads.insert(k.clone(), Tensor::zeros(client.params.require(k)?.shape()));
                }
            }
            let w = T::of(reg_w);
            for (k, rg) in reg_grads.iter() {
                let gk = grads.get_mut(k).expect("registered");
                for (gi, ri) in gk.data_mut().iter_mut().zip(rg.data()) {
                    *gi += w * *ri;
                }
            }
            if let Some((k, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite(format!("client {}, step {step}: gradient of `{k}` is not finite", client.id)));
            }
            client.optimizer.step(&mut client.params, &mut grads)?;
            model.update_running_stats(&mut client.params, &trace.bn_stats);
            parts.ce += ce_v;
            parts.kd += kd_v;
            parts.reg += reg_v;
            parts.total += hyper.lambda_ce * ce_v + hyper.lambda_kd * kd_v + reg_w * reg_v;
            parts.steps += 1;
        }
    }
    if parts.steps > 0 {
        let n = parts.steps as f64;
        parts.ce /= n;
        parts.kd /= n;
        parts.reg /= n;
        parts.total /= n;
    }
    Ok(parts)
}

/// One client's contribution to an aggregation.
pub struct Upload<'a, T> {
    pub client: usize,
    pub params: &'a ParamSet<T>,
    pub n: usize,
}

fn key_diff<T: Scalar>(want: &ParamSet<T>, got: &ParamSet<T>) -> (Vec<String>, Vec<String>) {
    let missing = want.keys().filter(|k| !got.contains(k)).map(str::to_owned).collect();
    let extra = got.keys().filter(|k| !want.contains(k)).map(str::to_owned).collect();
    (missing, extra)
}

/// Sample-weighted mean of the uploads in ascending client order, followed
/// by the server momentum recursion when enabled.
pub fn aggregate<T: Scalar>(server: &mut ServerState<T>, uploads: &[Upload<'_, T>], strategy: &AggregationStrategy) -> Result<()> {
    if uploads.is_empty() {
        return Err(Error::Protocol("no uploads to aggregate".into()));
    }
    let mut order: Vec<&Upload<'_, T>> = uploads.iter().collect();
    order.sort_by_key(|u| u.client);
    for u in &order {
        if let Some(k) = u.params.keys().find(|k| is_unique_key(k)) {
            return Err(Error::Protocol(format!(
                "client {} uploaded private topology key `{k}`",
                u.client
            )));
        }
        let (missing, extra) = key_diff(&server.params, u.params);
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Protocol(format!(
                "client {} upload key mismatch: missing {missing:?}, extra {extra:?}",
                u.client
            )));
        }
    }
    let total: usize = order.iter().map(|u| u.n).sum();
    if total == 0 {
        return Err(Error::Protocol("uploads carry zero samples".into()));
    }
    let beta = T::of(strategy.momentum());
    let keys: Vec<String> = server.params.keys().map(str::to_owned).collect();
    for k in keys {
        let cur = server.params.require(&k)?;
        let mut acc = vec![T::zero(); cur.numel()];
        for u in &order {
            let w = T::of(u.n as f64 / total as f64);
            let t = u.params.require(&k)?;
            if t.shape() != cur.shape() {
                return Err(Error::Protocol(format!(
                    "client {} `{k}` has shape {:?}, server {:?}",
                    u.client,
                    t.shape(),
                    cur.shape()
                )));
            }
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += w * v;
            }
        }
        let next = if beta > T::zero() && !is_running_stat(&k) {
            let v = server
                .velocity
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(cur.shape()));
            cur.data()
                .iter()
                .zip(&acc)
                .zip(v.data_mut())
                .map(|((&g, &a), vi)| {
                    *vi = beta * *vi + (g - a);
                    g - *vi
                })
                .collect()
        } else {
            acc
        };
        let shape = cur.shape().to_vec();
        server.params.insert(k, Tensor::new(shape, next)?);
    }
    server.round += 1;
    Ok(())
}

/// Copies every server value into every client.
pub fn broadcast<T: Scalar>(server: &ServerState<T>, clients: &mut [ClientState<T>]) {
    for c in clients {
        c.params.overlay(&server.params);
    }
}

/// Everything observed during one round.
#[derive(Clone, Debug, Default)]
pub struct RoundReport {
    pub round: usize,
    pub losses: Vec<(usize, LossParts)>,
    pub evals: Vec<EvalResult>,
    /// `(client, block, [α, β, γ])` after local training.
    pub coefficients: Vec<(usize, usize, [f64; 3])>,
    pub wall_time: f64,
}

impl RoundReport {
    /// Metric CSV rows. Wall time is left out so that reruns match byte
    /// for byte.
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for (c, l) in &self.losses {
            for (name, v) in [("ce", l.ce), ("kd", l.kd), ("reg", l.reg), ("total", l.total)] {
                rows.push(MetricRow {
                    round: self.round,
                    client: ClientRef::Client(*c),
                    protocol: Protocol::Train,
                    metric: name.into(),
                    value: v,
                });
            }
        }
        for (c, b, coef) in &self.coefficients {
            for (name, v) in ["alpha", "beta", "gamma"].iter().zip(coef) {
                rows.push(MetricRow {
                    round: self.round,
                    client: ClientRef::Client(*c),
                    protocol: Protocol::Coef,
                    metric: format!("{name}.block{}", b + 1),
                    value: *v,
                });
            }
        }
        rows.extend(self.evals.iter().map(|e| MetricRow::from(*e)));
        rows
    }
}

/// Data of one federation: per-client `(spec, train, test)` and the
/// optional unseen client.
pub struct SuiteData<T> {
    pub clients: Vec<(ClientDatasetSpec, Dataset<T>, Dataset<T>)>,
    pub unseen: Option<(ClientDatasetSpec, Dataset<T>, Dataset<T>)>,
}

impl<T: Scalar> SuiteData<T> {
    pub fn specs(cfg: &ExperimentConfig) -> Result<(Vec<ClientDatasetSpec>, Option<ClientDatasetSpec>)> {
        let p = cfg.suite_params();
        let specs = synth::make_federation_suite(cfg.federation.n_clients, &p, cfg.seed)?;
        let unseen = cfg
            .eval
            .unseen_client
            .map(|id| synth::unseen_spec(id, &p, cfg.seed))
            .transpose()?;
        Ok((specs, unseen))
    }

    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let (specs, unseen) = Self::specs(cfg)?;
        let gen = |s: ClientDatasetSpec| -> Result<_> {
            let (tr, te) = synth::generate(&s)?;
            Ok((s, tr, te))
        };
        Ok(Self {
            clients: specs.into_iter().map(gen).collect::<Result<_>>()?,
            unseen: unseen.map(gen).transpose()?,
        })
    }
}

/// A running federation.
pub struct Federation<T> {
    pub model: StGcn<T>,
    pub strategy: AggregationStrategy,
    pub hyper: LocalHyper,
    pub server: ServerState<T>,
    pub clients: Vec<ClientState<T>>,
    pub unseen: Option<(Dataset<T>, Dataset<T>)>,
    pub knn_k: usize,
    pub eval_interval: usize,
    /// Client parameters right after the latest local training.
    pub last_local: Vec<ParamSet<T>>,
    pool: Option<rayon::ThreadPool>,
}

fn client_seed(seed: u64, id: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(500 + id as u64);
    rand::Rng::random(&mut rng)
}

impl<T: Scalar> Federation<T> {
    pub fn new(cfg: &ExperimentConfig, data: SuiteData<T>, jobs: usize) -> Result<Self> {
        cfg.validate()?;
        let model = StGcn::new(cfg.model_config()?, cfg.skeleton())?;
        let strategy = AggregationStrategy::new(cfg.federation.strategy, cfg.federation.server_momentum, cfg.federation.mu)?;
        let hyper = LocalHyper::from_config(cfg);
        let shared = model.init_shared(cfg.seed);
        let server = ServerState::new(shared.filter(|k| strategy.is_aggregatable(k)));
        let clients = data
            .clients
            .into_iter()
            .map(|(spec, train, test)| {
                let mut p = shared.clone();
                p.overlay(&model.init_local(client_seed(cfg.seed, spec.client_id)));
                ClientState::new(spec.client_id, train, test, p, &model, &hyper, cfg.seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?,
            )
        } else {
            None
        };
        let last_local = clients.iter().map(|c| c.params.clone()).collect();
        Ok(Self {
            model,
            strategy,
            hyper,
            server,
            clients,
            unseen: data.unseen.map(|(_, tr, te)| (tr, te)),
            knn_k: cfg.eval.knn_k,
            eval_interval: cfg.eval.interval,
            last_local,
            pool,
        })
    }

    /// Local training of every client against the current server snapshot.
    pub fn train_clients(&mut self) -> Result<Vec<(usize, LossParts)>> {
        let (model, server, hyper, strategy) = (&self.model, &self.server.params, &self.hyper, &self.strategy);
        let run = |c: &mut ClientState<T>| local_train(model, c, server, hyper, strategy).map(|l| (c.id, l));
        let out: Vec<Result<(usize, LossParts)>> = match &self.pool {
            Some(pool) => pool.install(|| self.clients.par_iter_mut().map(run).collect()),
            None => self.clients.iter_mut().map(run).collect(),
        };
        let out = out.into_iter().collect::<Result<Vec<_>>>()?;
        self.last_local = self.clients.iter().map(|c| c.params.clone()).collect();
        Ok(out)
    }

    pub fn aggregate(&mut self) -> Result<()> {
        let uploads: Vec<ParamSet<T>> = self.clients.iter().map(|c| c.upload(&self.strategy)).collect();
        let list: Vec<Upload<'_, T>> = self
            .clients
            .iter()
            .zip(&uploads)
            .map(|(c, p)| Upload {
                client: c.id,
                params: p,
                n: c.n(),
            })
            .collect();
        aggregate(&mut self.server, &list, &self.strategy)
    }

    pub fn broadcast(&mut self) {
        broadcast(&self.server, &mut self.clients);
    }

    /// `(client, block, [α, β, γ])` of every client.
    pub fn coefficients(&self) -> Vec<(usize, usize, [f64; 3])> {
        if self.model.config.conv_mode != ConvMode::Ats {
            return Vec::new();
        }
        let mut out = Vec::new();
        for c in &self.clients {
            for b in 0..self.model.blocks() {
                let v = std::array::from_fn(|i| {
                    c.params
                        .get(&keys::coefficient(b, i))
                        .map_or(f64::NAN, |t| t.item().as_f64())
                });
                out.push((c.id, b, v));
            }
        }
        out
    }

    pub fn evaluate(&self, round: usize) -> Result<Vec<EvalResult>> {
        let mut out = Vec::new();
        for c in &self.clients {
            let acc = metrics::linear_accuracy(&self.model, &c.params, &c.test)?;
            out.push(EvalResult {
                protocol: Protocol::Linear,
                client: ClientRef::Client(c.id),
                accuracy: acc,
                round,
            });
        }
        if let Some((train, test)) = &self.unseen {
            let (p, mode) = unseen_params(&self.model, &self.server.params);
            let acc = metrics::knn_accuracy(&self.model, &p, mode, train, test, self.knn_k)?;
            out.push(EvalResult {
                protocol: Protocol::Knn,
                client: ClientRef::Unseen,
                accuracy: acc,
                round,
            });
        }
        Ok(out)
    }

    /// Local training, aggregation, broadcast, then evaluation when due.
    pub fn run_round(&mut self, round: usize, last: bool) -> Result<RoundReport> {
        let start = Instant::now();
        let losses = self.train_clients()?;
        let coefficients = self.coefficients();
        self.aggregate()?;
        self.broadcast();
        let evals = if round % self.eval_interval == 0 || last {
            self.evaluate(round)?
        } else {
            Vec::new()
        };
        Ok(RoundReport {
            round,
            losses,
            evals,
            coefficients,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }
}

/// Parameters for evaluating server features on data no client owns: the
/// server backbone with initial coefficients and no private topology. When
/// the server holds no batch norm state, batch statistics are used.
pub fn unseen_params<T: Scalar>(model: &StGcn<T>, server: &ParamSet<T>) -> (ParamSet<T>, BnMode) {
    let mut p = server.clone();
    if model.config.conv_mode == ConvMode::Ats {
        for b in 0..model.blocks() {
            for (i, c) in model.config.coefficients.iter().enumerate() {
                p.insert(keys::coefficient(b, i), Tensor::scalar(T::of(*c)));
            }
        }
    }
    let mode = if p.contains(&keys::bn(0, "gamma")) {
        BnMode::Running
    } else {
        p.overlay(&model.init_shared(0).filter(|k| k.starts_with("bn.")));
        BnMode::Batch
    };
    (p, mode)
}

/// Headline numbers of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    /// Mean accuracy over the final eval points, per client.
    pub final_accuracy: Vec<(usize, f64)>,
    pub mean_final_accuracy: f64,
    /// Rolling standard deviation over the tail of the run, per client.
    pub stability: Vec<(usize, f64)>,
    pub mean_stability: f64,
    /// Final k-NN accuracy on the unseen client, when evaluated.
    pub knn_final: Option<f64>,
}

/// Summarizes linear accuracy: the final value is the mean of the last
/// `final_window` eval points; stability is the rolling standard deviation
/// (window `rolling_window`) over the trailing `tail_fraction` of points.
pub fn summarize(reports: &[RoundReport], final_window: usize, tail_fraction: f64, rolling_window: usize) -> RunSummary {
    let series = accuracy_series(reports, Protocol::Linear);
    let mut final_accuracy = Vec::new();
    let mut stability = Vec::new();
    for (c, pts) in &series {
        let ClientRef::Client(id) = c else { continue };
        let acc: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let last = &acc[acc.len().saturating_sub(final_window)..];
        final_accuracy.push((*id, last.iter().sum::<f64>() / last.len().max(1) as f64));
        stability.push((*id, metrics::rolling_std(metrics::tail(&acc, tail_fraction), rolling_window)));
    }
    let mean = |v: &[(usize, f64)]| v.iter().map(|p| p.1).sum::<f64>() / v.len().max(1) as f64;
    let knn = accuracy_series(reports, Protocol::Knn);
    RunSummary {
        mean_final_accuracy: mean(&final_accuracy),
        mean_stability: mean(&stability),
        final_accuracy,
        stability,
        knn_final: knn.get(&ClientRef::Unseen).and_then(|s| s.last()).map(|p| p.1),
    }
}

/// Final state of a finished experiment.
pub struct ExperimentOutcome<T> {
    pub reports: Vec<RoundReport>,
    pub federation: Federation<T>,
}

/// Runs `cfg.federation.rounds` rounds; `observer` sees every report as
/// soon as its round completes, so partial results survive an abort.
pub fn run_experiment<T: Scalar>(
    cfg: &ExperimentConfig,
    data: SuiteData<T>,
    jobs: usize,
    mut observer: impl FnMut(&RoundReport) -> Result<()>,
) -> Result<ExperimentOutcome<T>> {
    let mut fed = Federation::new(cfg, data, jobs)?;
    let initial = RoundReport {
        round: 0,
        coefficients: fed.coefficients(),
        ..RoundReport::default()
    };
    observer(&initial)?;
    let mut reports = vec![initial];
    let rounds = cfg.federation.rounds;
    for r in 1..=rounds {
        let rep = fed.run_round(r, r == rounds)?;
        observer(&rep)?;
        reports.push(rep);
    }
    Ok(ExperimentOutcome {
        reports,
        federation: fed,
    })
}

/// Per-eval-point accuracy of each client, `(client, [(round, acc)])`.
pub fn accuracy_series(reports: &[RoundReport], protocol: Protocol) -> BTreeMap<ClientRef, Vec<(usize, f64)>> {
    let mut out: BTreeMap<ClientRef, Vec<(usize, f64)>> = BTreeMap::new();
    for r in reports {
        for e in r.evals.iter().filter(|e| e.protocol == protocol) {
            out.entry(e.client).or_default().push((e.round, e.accuracy));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("backbone.w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    fn server(v: f64) -> ServerState<f64> {
        ServerState::new(scalar_set(v))
    }

    fn fedavg() -> AggregationStrategy {
        AggregationStrategy::new(StrategyKind::FedAvg, 0.0, 0.0).unwrap()
    }

    #[test]
    fn weighted_mean() {
        let (a, b) = (scalar_set(1.0), scalar_set(5.0));
        let mut s = server(0.0);
        aggregate(
            &mut s,
            &[Upload { client: 0, params: &a, n: 1 }, Upload { client: 1, params: &b, n: 3 }],
            &fedavg(),
        )
        .unwrap();
        assert_eq!(s.params.get("backbone.w").unwrap().item(), 4.0);
    }

    #[test]
    fn single_client_copies() {
        let a = scalar_set(0.123456789);
        let mut s = server(7.0);
        aggregate(&mut s, &[Upload { client: 3, params: &a, n: 11 }], &fedavg()).unwrap();
        assert_eq!(s.params, a);
    }

    #[test]
    fn server_momentum_hand_unrolled() {
        let strat = AggregationStrategy::new(StrategyKind::Fsar, 0.9, 0.0).unwrap();
        let up = scalar_set(1.0);
        let mut s = server(0.0);
        let list = [Upload { client: 0, params: &up, n: 2 }];
        aggregate(&mut s, &list, &strat).unwrap();
        // Δ = 0 − 1, v = −1, w = 1
        assert_eq!(s.params.get("backbone.w").unwrap().item(), 1.0);
        aggregate(&mut s, &list, &strat).unwrap();
        // Δ = 0, v = −0.9, w = 1.9
        assert!((s.params.get("backbone.w").unwrap().item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn unique_key_is_protocol_error() {
        let mut up = scalar_set(1.0);
        up.insert("um.block0.s0", Tensor::zeros(&[2, 2]));
        let mut s = server(0.0);
        let err = aggregate(&mut s, &[Upload { client: 0, params: &up, n: 1 }], &fedavg()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn key_mismatch_lists_keys() {
        let mut up = scalar_set(1.0);
        up.insert("backbone.extra", Tensor::zeros(&[1]));
        let mut s = server(0.0);
        let err = aggregate(&mut s, &[Upload { client: 0, params: &up, n: 1 }], &fedavg()).unwrap_err();
        assert!(err.to_string().contains("backbone.extra"));
    }

    #[test]
    fn reg_loss_hand_value() {
        let keys = vec!["backbone.w".to_owned()];
        let (v, g) = reg_loss(&scalar_set(3.0), &scalar_set(1.0), &keys).unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g.get("backbone.w").unwrap().item(), -2.0);
        let (v, _) = reg_loss(&scalar_set(3.0), &scalar_set(3.0), &keys).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn aggregatable_namespaces() {
        let s = fedavg();
        assert!(s.is_aggregatable("backbone.block0.w0"));
        assert!(s.is_aggregatable("im.block0.s0"));
        assert!(s.is_aggregatable("bn.block0.running_mean"));
        assert!(!s.is_aggregatable("um.block0.s0"));
        assert!(!s.is_aggregatable("coef.block0.alpha"));
        assert!(!s.is_aggregatable("classifier.weight"));
        let bn = AggregationStrategy::new(StrategyKind::FedBn, 0.0, 0.0).unwrap();
        assert!(!bn.is_aggregatable("bn.block0.gamma"));
    }
}
