//! `fedskel` subcommands.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fedskel_core::checkpoint;
use fedskel_core::config::{ExperimentConfig, StrategyKind};
use fedskel_core::federation::{self, run_experiment, summarize, RoundReport, RunSummary, SuiteData};
use fedskel_core::metrics::{self, ClientRef, EvalResult, MetricRow, Protocol, METRICS_HEADER};
use fedskel_core::model::{keys, StGcn};
use fedskel_core::synth::{self, ClientDatasetSpec, Dataset};
use fedskel_core::{Error, ParamSet32, Tensor32};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Env var naming the default output root.
pub const OUT_ENV: &str = "FEDSKEL_OUT";

/// Tail fraction used for the stability column of `compare`.
pub const COMPARE_TAIL: f64 = 0.25;

#[derive(Debug, Parser)]
#[command(name = "fedskel", version, about = "Federated skeleton action recognition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic client datasets and write caches
    Generate(Common),
    /// Run one federated experiment
    Train(Common),
    /// Run several strategies on the same data and seed
    Compare {
        #[command(flatten)]
        common: Common,
        /// Strategies to run, e.g. fedavg,fsar
        #[arg(long, value_delimiter = ',', default_value = "fedavg,fsar")]
        strategies: Vec<StrategyKind>,
    },
    /// Block similarity, coefficient drift and curve data of a finished run
    Analyze(Common),
    /// Re-evaluate the final checkpoints of a finished run
    Eval(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Concurrent client training tasks per round
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Missing(String),
}

impl CliError {
    /// 2 config, 3 runtime or non-finite abort, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config(_) | Error::Usage(_)) => 2,
            CliError::Core(Error::Io(_) | Error::Checkpoint(_)) | CliError::Io { .. } | CliError::Missing(_) => 4,
            CliError::Core(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

impl Common {
    /// The config file with command-line overrides applied in memory.
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.strategy {
            cfg.federation.strategy = s;
        }
        if let Some(r) = self.rounds {
            cfg.federation.rounds = r;
        }
        if self.jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()).into());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `--out`, then the config's `output_dir`, then `$FEDSKEL_OUT/<name>`,
    /// then `runs/<name>`.
    pub fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        if let Some(o) = &cfg.output_dir {
            return o.clone();
        }
        match std::env::var_os(OUT_ENV) {
            Some(root) => PathBuf::from(root).join(&cfg.name),
            None => PathBuf::from("runs").join(&cfg.name),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            generate(&cfg, &out)?;
            println!("wrote datasets to {}", out.join("data").display());
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            let s = train(&cfg, &out, c.jobs)?;
            println!(
                "final linear accuracy {:.4}, stability {:.4}; outputs in {}",
                s.mean_final_accuracy,
                s.mean_stability,
                out.display()
            );
        }
        Command::Compare { common, strategies } => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg);
            let table = compare(&cfg, &strategies, &out, common.jobs)?;
            print!("{}", table.text);
        }
        Command::Analyze(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            analyze(&cfg, &out)?;
            println!("analysis written to {}", out.join("analysis").display());
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            for e in eval(&cfg, &out)? {
                println!("{}", MetricRow::from(e));
            }
        }
    }
    Ok(())
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn cache_path(out: &Path, spec: &ClientDatasetSpec, unseen: bool) -> PathBuf {
    let name = if unseen {
        "unseen.bin".to_owned()
    } else {
        format!("client{}.bin", spec.client_id)
    };
    data_dir(out).join(name)
}

/// Writes every client cache and `manifest.json`.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<SuiteData<f32>> {
    let data = SuiteData::<f32>::generate(cfg)?;
    let mut entries = Vec::new();
    let all = data
        .clients
        .iter()
        .map(|c| (c, false))
        .chain(data.unseen.iter().map(|c| (c, true)));
    for ((spec, train, test), unseen) in all {
        let path = cache_path(out, spec, unseen);
        synth::write_cache(&path, spec, train, test)?;
        entries.push(serde_json::json!({
            "client": spec.client_id,
            "unseen": unseen,
            "file": path.file_name().map(|f| f.to_string_lossy().into_owned()),
            "spec_hash": spec.hash(),
            "labels": spec.labels,
            "train": train.len(),
            "test": test.len(),
        }));
    }
    let manifest = serde_json::json!({
        "name": cfg.name,
        "seed": cfg.seed,
        "n_clients": cfg.federation.n_clients,
        "clients": entries,
    });
    let path = data_dir(out).join("manifest.json");
    io(&path, fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json") + "\n"))?;
    Ok(data)
}

fn load_one(out: &Path, spec: ClientDatasetSpec, unseen: bool) -> Result<(ClientDatasetSpec, Dataset<f32>, Dataset<f32>)> {
    let path = cache_path(out, &spec, unseen);
    if path.exists() {
        if let Some((tr, te)) = synth::read_cache(&path, &spec)? {
            return Ok((spec, tr, te));
        }
    }
    let (tr, te) = synth::generate(&spec)?;
    synth::write_cache(&path, &spec, &tr, &te)?;
    Ok((spec, tr, te))
}

/// Datasets from the caches under `out`, regenerating stale or missing ones.
pub fn load_data(cfg: &ExperimentConfig, out: &Path) -> Result<SuiteData<f32>> {
    let (specs, unseen) = SuiteData::<f32>::specs(cfg)?;
    Ok(SuiteData {
        clients: specs
            .into_iter()
            .map(|s| load_one(out, s, false))
            .collect::<Result<_>>()?,
        unseen: unseen.map(|s| load_one(out, s, true)).transpose()?,
    })
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

/// Runs one experiment under `out`: metrics CSV appended per round, round
/// log, effective config and final checkpoints.
pub fn train(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunSummary> {
    io(out, fs::create_dir_all(out))?;
    let cfg_path = out.join("config.toml");
    io(&cfg_path, fs::write(&cfg_path, cfg.to_toml()))?;
    let data = load_data(cfg, out)?;
    let metrics_path = out.join("metrics.csv");
    let log_path = out.join("rounds.log");
    let mut csv = io(&metrics_path, File::create(&metrics_path))?;
    io(&metrics_path, csv.write_all(format!("{METRICS_HEADER}\n").as_bytes()))?;
    let mut log = io(&log_path, OpenOptions::new().create(true).write(true).truncate(true).open(&log_path))?;
    let mut sink_err = None;
    let result = run_experiment(cfg, data, jobs, |rep: &RoundReport| {
        let mut block = String::new();
        for row in rep.rows() {
            block.push_str(&row.to_string());
            block.push('\n');
        }
        let line = format!("round {} wall {:.3}s\n", rep.round, rep.wall_time);
        let r = csv
            .write_all(block.as_bytes())
            .and_then(|_| csv.flush())
            .and_then(|_| log.write_all(line.as_bytes()));
        if let Err(e) = r {
            sink_err = Some(CliError::Io {
                path: metrics_path.clone(),
                source: e,
            });
            return Err(Error::Usage("metrics sink failed".into()));
        }
        Ok(())
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(log, "aborted: {e}");
            return Err(e.into());
        }
    };
    let fed = &outcome.federation;
    let dir = checkpoint_dir(out);
    checkpoint::save(&dir.join("server.ckpt"), &fed.server.params)?;
    for (c, local) in fed.clients.iter().zip(&fed.last_local) {
        checkpoint::save(&dir.join(format!("client{}.ckpt", c.id)), &c.params)?;
        checkpoint::save(&dir.join(format!("client{}.local.ckpt", c.id)), local)?;
    }
    Ok(summarize(
        &outcome.reports,
        cfg.eval.final_window,
        COMPARE_TAIL,
        cfg.eval.rolling_window,
    ))
}

/// Result of `compare`.
pub struct CompareTable {
    pub summaries: Vec<(StrategyKind, RunSummary)>,
    pub csv: String,
    pub text: String,
}

/// Runs each strategy on the same data and seed.
pub fn compare(cfg: &ExperimentConfig, strategies: &[StrategyKind], out: &Path, jobs: usize) -> Result<CompareTable> {
    if strategies.is_empty() {
        return Err(Error::Config("compare needs at least one strategy".into()).into());
    }
    let mut summaries = Vec::new();
    for (i, s) in strategies.iter().enumerate() {
        let mut c = cfg.clone();
        c.federation.strategy = *s;
        let dir = out.join("compare").join(format!("{i}_{s}"));
        if !dir.join("data").exists() {
            copy_caches(out, &dir)?;
        }
        summaries.push((*s, train(&c, &dir, jobs)?));
    }
    let (csv, text) = render_compare(&summaries);
    let dir = out.join("compare");
    io(&dir, fs::create_dir_all(&dir))?;
    io(&dir, fs::write(dir.join("summary.csv"), &csv))?;
    io(&dir, fs::write(dir.join("summary.txt"), &text))?;
    Ok(CompareTable { summaries, csv, text })
}

fn copy_caches(from: &Path, to: &Path) -> Result<()> {
    let src = data_dir(from);
    if !src.exists() {
        return Ok(());
    }
    let dst = data_dir(to);
    io(&dst, fs::create_dir_all(&dst))?;
    for entry in io(&src, fs::read_dir(&src))? {
        let entry = io(&src, entry)?;
        io(&dst, fs::copy(entry.path(), dst.join(entry.file_name())))?;
    }
    Ok(())
}

/// CSV and aligned text; the delta is relative to the first strategy.
pub fn render_compare(summaries: &[(StrategyKind, RunSummary)]) -> (String, String) {
    let mut csv = String::from("strategy,client,final_accuracy,rolling_std,delta_accuracy\n");
    let mut text = format!("{:<10} {:>8} {:>14} {:>12} {:>10}\n", "strategy", "client", "final_acc", "rolling_std", "delta");
    let base = &summaries[0].1;
    for (s, sum) in summaries {
        let mut rows: Vec<(String, f64, f64, f64)> = sum
            .final_accuracy
            .iter()
            .zip(&sum.stability)
            .zip(&base.final_accuracy)
            .map(|(((id, acc), (_, st)), (_, b))| (id.to_string(), *acc, *st, acc - b))
            .collect();
        rows.push((
            "mean".into(),
            sum.mean_final_accuracy,
            sum.mean_stability,
            sum.mean_final_accuracy - base.mean_final_accuracy,
        ));
        for (client, acc, st, d) in rows {
            csv.push_str(&format!("{s},{client},{acc:.6},{st:.6},{d:+.6}\n"));
            text.push_str(&format!("{:<10} {:>8} {:>14.4} {:>12.4} {:>+10.4}\n", s.name(), client, acc, st, d));
        }
    }
    (csv, text)
}

/// One parsed metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRow {
    pub round: usize,
    pub client: String,
    pub protocol: String,
    pub metric: String,
    pub value: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<ParsedRow>> {
    let text = io(path, fs::read_to_string(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CliError::Missing(format!("{} has no metrics header", path.display())));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let parsed = (f.len() == 5)
                .then(|| Some((f[0].parse().ok()?, f[4].parse().ok()?)))
                .flatten();
            let (round, value) = parsed.ok_or_else(|| CliError::Missing(format!("malformed metrics row `{l}`")))?;
            Ok(ParsedRow {
                round,
                client: f[1].to_owned(),
                protocol: f[2].to_owned(),
                metric: f[3].to_owned(),
                value,
            })
        })
        .collect()
}

fn load_ckpt(path: &Path) -> Result<ParamSet32> {
    if !path.exists() {
        return Err(CliError::Missing(format!("missing checkpoint {}", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

/// Probe pool: `per_client` test samples of every client, fixed by the seed.
pub fn probe_pool(data: &SuiteData<f32>, per_client: usize, seed: u64) -> Vec<Tensor32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, _, test) in &data.clients {
        let k = per_client.min(test.len());
        let mut idx = sample(&mut rng, test.len(), k).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| test.samples[i].clone()));
    }
    out
}

/// Writes block CKA matrices, coefficient trajectories and drift, and
/// accuracy series under `run/analysis`.
pub fn analyze(cfg: &ExperimentConfig, run: &Path) -> Result<Vec<metrics::CkaMatrix>> {
    let dir = run.join("analysis");
    io(&dir, fs::create_dir_all(&dir))?;
    let model = StGcn::<f32>::new(cfg.model_config()?, cfg.skeleton())?;
    let ck = checkpoint_dir(run);
    let locals = (0..cfg.federation.n_clients)
        .map(|i| Ok((i, load_ckpt(&ck.join(format!("client{i}.local.ckpt")))?)))
        .collect::<Result<Vec<_>>>()?;
    let data = load_data(cfg, run)?;
    let probe = probe_pool(&data, cfg.eval.probe_per_client, cfg.seed);
    let refs: Vec<(usize, &ParamSet32)> = locals.iter().map(|(i, p)| (*i, p)).collect();
    let report = metrics::block_cka_report(&model, &refs, &probe)?;
    for m in &report {
        let p = dir.join(format!("cka_block{}.csv", m.block + 1));
        io(&p, fs::write(&p, m.to_csv()))?;
    }
    let mut trend = String::from("block,mean_offdiag_cka\n");
    for m in &report {
        trend.push_str(&format!("{},{:.6}\n", m.block + 1, m.mean_off_diagonal()));
    }
    write(&dir.join("cka_trend.csv"), &trend)?;

    let rows = read_metrics(&run.join("metrics.csv"))?;
    let mut traj = String::from("round,client,block,alpha,beta,gamma\n");
    let mut coef: std::collections::BTreeMap<(usize, String, usize), [f64; 3]> = Default::default();
    for r in rows.iter().filter(|r| r.protocol == "coef") {
        let Some((name, block)) = r.metric.split_once(".block") else { continue };
        let Ok(block) = block.parse::<usize>() else { continue };
        let slot = match name {
            "alpha" => 0,
            "beta" => 1,
            "gamma" => 2,
            _ => continue,
        };
        coef.entry((r.round, r.client.clone(), block)).or_insert([f64::NAN; 3])[slot] = r.value;
    }
    for ((round, client, block), v) in &coef {
        traj.push_str(&format!("{round},{client},{block},{:.6},{:.6},{:.6}\n", v[0], v[1], v[2]));
    }
    write(&dir.join("coefficients.csv"), &traj)?;
    let mut drift = String::from("client,block,delta_alpha,delta_beta,delta_gamma\n");
    for (id, params) in &locals {
        for b in 0..model.blocks() {
            let Some(first) = coef.get(&(0, id.to_string(), b + 1)) else { continue };
            let last: Vec<f64> = (0..3)
                .map(|k| {
                    params
                        .get(&keys::coefficient(b, k))
                        .map_or(f64::NAN, |t| t.item() as f64)
                })
                .collect();
            drift.push_str(&format!(
                "{id},{},{:.6},{:.6},{:.6}\n",
                b + 1,
                last[0] - first[0],
                last[1] - first[1],
                last[2] - first[2]
            ));
        }
    }
    write(&dir.join("coef_drift.csv"), &drift)?;

    let series = dir.join("series");
    io(&series, fs::create_dir_all(&series))?;
    let mut by_client: std::collections::BTreeMap<(String, String), Vec<(usize, f64)>> = Default::default();
    for r in rows.iter().filter(|r| r.metric == "accuracy") {
        by_client
            .entry((r.protocol.clone(), r.client.clone()))
            .or_default()
            .push((r.round, r.value));
    }
    for ((protocol, client), pts) in &by_client {
        let mut s = String::from("round,accuracy\n");
        for (r, v) in pts {
            s.push_str(&format!("{r},{v:.6}\n"));
        }
        write(&series.join(format!("{protocol}_client{client}.csv")), &s)?;
    }
    Ok(report)
}

fn write(path: &Path, text: &str) -> Result<()> {
    io(path, fs::write(path, text))
}

/// Evaluates the final checkpoints of `run`.
pub fn eval(cfg: &ExperimentConfig, run: &Path) -> Result<Vec<EvalResult>> {
    let model = StGcn::<f32>::new(cfg.model_config()?, cfg.skeleton())?;
    let ck = checkpoint_dir(run);
    let server = load_ckpt(&ck.join("server.ckpt"))?;
    let data = load_data(cfg, run)?;
    let round = cfg.federation.rounds;
    let mut out = Vec::new();
    for (spec, _, test) in &data.clients {
        let params = load_ckpt(&ck.join(format!("client{}.ckpt", spec.client_id)))?;
        out.push(EvalResult {
            protocol: Protocol::Linear,
            client: ClientRef::Client(spec.client_id),
            accuracy: metrics::linear_accuracy(&model, &params, test)?,
            round,
        });
    }
    if let Some((_, train, test)) = &data.unseen {
        let (p, mode) = federation::unseen_params(&model, &server);
        out.push(EvalResult {
            protocol: Protocol::Knn,
            client: ClientRef::Unseen,
            accuracy: metrics::knn_accuracy(&model, &p, mode, train, test, cfg.eval.knn_k)?,
            round,
        });
    }
    let mut csv = format!("{METRICS_HEADER}\n");
    for e in &out {
        csv.push_str(&format!("{}\n", MetricRow::from(*e)));
    }
    write(&run.join("eval.csv"), &csv)?;
    Ok(out)
}
