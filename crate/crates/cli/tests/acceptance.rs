//! End-to-end acceptance run on the desk suite. Prints one PASS/FAIL line
//! per criterion and exits nonzero when any criterion fails.

#[path = "../../core/tests/support/gradsuite.rs"]
mod gradsuite;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fedskel_cli::{analyze, load_data, read_metrics, train};
use fedskel_core::autodiff::Graph;
use fedskel_core::checkpoint;
use fedskel_core::config::{ExperimentConfig, StrategyKind};
use fedskel_core::federation::{aggregate, run_experiment, AggregationStrategy, Federation, ServerState, SuiteData, Upload};
use fedskel_core::metrics::{self, rolling_std, tail};
use fedskel_core::mkd::{build_teacher_streams, kd_loss};
use fedskel_core::model::{keys, BnMode, StGcn};
use fedskel_core::params::{is_unique_key, ParamSet};
use fedskel_core::synth::Dataset;
use fedskel_core::topology::{CoefficientMode, PARTITIONS};
use fedskel_core::Tensor32;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(120);
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
/// fsar must beat fedavg by this much mean final accuracy.
const FSAR_MARGIN: f64 = 0.05;
/// Frozen from the committed calibration run (fsar 0.873 mean final).
const FSAR_FLOOR: f64 = 0.80;
const TIE: f64 = 0.005;
const STRICT: f64 = 0.02;
const CKA_INVERSION: f64 = 0.02;
const STABILITY_TAIL: f64 = 0.5;
const ISOLATION_ROUNDS: usize = 50;
const PROX_ROUNDS: usize = 10;

fn desk() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::load(&path).expect("desk config")
}

struct Criterion {
    id: usize,
    title: &'static str,
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Runs a criterion, turning a panic into a failure.
fn judge(c: Criterion, f: impl FnOnce() -> Outcome, failures: &mut usize) {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    if !out.pass {
        *failures += 1;
    }
    println!(
        "{} criterion {:>2} {}: {} ({:.1}s)",
        if out.pass { "PASS" } else { "FAIL" },
        c.id,
        c.title,
        out.detail,
        start.elapsed().as_secs_f64()
    );
}

fn note(title: &str, detail: String) {
    println!("NOTE {title}: {detail}");
}

/// Linear accuracy per eval point for each client, from a metrics CSV.
fn linear_series(run: &Path) -> BTreeMap<usize, Vec<f64>> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in read_metrics(&run.join("metrics.csv")).expect("metrics") {
        if r.protocol == "linear" && r.metric == "accuracy" {
            out.entry(r.client.parse().expect("client id")).or_default().push(r.value);
        }
    }
    out
}

fn knn_final(run: &Path) -> Option<f64> {
    read_metrics(&run.join("metrics.csv"))
        .expect("metrics")
        .into_iter()
        .filter(|r| r.protocol == "knn")
        .last()
        .map(|r| r.value)
}

#[derive(Clone, Debug)]
struct RunStats {
    dir: PathBuf,
    cfg: ExperimentConfig,
    per_client: Vec<f64>,
    final_mean: f64,
    stability: f64,
    per_client_stability: Vec<f64>,
}

impl RunStats {
    fn load(dir: PathBuf, cfg: ExperimentConfig) -> Self {
        let series = linear_series(&dir);
        let w = cfg.eval.final_window;
        let per_client: Vec<f64> = series
            .values()
            .map(|s| {
                let last = &s[s.len().saturating_sub(w)..];
                last.iter().sum::<f64>() / last.len() as f64
            })
            .collect();
        let per_client_stability: Vec<f64> = series
            .values()
            .map(|s| rolling_std(tail(s, STABILITY_TAIL), cfg.eval.rolling_window))
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Self {
            final_mean: mean(&per_client),
            stability: mean(&per_client_stability),
            per_client,
            per_client_stability,
            dir,
            cfg,
        }
    }

    fn brief(&self) -> String {
        let pc: Vec<String> = self.per_client.iter().map(|a| format!("{a:.3}")).collect();
        format!("{:.4} [{}]", self.final_mean, pc.join(" "))
    }
}

fn desk_run(root: &Path, name: &str, edit: impl FnOnce(&mut ExperimentConfig)) -> RunStats {
    let mut cfg = desk();
    edit(&mut cfg);
    cfg.validate().expect("variant config");
    let dir = root.join(name);
    let start = Instant::now();
    train(&cfg, &dir, 1).unwrap_or_else(|e| panic!("{name}: {e}"));
    let stats = RunStats::load(dir, cfg);
    println!("     run {name:<14} final {} stability {:.4} in {:.0}s", stats.brief(), stats.stability, start.elapsed().as_secs_f64());
    stats
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut failed = Vec::new();
    let suites = gradsuite::OPS
        .iter()
        .copied()
        .chain([("full_two_block_model", gradsuite::full_two_block_model as fn())]);
    for (name, f) in suites {
        if catch_unwind(f).is_err() {
            failed.push(name);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failed.is_empty() && elapsed < GRAD_SUITE_BUDGET,
        format!("{} suites, failed {failed:?}, {:.1}s of {}s budget", gradsuite::OPS.len() + 1, elapsed.as_secs_f64(), GRAD_SUITE_BUDGET.as_secs()),
    )
}

fn criterion_aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let strategy = AggregationStrategy::new(StrategyKind::FedAvg, 0.0, 0.0).unwrap();
    let mut mismatches = 0;
    for _ in 0..100 {
        let clients = rng.random_range(1..8);
        let ws: Vec<f32> = (0..clients).map(|_| rng.random_range(-5.0..5.0)).collect();
        let ns: Vec<usize> = (0..clients).map(|_| rng.random_range(1..2000)).collect();
        let sets: Vec<ParamSet<f32>> = ws
            .iter()
            .map(|&w| {
                let mut p = ParamSet::new();
                p.insert("backbone.w", Tensor32::scalar(w));
                p
            })
            .collect();
        let mut uploads: Vec<Upload<'_, f32>> = sets
            .iter()
            .zip(&ns)
            .enumerate()
            .map(|(i, (p, &n))| Upload { client: i, params: p, n })
            .collect();
        uploads.shuffle(&mut rng);
        let mut server = ServerState::new(sets[0].clone());
        aggregate(&mut server, &uploads, &strategy).unwrap();
        let total: usize = ns.iter().sum();
        let want = ws
            .iter()
            .zip(&ns)
            .fold(0.0f32, |acc, (&w, &n)| acc + (n as f64 / total as f64) as f32 * w);
        if server.params.get("backbone.w").unwrap().item().to_bits() != want.to_bits() {
            mismatches += 1;
        }
    }
    let trajectory = |s: StrategyKind| {
        let mut cfg = desk();
        cfg.federation.strategy = s;
        cfg.federation.rounds = PROX_ROUNDS;
        cfg.federation.mu = 0.0;
        let data = SuiteData::<f32>::generate(&cfg).unwrap();
        let mut rows = String::new();
        let out = run_experiment(&cfg, data, 1, |r| {
            for row in r.rows() {
                rows.push_str(&format!("{row}\n"));
            }
            Ok(())
        })
        .unwrap();
        let mut bytes = checkpoint::encode(&out.federation.server.params);
        for c in &out.federation.clients {
            bytes.extend(checkpoint::encode(&c.params));
        }
        (rows, bytes)
    };
    let avg = trajectory(StrategyKind::FedAvg);
    let prox = trajectory(StrategyKind::FedProx);
    let bitwise = avg == prox;
    verdict(
        mismatches == 0 && bitwise,
        format!("{mismatches}/100 weighted-mean mismatches; fedprox(mu=0) vs fedavg over {PROX_ROUNDS} rounds bitwise equal: {bitwise}"),
    )
}

fn criterion_isolation() -> Outcome {
    let mut cfg = desk();
    cfg.federation.strategy = StrategyKind::Fsar;
    cfg.federation.rounds = ISOLATION_ROUNDS;
    let data = SuiteData::<f32>::generate(&cfg).unwrap();
    let mut fed = Federation::new(&cfg, data, 1).unwrap();
    let blocks = fed.model.blocks();
    let mut problems = Vec::new();
    let mut checks = 0usize;
    for round in 1..=ISOLATION_ROUNDS {
        let teacher = checkpoint::encode(&fed.server.params);
        fed.train_clients().unwrap();
        if checkpoint::encode(&fed.server.params) != teacher {
            problems.push(format!("round {round}: server changed during local training"));
        }
        fed.aggregate().unwrap();
        let bytes = checkpoint::encode(&fed.server.params);
        let leaked: Vec<String> = checkpoint::manifest_keys(&bytes)
            .unwrap()
            .into_iter()
            .filter(|k| is_unique_key(k))
            .collect();
        if !leaked.is_empty() {
            problems.push(format!("round {round}: server holds {leaked:?}"));
        }
        let before: Vec<Vec<Tensor32>> = fed
            .clients
            .iter()
            .map(|c| (0..blocks).flat_map(|b| (0..PARTITIONS).map(move |s| keys::unique(b, s))).map(|k| c.params.require(&k).unwrap().clone()).collect())
            .collect();
        fed.broadcast();
        for (c, u) in fed.clients.iter().zip(&before) {
            let after: Vec<&Tensor32> = (0..blocks)
                .flat_map(|b| (0..PARTITIONS).map(move |s| keys::unique(b, s)))
                .map(|k| c.params.get(&k).unwrap())
                .collect();
            for (a, b) in after.iter().zip(u) {
                checks += 1;
                if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    problems.push(format!("round {round}: client {} U changed by broadcast", c.id));
                }
            }
            for b in 0..blocks {
                for s in 0..PARTITIONS {
                    let k = keys::inflected(b, s);
                    let server = fed.server.params.require(&k).unwrap();
                    let mine = c.params.require(&k).unwrap();
                    checks += 1;
                    if server.data().iter().zip(mine.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                        problems.push(format!("round {round}: client {} `{k}` differs from server", c.id));
                    }
                }
            }
        }
    }
    verdict(
        problems.is_empty(),
        format!("{ISOLATION_ROUNDS} rounds, {checks} matrix checks, problems {:?}", problems.iter().take(3).collect::<Vec<_>>()),
    )
}

fn criterion_self_teacher() -> Outcome {
    let cfg = desk();
    let model = StGcn::<f32>::new(cfg.model_config().unwrap(), cfg.skeleton()).unwrap();
    let data = SuiteData::<f32>::generate(&cfg).unwrap();
    let (_, train, _) = &data.clients[0];
    let idx: Vec<usize> = (0..cfg.federation.batch_size.min(train.len())).collect();
    let (x, _) = train.batch(&idx).unwrap();
    let mut client = model.init_shared(cfg.seed);
    client.overlay(&model.init_local(cfg.seed + 1));
    let strategy = AggregationStrategy::new(StrategyKind::Fsar, 0.0, 0.0).unwrap();
    let server = client.filter(|k| strategy.is_aggregatable(k));
    let mut g = Graph::new();
    let b = client.bind(&mut g, |k| model.is_trainable(k));
    let input = g.constant(x.clone());
    let student = model.forward(&mut g, &b, input, BnMode::Batch).unwrap().logits.unwrap();
    let streams = build_teacher_streams(&model, &server, &client, &mut g, &b, &x, &cfg.mkd()).unwrap();
    let kd = kd_loss(&mut g, &streams, student, 1.0).unwrap();
    let kd = g.value(kd).item() as f64;
    let diff = streams
        .iter()
        .map(|s| g.value(s.logits).max_abs_diff(g.value(student)) as f64)
        .fold(0.0, f64::max);
    verdict(
        kd < 1e-6 && diff <= 1e-5 && streams.len() == cfg.loss.grains,
        format!("{} streams, kd {kd:.3e} (< 1e-6), max logit diff {diff:.3e} (<= 1e-5)", streams.len()),
    )
}

fn shuffled_joints(d: &Dataset<f32>, seed: u64) -> Dataset<f32> {
    let v = *d.samples[0].shape().last().unwrap();
    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let samples = d
        .samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for (row, chunk) in s.data().chunks(v).enumerate() {
                for (j, &x) in chunk.iter().enumerate() {
                    out.data_mut()[row * v + perm[j]] = x;
                }
            }
            out
        })
        .collect();
    Dataset {
        samples,
        labels: d.labels.clone(),
        num_classes: d.num_classes,
    }
}

fn drift(run: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(run.join("analysis/coef_drift.csv")).unwrap();
    text.lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect()
}

fn main() {
    let pipeline = Instant::now();
    let mut failures = 0;
    println!("acceptance: desk suite from configs/desk.toml");

    judge(Criterion { id: 1, title: "gradient correctness" }, criterion_gradients, &mut failures);
    judge(Criterion { id: 2, title: "aggregation oracle" }, criterion_aggregation, &mut failures);
    judge(Criterion { id: 3, title: "topology isolation" }, criterion_isolation, &mut failures);

    let root = tempfile::tempdir().expect("tempdir");
    let runs = catch_unwind(AssertUnwindSafe(|| {
        let fsar = desk_run(root.path(), "fsar", |c| c.federation.strategy = StrategyKind::Fsar);
        let fedavg = desk_run(root.path(), "fedavg", |c| c.federation.strategy = StrategyKind::FedAvg);
        let fixed = desk_run(root.path(), "fixed_111", |c| c.model.coefficient_mode = CoefficientMode::Fixed);
        let only_a = desk_run(root.path(), "fixed_100", |c| {
            c.model.coefficient_mode = CoefficientMode::Fixed;
            c.model.coefficients = [1.0, 0.0, 0.0];
        });
        let grain0 = desk_run(root.path(), "grains_0", |c| c.loss.grains = 0);
        let grain1 = desk_run(root.path(), "grains_1", |c| c.loss.grains = 1);
        (fsar, fedavg, fixed, only_a, grain0, grain1)
    }));
    let Ok((fsar, fedavg, fixed, only_a, grain0, grain1)) = runs else {
        for (id, title) in [(4, "fsar vs fedavg"), (5, "stability"), (6, "ATS ablation"), (7, "MKD grains"), (8, "CKA depth")] {
            judge(Criterion { id, title }, || verdict(false, "desk runs aborted".into()), &mut failures);
        }
        std::process::exit(1);
    };

    judge(
        Criterion { id: 4, title: "fsar beats fedavg" },
        || {
            let gap = fsar.final_mean - fedavg.final_mean;
            verdict(
                gap >= FSAR_MARGIN && fsar.final_mean >= FSAR_FLOOR,
                format!("fsar {} fedavg {} gap {gap:+.4} (>= {FSAR_MARGIN}), fsar floor {FSAR_FLOOR}", fsar.brief(), fedavg.brief()),
            )
        },
        &mut failures,
    );
    judge(
        Criterion { id: 5, title: "stability" },
        || {
            verdict(
                fsar.stability < fedavg.stability,
                format!("rolling std over last 50%: fsar {:.4} < fedavg {:.4}", fsar.stability, fedavg.stability),
            )
        },
        &mut failures,
    );
    judge(
        Criterion { id: 6, title: "ATS ablation" },
        || {
            let (l, f, a) = (fsar.final_mean, fixed.final_mean, only_a.final_mean);
            verdict(
                l >= f - TIE && f >= a - TIE && l - a >= STRICT,
                format!("learnable {l:.4} >= fixed(1,1,1) {f:.4} >= fixed(1,0,0) {a:.4}; learnable - (1,0,0) = {:+.4} (>= {STRICT})", l - a),
            )
        },
        &mut failures,
    );
    judge(
        Criterion { id: 7, title: "MKD grains" },
        || {
            let (b2, b1, b0) = (fsar.final_mean, grain1.final_mean, grain0.final_mean);
            verdict(
                b2 - b0 >= STRICT && b2 >= b1,
                format!("b=2 {b2:.4}, b=1 {b1:.4}, b=0 {b0:.4}; b2 - b0 = {:+.4} (>= {STRICT})", b2 - b0),
            )
        },
        &mut failures,
    );
    judge(
        Criterion { id: 8, title: "CKA depth" },
        || {
            let report = analyze(&fedavg.cfg, &fedavg.dir).expect("analyze");
            let means: Vec<f64> = report.iter().map(|m| m.mean_off_diagonal()).collect();
            let rises: Vec<f64> = means.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
            let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= CKA_INVERSION);
            verdict(ok, format!("mean off-diagonal CKA by block {means:.4?}, rises {rises:.4?}"))
        },
        &mut failures,
    );
    judge(Criterion { id: 9, title: "self-teacher identity" }, criterion_self_teacher, &mut failures);

    // Supporting observations; these do not gate acceptance.
    if let Ok(()) = catch_unwind(AssertUnwindSafe(|| {
        analyze(&fixed.cfg, &fixed.dir).unwrap();
        analyze(&fsar.cfg, &fsar.dir).unwrap();
        let d_fixed = drift(&fixed.dir);
        let d_learn = drift(&fsar.dir);
        note(
            "coefficient drift",
            format!(
                "fixed run max |delta| {:.3e}, learnable run max |delta| {:.4}",
                d_fixed.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                d_learn.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            ),
        );
        note(
            "unseen client knn",
            format!("fsar {:?} fedavg {:?}", knn_final(&fsar.dir), knn_final(&fedavg.dir)),
        );
        note(
            "per-client stability of fedavg",
            format!("{:.4?} (clients ordered largest to smallest)", fedavg.per_client_stability),
        );
        let model = StGcn::<f32>::new(fsar.cfg.model_config().unwrap(), fsar.cfg.skeleton()).unwrap();
        let data = load_data(&fsar.cfg, &fsar.dir).unwrap();
        let mut drops = Vec::new();
        for (spec, _, test) in &data.clients {
            let p = checkpoint::load(&fsar.dir.join(format!("checkpoints/client{}.ckpt", spec.client_id))).unwrap();
            let base = metrics::linear_accuracy(&model, &p, test).unwrap();
            let shuffled = metrics::linear_accuracy(&model, &p, &shuffled_joints(test, 17)).unwrap();
            drops.push(base - shuffled);
        }
        note("joint shuffle accuracy drop", format!("{drops:.3?}"));
    })) {
    } else {
        note("supporting observations", "failed to compute".into());
    }

    judge(
        Criterion { id: 10, title: "reproducibility" },
        || {
            let again = desk_run(root.path(), "fsar_repeat", |c| c.federation.strategy = StrategyKind::Fsar);
            let a = std::fs::read(fsar.dir.join("metrics.csv")).unwrap();
            let b = std::fs::read(again.dir.join("metrics.csv")).unwrap();
            let elapsed = pipeline.elapsed();
            verdict(
                a == b && elapsed < PIPELINE_BUDGET,
                format!(
                    "metrics CSVs identical: {} ({} bytes); pipeline {:.1} min of {} min budget",
                    a == b,
                    a.len(),
                    elapsed.as_secs_f64() / 60.0,
                    PIPELINE_BUDGET.as_secs() / 60
                ),
            )
        },
        &mut failures,
    );

    println!("acceptance: {} of 10 criteria failed", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
