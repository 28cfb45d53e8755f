use fedskel_core::autodiff::Graph;
use fedskel_core::checkpoint;
use fedskel_core::config::{ExperimentConfig, StrategyKind};
use fedskel_core::federation::{run_experiment, Federation, SuiteData};
use fedskel_core::mkd::{build_teacher_streams, dual_ce_loss, MkdConfig};
use fedskel_core::model::{keys, BnMode, ConvMode, ModelConfig, StGcn};
use fedskel_core::params::is_unique_key;
use fedskel_core::synth::{self, generate, make_federation_suite};
use fedskel_core::topology::{SkeletonGraph, PARTITIONS};
use fedskel_core::{ParamSet64, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_toml(strategy: &str, extra_model: &str) -> String {
    format!(
        r#"
name = "tiny"
seed = 5
[model]
frames = 8
channels = [4, 6, 8]
temporal_kernel = 3
feature_dim = 8
{extra_model}
[federation]
n_clients = 2
rounds = 10
strategy = "{strategy}"
learning_rate = 0.01
server_momentum = 0.5
batch_size = 4
[loss]
[data]
base_samples = 6
classes_per_client = 2
[eval]
knn_k = 1
unseen_client = 2
"#
    )
}

fn tiny(strategy: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&tiny_toml(strategy, "")).unwrap()
}

fn rand_input(seed: u64, shape: &[usize]) -> Tensor64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor64::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn model(mode: ConvMode) -> StGcn<f64> {
    let cfg = ModelConfig {
        frames: 6,
        channels: vec![4, 5, 6],
        temporal_kernel: 3,
        strides: vec![1, 2, 1],
        feature_dim: 7,
        num_classes: 4,
        conv_mode: mode,
        ..ModelConfig::default()
    };
    StGcn::new(cfg, SkeletonGraph::ntu25()).unwrap()
}

fn run_logits(m: &StGcn<f64>, p: &ParamSet64, x: &Tensor64) -> Tensor64 {
    let mut g = Graph::new();
    let b = p.bind(&mut g, |_| false);
    let input = g.constant(x.clone());
    let t = m.forward(&mut g, &b, input, BnMode::Batch).unwrap();
    g.value(t.logits.unwrap()).clone()
}

#[test]
fn ats_with_unit_alpha_equals_vanilla_all_ones_mask() {
    let vanilla = model(ConvMode::Vanilla);
    let ats = model(ConvMode::Ats);
    let x = rand_input(1, &[3, 3, 6, 25]);
    for seed in 0..5 {
        let pv = vanilla.init_params(seed);
        let mut pa = ats.init_params(seed);
        pa.overlay(&pv.filter(|k| !k.contains(".mask")));
        for b in 0..ats.blocks() {
            for (i, c) in [1.0, 0.0, 0.0].into_iter().enumerate() {
                pa.insert(keys::coefficient(b, i), Tensor64::scalar(c));
            }
        }
        let diff = run_logits(&vanilla, &pv, &x).max_abs_diff(&run_logits(&ats, &pa, &x));
        assert!(diff < 1e-6, "seed {seed}: {diff}");
    }
}

#[test]
fn grafting_reproduces_forward_tail_bitwise() {
    for mode in [ConvMode::Ats, ConvMode::Vanilla] {
        let m = model(mode);
        let p = m.init_params(3);
        let x = rand_input(2, &[4, 3, 6, 25]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let input = g.constant(x.clone());
        let full = m.forward(&mut g, &b, input, BnMode::Batch).unwrap();
        let want = g.value(full.logits.unwrap()).clone();
        for start in 1..=m.blocks() {
            let mid = g.constant(g.value(full.blocks[start - 1]).clone());
            let tail = m.forward_from_block(&mut g, &b, mid, start, BnMode::Batch).unwrap();
            assert_eq!(g.value(tail.logits.unwrap()), &want, "{mode:?} start {start}");
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for mode in [ConvMode::Ats, ConvMode::Vanilla] {
        let m = model(mode);
        let p = m.init_params(9);
        let x = rand_input(4, &[6, 3, 6, 25]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, |k| m.is_trainable(k));
        let input = g.constant(x);
        let t = m.forward(&mut g, &b, input, BnMode::Batch).unwrap();
        let loss = fedskel_core::mkd::cross_entropy(&mut g, t.logits.unwrap(), &[0, 1, 2, 3, 0, 1]).unwrap();
        g.backward(loss).unwrap();
        let grads = b.grads(&g);
        for (k, _) in p.iter().filter(|(k, _)| m.is_trainable(k)) {
            let gk = grads.get(k).unwrap_or_else(|| panic!("{mode:?}: no gradient for {k}"));
            if let Some((_, s)) = k.split_once(".mask") {
                // Mask entries only matter where the adjacency is nonzero.
                let s: usize = s.parse().unwrap();
                let a = &m.adjacency.matrices[s];
                for (gv, av) in gk.data().iter().zip(a.data()) {
                    assert_eq!(*av == 0.0, *gv == 0.0, "{k}");
                }
            } else {
                assert!(gk.data().iter().any(|v| *v != 0.0), "{mode:?}: zero gradient for {k}");
            }
        }
    }
}

#[test]
fn teacher_stream_trains_deep_blocks_only() {
    let m = model(ConvMode::Ats);
    let client = m.init_params(1);
    let server = m.init_shared(2).filter(|k| !k.starts_with("classifier"));
    let server_before = server.clone();
    let x = rand_input(8, &[4, 3, 6, 25]);
    let mut g = Graph::new();
    let b = client.bind(&mut g, |k| m.is_trainable(k));
    let cfg = MkdConfig { grains: 2, kd_temperature: 1.0 };
    let streams = build_teacher_streams(&m, &server, &client, &mut g, &b, &x, &cfg).unwrap();
    assert_eq!(streams.iter().map(|s| s.grain).collect::<Vec<_>>(), vec![1, 2]);
    // Loss over the teacher streams alone: only blocks past the graft point
    // and the head can receive gradient.
    let mut loss = None;
    for s in &streams {
        let l = fedskel_core::mkd::cross_entropy(&mut g, s.logits, &[0, 1, 2, 3]).unwrap();
        loss = Some(match loss {
            Some(acc) => g.add(acc, l).unwrap(),
            None => l,
        });
    }
    g.backward(loss.unwrap()).unwrap();
    let grads = b.grads(&g);
    let nonzero = |k: &str| grads.get(k).is_some_and(|t| t.data().iter().any(|v| *v != 0.0));
    assert!(nonzero(&keys::temporal(2)));
    assert!(nonzero(&keys::temporal(1)));
    assert!(nonzero(keys::CLS_WEIGHT));
    assert!(!nonzero(&keys::temporal(0)));
    assert!(!nonzero(&keys::spatial(0, 0)));
    assert_eq!(server, server_before);
}

#[test]
fn self_teacher_dual_ce_is_scaled_ce() {
    let m = model(ConvMode::Ats);
    let client = m.init_params(4);
    let x = rand_input(5, &[4, 3, 6, 25]);
    let labels = [3, 0, 1, 1];
    let mut g = Graph::new();
    let b = client.bind(&mut g, |k| m.is_trainable(k));
    let input = g.constant(x.clone());
    let t = m.forward(&mut g, &b, input, BnMode::Batch).unwrap();
    let student = t.logits.unwrap();
    let cfg = MkdConfig { grains: 2, kd_temperature: 1.0 };
    let streams = build_teacher_streams(&m, &client, &client, &mut g, &b, &x, &cfg).unwrap();
    let dual = dual_ce_loss(&mut g, &streams, student, &labels).unwrap();
    let ce = fedskel_core::mkd::cross_entropy(&mut g, student, &labels).unwrap();
    let (dual, ce) = (g.value(dual).item(), g.value(ce).item());
    assert!((dual - 3.0 * ce).abs() < 1e-6, "{dual} vs 3·{ce}");
}

#[test]
fn synthetic_cache_round_trip_and_invalidation() {
    let cfg = tiny("fedavg");
    let specs = make_federation_suite(2, &cfg.suite_params(), 1).unwrap();
    let (train, test) = generate::<f32>(&specs[0]).unwrap();
    let (train2, test2) = generate::<f32>(&specs[0]).unwrap();
    assert_eq!(train.samples, train2.samples);
    assert_eq!(test.labels, test2.labels);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c0.bin");
    synth::write_cache(&path, &specs[0], &train, &test).unwrap();
    let (a, b) = synth::read_cache::<f32>(&path, &specs[0]).unwrap().unwrap();
    assert_eq!(a.samples, train.samples);
    assert_eq!(a.labels, train.labels);
    assert_eq!(b.samples, test.samples);
    assert!(synth::read_cache::<f32>(&path, &specs[1]).unwrap().is_none());
}

#[test]
fn fedprox_without_proximal_term_matches_fedavg_bitwise() {
    let run = |s: &str| {
        let cfg = tiny(s);
        let data = SuiteData::<f32>::generate(&cfg).unwrap();
        let mut rows = Vec::new();
        let out = run_experiment(&cfg, data, 1, |r| {
            rows.extend(r.rows().into_iter().map(|row| row.to_string()));
            Ok(())
        })
        .unwrap();
        (rows, checkpoint::encode(&out.federation.server.params), out.federation.last_local)
    };
    let (ra, sa, la) = run("fedavg");
    let (rp, sp, lp) = run("fedprox");
    assert_eq!(ra, rp);
    assert_eq!(sa, sp);
    for (a, p) in la.iter().zip(&lp) {
        assert_eq!(checkpoint::encode(a), checkpoint::encode(p));
    }
}

#[test]
fn parallel_clients_match_sequential() {
    let cfg = tiny("fsar");
    let go = |jobs| {
        let data = SuiteData::<f32>::generate(&cfg).unwrap();
        let mut rows = Vec::new();
        run_experiment(&cfg, data, jobs, |r| {
            rows.extend(r.rows().into_iter().map(|row| row.to_string()));
            Ok(())
        })
        .unwrap();
        rows
    };
    assert_eq!(go(1), go(2));
}

#[test]
fn server_key_set_is_constant_and_private_keys_stay_local() {
    for s in StrategyKind::ALL {
        let cfg = tiny(s.name());
        let data = SuiteData::<f32>::generate(&cfg).unwrap();
        let mut fed = Federation::new(&cfg, data, 1).unwrap();
        let keys0: Vec<String> = fed.server.params.keys().map(str::to_owned).collect();
        for round in 1..=3 {
            fed.run_round(round, false).unwrap();
            let keys: Vec<String> = fed.server.params.keys().map(str::to_owned).collect();
            assert_eq!(keys, keys0, "{s}");
            assert!(!keys.iter().any(|k| is_unique_key(k) || k.starts_with("classifier") || k.starts_with("coef")));
            if s == StrategyKind::FedBn {
                assert!(!keys.iter().any(|k| k.starts_with("bn.")));
            }
        }
    }
}

#[test]
fn fixed_coefficients_never_move() {
    let cfg = ExperimentConfig::from_toml(&tiny_toml("fsar", "coefficient_mode = \"fixed\"\ncoefficients = [1.0, 0.5, 0.25]")).unwrap();
    let data = SuiteData::<f32>::generate(&cfg).unwrap();
    let out = run_experiment(&cfg, data, 1, |_| Ok(())).unwrap();
    for (_, b, v) in out.reports.last().unwrap().coefficients.iter() {
        assert_eq!(*v, [1.0, 0.5, 0.25], "block {b}");
    }
    for c in &out.federation.clients {
        for b in 0..out.federation.model.blocks() {
            for s in 0..PARTITIONS {
                assert!(c.params.contains(&keys::unique(b, s)));
            }
        }
    }
}

#[test]
fn training_lowers_loss() {
    let mut cfg = tiny("fedavg");
    cfg.federation.rounds = 15;
    let data = SuiteData::<f32>::generate(&cfg).unwrap();
    let out = run_experiment(&cfg, data, 1, |_| Ok(())).unwrap();
    let ce = |r: usize| out.reports[r].losses.iter().map(|l| l.1.ce).sum::<f64>();
    assert!(ce(15) < ce(1), "{} !< {}", ce(15), ce(1));
}
