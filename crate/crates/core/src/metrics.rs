//! Evaluation protocols and representation similarity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{BnMode, StGcn};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::synth::Dataset;
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Linear,
    Knn,
    Train,
    Coef,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Linear => "linear",
            Protocol::Knn => "knn",
            Protocol::Train => "train",
            Protocol::Coef => "coef",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClientRef {
    Client(usize),
    Unseen,
}

impl fmt::Display for ClientRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientRef::Client(i) => write!(f, "{i}"),
            ClientRef::Unseen => f.write_str("unseen"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub protocol: Protocol,
    pub client: ClientRef,
    pub accuracy: f64,
    pub round: usize,
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub client: ClientRef,
    pub protocol: Protocol,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "round,client,protocol,metric,value";

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{:.6}", self.round, self.client, self.protocol, self.metric, self.value)
    }
}

impl From<EvalResult> for MetricRow {
    fn from(e: EvalResult) -> Self {
        Self {
            round: e.round,
            client: e.client,
            protocol: e.protocol,
            metric: "accuracy".into(),
            value: e.accuracy,
        }
    }
}

/// Forward output of a whole dataset, without gradient.
pub struct Extracted<T> {
    /// Pooled features, `[N × feature_dim]`.
    pub features: Tensor<T>,
    /// Logits, when the classifier was present.
    pub logits: Option<Tensor<T>>,
    /// Flattened per-sample block outputs, one tensor `[N × D_b]` per block.
    pub blocks: Vec<Tensor<T>>,
}

/// Runs `params` over `samples` in chunks.
pub fn extract<T: Scalar>(
    model: &StGcn<T>,
    params: &ParamSet<T>,
    samples: &[Tensor<T>],
    mode: BnMode,
    keep_blocks: bool,
) -> Result<Extracted<T>> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty sample set".into()));
    }
    let mut feats = Vec::new();
    let mut logits = Vec::new();
    let mut blocks: Vec<Vec<T>> = vec![Vec::new(); model.blocks()];
    let mut has_logits = true;
    let mut g = Graph::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        g.clear();
        let bound = params.bind(&mut g, |_| false);
        let x = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
        let xi = g.constant(x);
        let trace = model.forward(&mut g, &bound, xi, mode)?;
        feats.extend_from_slice(g.value(trace.features).data());
        match trace.logits {
            Some(l) => logits.extend_from_slice(g.value(l).data()),
            None => has_logits = false,
        }
        if keep_blocks {
            for (acc, b) in blocks.iter_mut().zip(&trace.blocks) {
                acc.extend_from_slice(g.value(*b).data());
            }
        }
    }
    let n = samples.len();
    let d = feats.len() / n;
    let features = Tensor::from_vec(&[n, d], feats)?;
    let logits = if has_logits {
        let k = logits.len() / n;
        Some(Tensor::from_vec(&[n, k], logits)?)
    } else {
        None
    };
    let blocks = if keep_blocks {
        blocks
            .into_iter()
            .map(|b| {
                let d = b.len() / n;
                Tensor::from_vec(&[n, d], b)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Extracted {
        features,
        logits,
        blocks,
    })
}

/// Index of the largest entry per row; the first wins on ties.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy of a composed model (server backbone plus the client's
/// classifier and private parameters) on `test`.
pub fn linear_accuracy<T: Scalar>(model: &StGcn<T>, params: &ParamSet<T>, test: &Dataset<T>) -> Result<f64> {
    let out = extract(model, params, &test.samples, BnMode::Running, false)?;
    let logits = out
        .logits
        .ok_or_else(|| Error::Usage("linear accuracy needs a classifier".into()))?;
    Ok(accuracy(&argmax_rows(&logits), &test.labels))
}

fn normalized_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

/// Cosine k-nearest-neighbor classification. Votes are tallied per class;
/// ties go to the smallest summed distance, then the lowest class id.
pub fn knn_classify<T: Scalar>(
    train: &Tensor<T>,
    train_labels: &[usize],
    test: &Tensor<T>,
    k: usize,
) -> Result<Vec<usize>> {
    if train_labels.is_empty() {
        return Err(Error::Usage("k-NN needs a non-empty training split".into()));
    }
    if k == 0 {
        return Err(Error::Usage("k must be positive".into()));
    }
    if train.shape()[1] != test.shape()[1] {
        return Err(Error::Dimension(format!(
            "train features {:?} vs test {:?}",
            train.shape(),
            test.shape()
        )));
    }
    let tr = normalized_rows(&train.cast());
    let te = normalized_rows(&test.cast());
    let k = k.min(tr.len());
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    Ok(te
        .iter()
        .map(|q| {
            let mut dist: Vec<(f64, usize)> = tr
                .iter()
                .enumerate()
                .map(|(i, r)| (1.0 - r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), i))
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            let mut summed = vec![0.0f64; classes];
            for &(d, i) in &dist[..k] {
                votes[train_labels[i]] += 1;
                summed[train_labels[i]] += d;
            }
            (0..classes)
                .filter(|&c| votes[c] > 0)
                .min_by(|&a, &b| {
                    votes[b]
                        .cmp(&votes[a])
                        .then(summed[a].total_cmp(&summed[b]))
                        .then(a.cmp(&b))
                })
                .expect("k ≥ 1 neighbors voted")
        })
        .collect())
}

pub fn knn_accuracy_features<T: Scalar>(
    train: &Tensor<T>,
    train_labels: &[usize],
    test: &Tensor<T>,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    let pred = knn_classify(train, train_labels, test, k)?;
    Ok(accuracy(&pred, test_labels))
}

/// k-NN accuracy of backbone features on a dataset outside the federation.
pub fn knn_accuracy<T: Scalar>(
    model: &StGcn<T>,
    backbone: &ParamSet<T>,
    mode: BnMode,
    train: &Dataset<T>,
    test: &Dataset<T>,
    k: usize,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::Usage("k-NN needs a non-empty training split".into()));
    }
    let a = extract(model, backbone, &train.samples, mode, false)?;
    let b = extract(model, backbone, &test.samples, mode, false)?;
    knn_accuracy_features(&a.features, &train.labels, &b.features, &test.labels, k)
}

fn centered_gram(t: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut x = t.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * d + j] -= mean;
        }
    }
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x[i * d..(i + 1) * d].iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Linear CKA between `[n × d₁]` and `[n × d₂]`, computed in `f64`
/// through Gram matrices; zero when either self-similarity vanishes.
pub fn cka<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Dimension(format!(
            "cka needs equal sample counts, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.shape()[0] < 2 {
        return Err(Error::Usage("cka needs at least two samples".into()));
    }
    let ka = centered_gram(&a.cast());
    let kb = centered_gram(&b.cast());
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let hsic = dot(&ka, &kb);
    let na = dot(&ka, &ka).sqrt();
    let nb = dot(&kb, &kb).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(hsic / (na * nb))
}

/// Pairwise similarity of one block across clients.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaMatrix {
    pub block: usize,
    pub clients: Vec<usize>,
    /// Row-major `n_clients × n_clients`.
    pub values: Vec<f64>,
}

impl CkaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.clients.len() + j]
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.clients.len();
        if n < 2 {
            return 1.0;
        }
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += self.get(i, j);
                }
            }
        }
        s / (n * (n - 1)) as f64
    }

    /// `block,client_i,client_j,cka` rows including the header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,client_i,client_j,cka\n");
        for (i, ci) in self.clients.iter().enumerate() {
            for (j, cj) in self.clients.iter().enumerate() {
                out.push_str(&format!("{},{ci},{cj},{:.6}\n", self.block + 1, self.get(i, j)));
            }
        }
        out
    }
}

/// Per-block CKA between every pair of client models on a shared probe.
pub fn block_cka_report<T: Scalar>(
    model: &StGcn<T>,
    clients: &[(usize, &ParamSet<T>)],
    probe: &[Tensor<T>],
) -> Result<Vec<CkaMatrix>> {
    let outs = clients
        .iter()
        .map(|(_, p)| extract(model, p, probe, BnMode::Running, true).map(|e| e.blocks))
        .collect::<Result<Vec<_>>>()?;
    let n = clients.len();
    (0..model.blocks())
        .map(|b| {
            let mut values = vec![1.0; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = cka(&outs[i][b], &outs[j][b])?;
                    values[i * n + j] = v;
                    values[j * n + i] = v;
                }
            }
            Ok(CkaMatrix {
                block: b,
                clients: clients.iter().map(|(id, _)| *id).collect(),
                values,
            })
        })
        .collect()
}

/// Mean of the population standard deviations of every length-`window`
/// slice of `series`.
pub fn rolling_std(series: &[f64], window: usize) -> f64 {
    if window < 2 || series.len() < window {
        return 0.0;
    }
    let stds: Vec<f64> = series
        .windows(window)
        .map(|w| {
            let m = w.iter().sum::<f64>() / window as f64;
            (w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / window as f64).sqrt()
        })
        .collect();
    stds.iter().sum::<f64>() / stds.len() as f64
}

/// The trailing `fraction` of a series, never fewer than one value.
pub fn tail(series: &[f64], fraction: f64) -> &[f64] {
    let keep = ((series.len() as f64) * fraction).ceil() as usize;
    &series[series.len() - keep.clamp(1.min(series.len()), series.len())..]
}
