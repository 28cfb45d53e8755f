//! Deterministic synthetic skeleton datasets.
//!
//! Every client owns a private kinematic tree (the canonical skeleton with a
//! few joints re-attached elsewhere) and a disjoint set of action classes.
//! A class is a motion archetype: each joint oscillates around its tree
//! parent, so motion propagates along the client's private topology.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::SkeletonGraph;

/// Coordinates per joint.
pub const COORDS: usize = 3;
/// Generated coordinates are clamped to `[-BOUND, BOUND]`.
pub const BOUND: f64 = 3.0;
/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

const STREAM_ARCHETYPE: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_TOPOLOGY: u64 = 3;

/// Everything needed to regenerate one client's dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDatasetSpec {
    pub client_id: usize,
    /// Global class ids, disjoint across clients.
    pub labels: Vec<usize>,
    pub samples_per_class: usize,
    pub frames: usize,
    pub skeleton: SkeletonGraph,
    /// Number of joints re-attached to form the private kinematic tree.
    pub rewire: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Relative per-sample amplitude jitter.
    pub amplitude_jitter: f64,
    /// Per-sample phase jitter in radians.
    pub phase_jitter: f64,
    pub seed: u64,
}

impl ClientDatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn total_samples(&self) -> usize {
        self.samples_per_class * self.labels.len()
    }

    /// `(train, test)` samples per class.
    pub fn split_counts(&self) -> (usize, usize) {
        let train = ((self.samples_per_class as f64) * TRAIN_FRACTION).round() as usize;
        let train = train.clamp(1.min(self.samples_per_class), self.samples_per_class);
        (train, self.samples_per_class - train)
    }

    /// SHA-256 over the canonical JSON encoding of the spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Parent of every joint in this client's private kinematic tree.
    pub fn private_parents(&self) -> Vec<usize> {
        rewired_parents(&self.skeleton, self.rewire, &mut self.rng(STREAM_TOPOLOGY))
    }
}

/// Re-attaches `count` random non-root joints to random joints outside
/// their own subtree; the result is still a tree rooted at the same joint.
pub fn rewired_parents(g: &SkeletonGraph, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut parent = g.parents();
    let v = g.joints;
    if v < 3 {
        return parent;
    }
    for _ in 0..count {
        let j = loop {
            let j = rng.random_range(0..v);
            if j != g.root {
                break j;
            }
        };
        let in_subtree = |cand: usize, parent: &[usize]| {
            let mut c = cand;
            loop {
                if c == j {
                    return true;
                }
                if c == g.root {
                    return false;
                }
                c = parent[c];
            }
        };
        let candidates: Vec<usize> = (0..v)
            .filter(|&c| c != parent[j] && !in_subtree(c, &parent))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        parent[j] = candidates[rng.random_range(0..candidates.len())];
    }
    parent
}

/// Per-joint oscillation parameters of one action class.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionArchetype {
    pub class_id: usize,
    pub offset: Vec<[f64; COORDS]>,
    pub amplitude: Vec<[f64; COORDS]>,
    /// Cycles per sequence; always positive.
    pub frequency: Vec<f64>,
    pub phase: Vec<f64>,
}

impl MotionArchetype {
    fn sample(class_id: usize, joints: usize, rng: &mut impl Rng) -> Self {
        let mut offset = Vec::with_capacity(joints);
        let mut amplitude = Vec::with_capacity(joints);
        let mut frequency = Vec::with_capacity(joints);
        let mut phase = Vec::with_capacity(joints);
        for _ in 0..joints {
            offset.push(std::array::from_fn(|_| rng.random_range(-0.15..0.15)));
            amplitude.push(std::array::from_fn(|_| rng.random_range(0.0..0.25)));
            frequency.push(rng.random_range(0.5..2.5));
            phase.push(rng.random_range(0.0..std::f64::consts::TAU));
        }
        Self {
            class_id,
            offset,
            amplitude,
            frequency,
            phase,
        }
    }
}

/// Samples of one split; labels are indices into the client's label list.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the selected samples into `[N × C × T × V]`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let items: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.samples[i]).collect();
        let x = Tensor::stack(&items)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Sequence of one sample as `[C × T × V]`.
fn render<T: Scalar>(
    arch: &MotionArchetype,
    parents: &[usize],
    order: &[usize],
    frames: usize,
    spec: &ClientDatasetSpec,
    noise: &Normal<f64>,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let v = parents.len();
    let amp_scale: Vec<f64> = (0..v)
        .map(|_| 1.0 + spec.amplitude_jitter * rng.random_range(-1.0..1.0))
        .collect();
    let phase_shift: Vec<f64> = (0..v)
        .map(|_| spec.phase_jitter * rng.random_range(-1.0..1.0))
        .collect();
    let mut pos = vec![[0.0f64; COORDS]; v * frames];
    for t in 0..frames {
        let tau = t as f64 / frames as f64;
        for &j in order {
            let wave = (std::f64::consts::TAU * arch.frequency[j] * tau + arch.phase[j] + phase_shift[j]).sin();
            let base = if parents[j] == j { [0.0; COORDS] } else { pos[t * v + parents[j]] };
            for c in 0..COORDS {
                pos[t * v + j][c] = base[c] + arch.offset[j][c] + amp_scale[j] * arch.amplitude[j][c] * wave;
            }
        }
    }
    let mut data = vec![0.0f64; COORDS * frames * v];
    for c in 0..COORDS {
        for t in 0..frames {
            for j in 0..v {
                data[(c * frames + t) * v + j] = pos[t * v + j][c] + noise.sample(rng);
            }
        }
    }
    for c in 0..COORDS {
        let chan = &mut data[c * frames * v..(c + 1) * frames * v];
        let mean = chan.iter().sum::<f64>() / chan.len() as f64;
        for x in chan.iter_mut() {
            *x = (*x - mean).clamp(-BOUND, BOUND);
        }
    }
    Tensor::from_vec(&[COORDS, frames, v], data.into_iter().map(T::of).collect())
        .expect("rendered shape")
}

/// Joints ordered so that every parent precedes its children.
fn topological_order(parents: &[usize]) -> Vec<usize> {
    let v = parents.len();
    let depth = |mut j: usize| {
        let mut d = 0;
        while parents[j] != j {
            j = parents[j];
            d += 1;
        }
        d
    };
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by_key(|&j| (depth(j), j));
    order
}

/// Archetypes of every class of a client.
pub fn archetypes(spec: &ClientDatasetSpec) -> Vec<MotionArchetype> {
    let mut rng = spec.rng(STREAM_ARCHETYPE);
    spec.labels
        .iter()
        .map(|&c| MotionArchetype::sample(c, spec.skeleton.joints, &mut rng))
        .collect()
}

/// Generates `(train, test)`; a pure function of `spec`.
pub fn generate<T: Scalar>(spec: &ClientDatasetSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    if spec.labels.is_empty() || spec.samples_per_class == 0 || spec.frames == 0 {
        return Err(Error::Data(format!("client {} spec is empty", spec.client_id)));
    }
    if spec.noise < 0.0 {
        return Err(Error::Data("noise must be nonnegative".into()));
    }
    let parents = spec.private_parents();
    let order = topological_order(&parents);
    let arch = archetypes(spec);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Data(e.to_string()))?;
    let (n_train, n_test) = spec.split_counts();
    let split = |stream: u64, per_class: usize| {
        let mut rng = spec.rng(stream);
        let mut ds = Dataset {
            samples: Vec::with_capacity(per_class * arch.len()),
            labels: Vec::with_capacity(per_class * arch.len()),
            num_classes: arch.len(),
        };
        for (local, a) in arch.iter().enumerate() {
            for _ in 0..per_class {
                ds.samples
                    .push(render(a, &parents, &order, spec.frames, spec, &noise, &mut rng));
                ds.labels.push(local);
            }
        }
        ds
    };
    let train = split(STREAM_TRAIN, n_train);
    let test = split(STREAM_TEST, n_test);
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleProfile {
    Balanced,
    Skewed,
}

/// Shared knobs of a federation suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteParams {
    pub profile: ScaleProfile,
    /// Sample count of the smallest client.
    pub base_samples: usize,
    pub classes_per_client: usize,
    pub frames: usize,
    pub skeleton: SkeletonGraph,
    pub rewire: usize,
    pub noise: f64,
    pub amplitude_jitter: f64,
    pub phase_jitter: f64,
}

/// Specs for `n_clients` clients with disjoint label ranges. The skewed
/// profile assigns sample counts in ratio `2^(n-1) : ... : 2 : 1`.
pub fn make_federation_suite(n_clients: usize, p: &SuiteParams, seed: u64) -> Result<Vec<ClientDatasetSpec>> {
    if n_clients < 2 {
        return Err(Error::Config(format!("a federation needs at least 2 clients, got {n_clients}")));
    }
    (0..n_clients)
        .map(|i| {
            let total = match p.profile {
                ScaleProfile::Balanced => p.base_samples,
                ScaleProfile::Skewed => p.base_samples << (n_clients - 1 - i),
            };
            client_spec(i, total, p, seed)
        })
        .collect()
}

/// A client outside the federation, used for unseen-data evaluation.
pub fn unseen_spec(id: usize, p: &SuiteParams, seed: u64) -> Result<ClientDatasetSpec> {
    client_spec(id, p.base_samples, p, seed)
}

fn client_spec(id: usize, total: usize, p: &SuiteParams, seed: u64) -> Result<ClientDatasetSpec> {
    if p.classes_per_client == 0 {
        return Err(Error::Config("classes_per_client must be positive".into()));
    }
    let per_class = total / p.classes_per_client;
    if per_class < 2 {
        return Err(Error::Config(format!(
            "client {id}: {total} samples cannot cover {} classes",
            p.classes_per_client
        )));
    }
    let mut mix = ChaCha8Rng::seed_from_u64(seed);
    mix.set_stream(1000 + id as u64);
    Ok(ClientDatasetSpec {
        client_id: id,
        labels: (id * p.classes_per_client..(id + 1) * p.classes_per_client).collect(),
        samples_per_class: per_class,
        frames: p.frames,
        skeleton: p.skeleton.clone(),
        rewire: p.rewire,
        noise: p.noise,
        amplitude_jitter: p.amplitude_jitter,
        phase_jitter: p.phase_jitter,
        seed: mix.random(),
    })
}

const CACHE_MAGIC: &str = "fedskel-data v1";

/// Writes a dataset cache: a text header, then little-endian `f32`
/// sequences followed by `u32` labels for the train and test splits.
pub fn write_cache<T: Scalar>(path: &Path, spec: &ClientDatasetSpec, train: &Dataset<T>, test: &Dataset<T>) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{CACHE_MAGIC}")?;
    writeln!(out, "spec {}", spec.hash())?;
    writeln!(out, "classes {}", spec.num_classes())?;
    for (name, ds) in [("train", train), ("test", test)] {
        let shape = ds.samples.first().map(|s| s.shape().to_vec()).unwrap_or(vec![COORDS, spec.frames, spec.skeleton.joints]);
        writeln!(out, "{name} {} {} {} {}", ds.len(), shape[0], shape[1], shape[2])?;
    }
    writeln!(out, "---")?;
    for ds in [train, test] {
        for s in &ds.samples {
            for v in s.data() {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        for &l in &ds.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a cache written by [`write_cache`]. Returns `Ok(None)` when the
/// stored spec hash differs from `spec`'s.
pub fn read_cache<T: Scalar>(path: &Path, spec: &ClientDatasetSpec) -> Result<Option<(Dataset<T>, Dataset<T>)>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end().to_owned())
    };
    if next(&mut r)? != CACHE_MAGIC {
        return Err(Error::Data(format!("{} is not a dataset cache", path.display())));
    }
    let hash = next(&mut r)?;
    if hash.strip_prefix("spec ") != Some(spec.hash().as_str()) {
        return Ok(None);
    }
    let classes: usize = parse_field(&next(&mut r)?, "classes")?[0];
    let mut shapes = Vec::new();
    for name in ["train", "test"] {
        let f = parse_field(&next(&mut r)?, name)?;
        if f.len() != 4 {
            return Err(Error::Data(format!("malformed {name} header")));
        }
        shapes.push(f);
    }
    if next(&mut r)? != "---" {
        return Err(Error::Data("missing header terminator".into()));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut cursor = body.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let mut splits = Vec::new();
    for f in &shapes {
        let (n, shape) = (f[0], [f[1], f[2], f[3]]);
        let per: usize = shape.iter().product();
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let data: Vec<T> = cursor
                .by_ref()
                .take(per)
                .map(|b| T::of(f32::from_le_bytes(b) as f64))
                .collect();
            if data.len() != per {
                return Err(Error::Data("truncated dataset cache".into()));
            }
            samples.push(Tensor::from_vec(&shape, data)?);
        }
        let labels: Vec<usize> = cursor.by_ref().take(n).map(|b| u32::from_le_bytes(b) as usize).collect();
        if labels.len() != n {
            return Err(Error::Data("truncated label array".into()));
        }
        splits.push(Dataset {
            samples,
            labels,
            num_classes: classes,
        });
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Some((train, test)))
}

fn parse_field(line: &str, name: &str) -> Result<Vec<usize>> {
    let rest = line
        .strip_prefix(name)
        .ok_or_else(|| Error::Data(format!("expected `{name}` header, got `{line}`")))?;
    rest.split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Data(format!("bad number in `{line}`"))))
        .collect()
}
