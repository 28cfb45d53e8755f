//! Skeleton graphs, distance-partitioned adjacency and the adaptive ternary
//! `(A, I, U)` topology.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of spatial partitions: self, centripetal, centrifugal.
pub const PARTITIONS: usize = 3;

/// Undirected joint graph with a designated root joint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub joints: usize,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
}

impl SkeletonGraph {
    /// Validates the graph and canonicalizes its edge list (sorted, each
    /// pair stored as `(low, high)`, duplicates removed).
    pub fn new(joints: usize, edges: Vec<(usize, usize)>, root: usize) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Topology("skeleton needs at least one joint".into()));
        }
        if root >= joints {
            return Err(Error::Topology(format!("root {root} out of range for {joints} joints")));
        }
        let mut canon = BTreeSet::new();
        for &(a, b) in &edges {
            if a >= joints || b >= joints {
                return Err(Error::Topology(format!("edge ({a}, {b}) out of range for {joints} joints")));
            }
            if a == b {
                return Err(Error::Topology(format!("self-loop edge ({a}, {a})")));
            }
            canon.insert((a.min(b), a.max(b)));
        }
        let g = Self {
            joints,
            edges: canon.into_iter().collect(),
            root,
        };
        let dist = g.hop_distances();
        if let Some(j) = dist.iter().position(Option::is_none) {
            return Err(Error::Topology(format!("joint {j} is not connected to root {root}")));
        }
        Ok(g)
    }

    /// The 25-joint Kinect v2 skeleton with the spine-shoulder joint as root.
    pub fn ntu25() -> Self {
        const EDGES: [(usize, usize); 24] = [
            (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
            (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15),
            (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
        ];
        let edges = EDGES.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        Self::new(25, edges, 20).expect("built-in skeleton is valid")
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.joints];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// BFS hop distance of every joint from the root.
    pub fn hop_distances(&self) -> Vec<Option<usize>> {
        let adj = self.neighbors();
        let mut dist = vec![None; self.joints];
        dist[self.root] = Some(0);
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued joints have a distance");
            for &w in &adj[u] {
                if dist[w].is_none() {
                    dist[w] = Some(du + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Parent of every joint in the BFS tree rooted at `root` (root maps to itself).
    pub fn parents(&self) -> Vec<usize> {
        let adj = self.neighbors();
        let mut parent = vec![usize::MAX; self.joints];
        parent[self.root] = self.root;
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if parent[w] == usize::MAX {
                    parent[w] = u;
                    queue.push_back(w);
                }
            }
        }
        parent
    }

    /// Applies a joint relabeling: joint `j` becomes `perm[j]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::new(self.joints, edges, perm[self.root])
    }
}

/// Degree-normalized adjacency split into [`PARTITIONS`] matrices.
///
/// Matrices are indexed `[source, target]`: features propagate as `f · A_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedAdjacency<T> {
    pub matrices: Vec<Tensor<T>>,
}

impl<T: Scalar> PartitionedAdjacency<T> {
    pub fn joints(&self) -> usize {
        self.matrices[0].shape()[0]
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// `Σ_s A_s`.
    pub fn sum(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(self.matrices[0].shape());
        for m in &self.matrices {
            for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
                *o += *v;
            }
        }
        out
    }
}

/// Distance partitioning relative to the root joint.
///
/// Partition 0 holds self connections (and neighbors at equal distance),
/// partition 1 edges flowing toward the root, partition 2 edges flowing away
/// from it. Each entry is scaled by `d_src^{-1/2} d_dst^{-1/2}` where `d` is
/// the degree of the full self-loop-augmented adjacency.
pub fn build_partitions<T: Scalar>(g: &SkeletonGraph) -> Result<PartitionedAdjacency<T>> {
    let v = g.joints;
    let dist: Vec<usize> = g
        .hop_distances()
        .into_iter()
        .enumerate()
        .map(|(j, d)| d.ok_or_else(|| Error::Topology(format!("joint {j} is disconnected"))))
        .collect::<Result<_>>()?;
    let mut degree = vec![1.0f64; v];
    for &(a, b) in &g.edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let norm = |a: usize, b: usize| T::of(1.0 / (degree[a] * degree[b]).sqrt());
    let mut parts: Vec<Tensor<T>> = (0..PARTITIONS).map(|_| Tensor::zeros(&[v, v])).collect();
    for j in 0..v {
        parts[0].data_mut()[j * v + j] = norm(j, j);
    }
    for &(a, b) in &g.edges {
        for (src, dst) in [(a, b), (b, a)] {
            let s = match dist[dst].cmp(&dist[src]) {
                std::cmp::Ordering::Less => 1,
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 0,
            };
            parts[s].data_mut()[src * v + dst] = norm(src, dst);
        }
    }
    Ok(PartitionedAdjacency { matrices: parts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientMode {
    Fixed,
    Learnable,
}

/// The adaptive ternary: fixed `A`, shared learnable `I`, private learnable
/// `U`, and mixing coefficients `(α, β, γ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyTernary<T> {
    pub base: PartitionedAdjacency<T>,
    pub inflected: Vec<Tensor<T>>,
    pub unique: Vec<Tensor<T>>,
    pub coefficients: [T; 3],
    pub mode: CoefficientMode,
}

/// Magnitude of the uniform noise `U` starts from.
pub const UNIQUE_INIT_SCALE: f64 = 1e-2;

/// `I` starts as a copy of `A`, `U` as small uniform noise drawn from `seed`.
pub fn init_ternary<T: Scalar>(
    base: &PartitionedAdjacency<T>,
    mode: CoefficientMode,
    coefficients: [T; 3],
    seed: u64,
) -> AdjacencyTernary<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unique = base
        .matrices
        .iter()
        .map(|m| {
            let data = (0..m.numel())
                .map(|_| T::of(rng.random_range(-UNIQUE_INIT_SCALE..=UNIQUE_INIT_SCALE)))
                .collect();
            Tensor::from_vec(m.shape(), data).expect("same shape as A")
        })
        .collect();
    AdjacencyTernary {
        base: base.clone(),
        inflected: base.matrices.clone(),
        unique,
        coefficients,
        mode,
    }
}

/// Tape handles of one layer's topology.
#[derive(Clone, Debug)]
pub struct TernaryVars {
    pub base: Vec<Var>,
    pub inflected: Vec<Var>,
    /// Absent when the private matrices are not part of the model being run.
    pub unique: Option<Vec<Var>>,
    /// `[α, β, γ]` as one-element tensors.
    pub coefficients: [Var; 3],
}

/// `α·A_s + β·I_s + γ·U_s` on the tape; the `U` term is omitted when the
/// private matrices are absent.
pub fn effective_adjacency<T: Scalar>(g: &mut Graph<T>, t: &TernaryVars, s: usize) -> Result<Var> {
    if s >= t.base.len() {
        return Err(Error::Usage(format!("partition {s} out of range ({} partitions)", t.base.len())));
    }
    let [alpha, beta, gamma] = t.coefficients;
    let a = g.scale_by(t.base[s], alpha)?;
    let i = g.scale_by(t.inflected[s], beta)?;
    let mut out = g.add(a, i)?;
    if let Some(u) = &t.unique {
        let u = g.scale_by(u[s], gamma)?;
        out = g.add(out, u)?;
    }
    Ok(out)
}

impl<T: Scalar> AdjacencyTernary<T> {
    /// Records this ternary on `g`; `I`, `U` (and coefficients in learnable
    /// mode) become gradient leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> TernaryVars {
        let base = self.base.matrices.iter().map(|m| g.constant(m.clone())).collect();
        let inflected = self.inflected.iter().map(|m| g.param(m.clone())).collect();
        let unique = Some(self.unique.iter().map(|m| g.param(m.clone())).collect());
        let coefficients = self.coefficients.map(|c| {
            let t = Tensor::scalar(c);
            match self.mode {
                CoefficientMode::Learnable => g.param(t),
                CoefficientMode::Fixed => g.constant(t),
            }
        });
        TernaryVars {
            base,
            inflected,
            unique,
            coefficients,
        }
    }
}
