//! Lite spatio-temporal graph convolution backbone and linear classifier.
//!
//! The backbone is a stack of `M` blocks. Each block runs a partitioned
//! spatial graph convolution, batch normalization, ReLU and a strided
//! temporal convolution. The head averages over frames and joints and
//! projects to the feature dimension; the classifier maps features to
//! logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::{
    build_partitions, effective_adjacency, init_ternary, CoefficientMode, PartitionedAdjacency,
    SkeletonGraph, TernaryVars, PARTITIONS,
};

/// How a block mixes information across joints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// `Σ_s W_s · f · (A_s ⊙ M_s)` with learnable masks `M_s`.
    Vanilla,
    /// `Σ_s W_s · f · (α A_s + β I_s + γ U_s)`.
    Ats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub frames: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub temporal_kernel: usize,
    pub strides: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub conv_mode: ConvMode,
    pub coefficient_mode: CoefficientMode,
    /// Initial (or, in fixed mode, permanent) `[α, β, γ]`.
    pub coefficients: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 25,
            frames: 50,
            in_channels: 3,
            channels: vec![16, 32, 64],
            temporal_kernel: 9,
            strides: vec![1, 2, 2],
            feature_dim: 128,
            num_classes: 10,
            conv_mode: ConvMode::Ats,
            coefficient_mode: CoefficientMode::Learnable,
            coefficients: [1.0, 1.0, 1.0],
        }
    }
}

impl ModelConfig {
    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "{} channel entries but {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("strides must be at least 1".into()));
        }
        let dims = [self.joints, self.frames, self.in_channels, self.feature_dim, self.num_classes];
        if dims.contains(&0) || self.channels.contains(&0) {
            return Err(Error::Config("model extents must be positive".into()));
        }
        Ok(())
    }
}

/// `(channels, frames, joints)` of every block output.
pub fn block_output_shapes(cfg: &ModelConfig) -> Vec<[usize; 3]> {
    let mut t = cfg.frames;
    cfg.channels
        .iter()
        .zip(&cfg.strides)
        .map(|(&c, &s)| {
            t = t.div_ceil(s);
            [c, t, cfg.joints]
        })
        .collect()
}

/// How batch normalization obtains its statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch; statistics are reported back.
    Batch,
    /// Normalize with the stored running statistics.
    Running,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// Outputs of the blocks that ran, in order.
    pub blocks: Vec<Var>,
    /// Pooled feature `h`, `[N × feature_dim]`.
    pub features: Var,
    /// Classifier output, when the classifier parameters were bound.
    pub logits: Option<Var>,
    /// Batch statistics per block that ran in [`BnMode::Batch`].
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

pub mod keys {
    pub fn spatial(block: usize, s: usize) -> String {
        format!("backbone.block{block}.w{s}")
    }
    pub fn mask(block: usize, s: usize) -> String {
        format!("backbone.block{block}.mask{s}")
    }
    pub fn temporal(block: usize) -> String {
        format!("backbone.block{block}.temporal")
    }
    pub fn inflected(block: usize, s: usize) -> String {
        format!("im.block{block}.s{s}")
    }
    pub fn unique(block: usize, s: usize) -> String {
        format!("um.block{block}.s{s}")
    }
    pub fn coefficient(block: usize, which: usize) -> String {
        const NAMES: [&str; 3] = ["alpha", "beta", "gamma"];
        format!("coef.block{block}.{}", NAMES[which])
    }
    pub fn bn(block: usize, field: &str) -> String {
        format!("bn.block{block}.{field}")
    }
    pub const PROJ_WEIGHT: &str = "backbone.proj.weight";
    pub const PROJ_BIAS: &str = "backbone.proj.bias";
    pub const CLS_WEIGHT: &str = "classifier.weight";
    pub const CLS_BIAS: &str = "classifier.bias";
}

/// Backbone plus classifier definition; parameters live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct StGcn<T> {
    pub config: ModelConfig,
    pub graph: SkeletonGraph,
    pub adjacency: PartitionedAdjacency<T>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

impl<T: Scalar> StGcn<T> {
    pub fn new(config: ModelConfig, graph: SkeletonGraph) -> Result<Self> {
        config.validate()?;
        if graph.joints != config.joints {
            return Err(Error::Config(format!(
                "skeleton has {} joints but the model expects {}",
                graph.joints, config.joints
            )));
        }
        let adjacency = build_partitions(&graph)?;
        Ok(Self {
            config,
            graph,
            adjacency,
        })
    }

    pub fn blocks(&self) -> usize {
        self.config.blocks()
    }

    fn block_in_channels(&self, b: usize) -> usize {
        if b == 0 {
            self.config.in_channels
        } else {
            self.config.channels[b - 1]
        }
    }

    /// Shared backbone parameters: weights, masks or `I`, batch norm, projection.
    pub fn init_shared(&self, seed: u64) -> ParamSet<T> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let v = cfg.joints;
        for b in 0..self.blocks() {
            let (ci, co) = (self.block_in_channels(b), cfg.channels[b]);
            for s in 0..PARTITIONS {
                p.insert(keys::spatial(b, s), uniform(&mut rng, &[co, ci], (1.0 / ci as f64).sqrt()));
                match cfg.conv_mode {
                    ConvMode::Vanilla => p.insert(keys::mask(b, s), Tensor::ones(&[v, v])),
                    ConvMode::Ats => p.insert(keys::inflected(b, s), self.adjacency.matrices[s].clone()),
                }
            }
            let fan = (co * cfg.temporal_kernel) as f64;
            p.insert(
                keys::temporal(b),
                uniform(&mut rng, &[co, co, cfg.temporal_kernel], (1.0 / fan).sqrt()),
            );
            p.insert(keys::bn(b, "gamma"), Tensor::ones(&[co]));
            p.insert(keys::bn(b, "beta"), Tensor::zeros(&[co]));
            p.insert(keys::bn(b, "running_mean"), Tensor::zeros(&[co]));
            p.insert(keys::bn(b, "running_var"), Tensor::ones(&[co]));
        }
        let last = *cfg.channels.last().expect("validated non-empty");
        let bound = (1.0 / last as f64).sqrt();
        p.insert(keys::PROJ_WEIGHT, uniform(&mut rng, &[last, cfg.feature_dim], bound));
        p.insert(keys::PROJ_BIAS, uniform(&mut rng, &[cfg.feature_dim], bound));
        p
    }

    /// Client-private parameters: `U`, coefficients and the classifier.
    pub fn init_local(&self, seed: u64) -> ParamSet<T> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        if cfg.conv_mode == ConvMode::Ats {
            let coeffs = cfg.coefficients.map(T::of);
            for b in 0..self.blocks() {
                let t = init_ternary(&self.adjacency, cfg.coefficient_mode, coeffs, rng.random());
                for (s, u) in t.unique.into_iter().enumerate() {
                    p.insert(keys::unique(b, s), u);
                }
                for (k, c) in coeffs.iter().enumerate() {
                    p.insert(keys::coefficient(b, k), Tensor::scalar(*c));
                }
            }
        }
        let bound = (1.0 / cfg.feature_dim as f64).sqrt();
        p.insert(keys::CLS_WEIGHT, uniform(&mut rng, &[cfg.feature_dim, cfg.num_classes], bound));
        p.insert(keys::CLS_BIAS, uniform(&mut rng, &[cfg.num_classes], bound));
        p
    }

    /// Shared and local parameters together.
    pub fn init_params(&self, seed: u64) -> ParamSet<T> {
        let mut p = self.init_shared(seed);
        p.overlay(&self.init_local(seed.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        p
    }

    /// Whether a key is updated by gradient descent under this configuration.
    pub fn is_trainable(&self, key: &str) -> bool {
        if crate::params::is_running_stat(key) {
            return false;
        }
        if key.starts_with("coef.") {
            return self.config.coefficient_mode == CoefficientMode::Learnable;
        }
        true
    }

    fn topology_vars(&self, g: &mut Graph<T>, p: &Bound, b: usize) -> Result<TernaryVars> {
        let base = self.adjacency.matrices.iter().map(|m| g.constant(m.clone())).collect();
        let inflected = (0..PARTITIONS)
            .map(|s| p.var(&keys::inflected(b, s)))
            .collect::<Result<_>>()?;
        let unique = (0..PARTITIONS)
            .map(|s| p.get(&keys::unique(b, s)))
            .collect::<Option<Vec<_>>>();
        let coefficients = [
            p.var(&keys::coefficient(b, 0))?,
            p.var(&keys::coefficient(b, 1))?,
            p.var(&keys::coefficient(b, 2))?,
        ];
        Ok(TernaryVars {
            base,
            inflected,
            unique,
            coefficients,
        })
    }

    /// One block on `x: [N × C_in × T × V]`.
    pub fn block(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        b: usize,
        x: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = g.shape(x).to_vec();
        let expect_c = self.block_in_channels(b);
        let shapes = block_output_shapes(&self.config);
        let expect_t = if b == 0 { self.config.frames } else { shapes[b - 1][1] };
        if sx.len() != 4 || sx[1] != expect_c || sx[2] != expect_t || sx[3] != self.config.joints {
            return Err(dim_err(format!(
                "block {b} expects input [N, {expect_c}, {expect_t}, {}], got {sx:?}",
                self.config.joints
            )));
        }
        let ternary = match self.config.conv_mode {
            ConvMode::Ats => Some(self.topology_vars(g, p, b)?),
            ConvMode::Vanilla => None,
        };
        let mut acc: Option<Var> = None;
        for s in 0..PARTITIONS {
            let adj = match &ternary {
                Some(t) => effective_adjacency(g, t, s)?,
                None => {
                    let a = g.constant(self.adjacency.matrices[s].clone());
                    g.hadamard(a, p.var(&keys::mask(b, s))?)?
                }
            };
            let mixed = g.graph_mix(x, adj)?;
            let z = g.channel_mix(p.var(&keys::spatial(b, s))?, mixed)?;
            acc = Some(match acc {
                Some(a) => g.add(a, z)?,
                None => z,
            });
        }
        let spatial = acc.expect("at least one partition");
        let gamma = p.var(&keys::bn(b, "gamma"))?;
        let beta = p.var(&keys::bn(b, "beta"))?;
        let (normed, stats) = match mode {
            BnMode::Batch => {
                let (y, st) = g.batchnorm_train(spatial, gamma, beta)?;
                (y, Some(st))
            }
            BnMode::Running => {
                let rm = g.value(p.var(&keys::bn(b, "running_mean"))?).data().to_vec();
                let rv = g.value(p.var(&keys::bn(b, "running_var"))?).data().to_vec();
                (g.batchnorm_eval(spatial, gamma, beta, &rm, &rv)?, None)
            }
        };
        let act = g.relu(normed);
        let out = g.temporal_conv(act, p.var(&keys::temporal(b))?, self.config.strides[b])?;
        Ok((out, stats))
    }

    /// Runs blocks `start..end` on `x`, returning every block output.
    pub fn run_blocks(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        start: usize,
        end: usize,
        mode: BnMode,
    ) -> Result<(Vec<Var>, Vec<(usize, BatchStats<T>)>)> {
        if start > end || end > self.blocks() {
            return Err(Error::Usage(format!(
                "block range {start}..{end} invalid for {} blocks",
                self.blocks()
            )));
        }
        let mut outs = Vec::with_capacity(end - start);
        let mut stats = Vec::new();
        let mut cur = x;
        for b in start..end {
            let (y, st) = self.block(g, p, b, cur, mode)?;
            if let Some(st) = st {
                stats.push((b, st));
            }
            outs.push(y);
            cur = y;
        }
        Ok((outs, stats))
    }

    /// Pool, project and (when bound) classify the last block output.
    pub fn head(&self, g: &mut Graph<T>, p: &Bound, last: Var) -> Result<(Var, Option<Var>)> {
        let pooled = g.mean_pool(last)?;
        let proj = g.matmul(pooled, p.var(keys::PROJ_WEIGHT)?)?;
        let h = g.add_bias(proj, p.var(keys::PROJ_BIAS)?)?;
        let logits = match (p.get(keys::CLS_WEIGHT), p.get(keys::CLS_BIAS)) {
            (Some(w), Some(bias)) => {
                let z = g.matmul(h, w)?;
                Some(g.add_bias(z, bias)?)
            }
            _ => None,
        };
        Ok((h, logits))
    }

    /// Full forward pass on `x: [N × C_in × T × V]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var, mode: BnMode) -> Result<ForwardTrace<T>> {
        self.forward_from_block(g, p, x, 0, mode)
    }

    /// Runs blocks `start..M` on a block-`start-1` output (or the raw input
    /// when `start == 0`), then the head. `start == M` runs the head only.
    pub fn forward_from_block(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        mid: Var,
        start: usize,
        mode: BnMode,
    ) -> Result<ForwardTrace<T>> {
        if start > self.blocks() {
            return Err(Error::Usage(format!(
                "start block {start} beyond {} blocks",
                self.blocks()
            )));
        }
        if start > 0 {
            let [c, t, v] = block_output_shapes(&self.config)[start - 1];
            let s = g.shape(mid);
            if s.len() != 4 || s[1..] != [c, t, v] {
                return Err(dim_err(format!(
                    "block {start} expects a mid feature [N, {c}, {t}, {v}], got {s:?}"
                )));
            }
        }
        let (blocks, bn_stats) = self.run_blocks(g, p, mid, start, self.blocks(), mode)?;
        let last = blocks.last().copied().unwrap_or(mid);
        let (features, logits) = self.head(g, p, last)?;
        Ok(ForwardTrace {
            blocks,
            features,
            logits,
            bn_stats,
        })
    }

    /// Folds batch statistics into running estimates with momentum 0.1.
    pub fn update_running_stats(&self, params: &mut ParamSet<T>, stats: &[(usize, BatchStats<T>)]) {
        let m = T::of(BN_MOMENTUM);
        for (b, st) in stats {
            for (field, values) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                if let Some(r) = params.get_mut(&keys::bn(*b, field)) {
                    for (rv, v) in r.data_mut().iter_mut().zip(values) {
                        *rv = (T::one() - m) * *rv + m * *v;
                    }
                }
            }
        }
    }
}

/// Running-statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
