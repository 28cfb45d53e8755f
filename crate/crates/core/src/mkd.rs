//! Multi-grain knowledge distillation.
//!
//! For grain `m` the first `m` blocks of the frozen server model produce a
//! mid feature which the client's remaining blocks and classifier turn into
//! teacher logits. The server segment is evaluated on a scratch tape, so no
//! gradient can reach server parameters; the client's deep blocks and
//! classifier stay on the main tape and are trained through the streams.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::softmax_in_place;
use crate::model::{BnMode, StGcn};
use crate::params::{is_unique_key, Bound, Namespace, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MkdConfig {
    /// Number of server blocks grafted, `b̄`; streams use grains `1..=b̄`.
    pub grains: usize,
    pub kd_temperature: f64,
}

impl Default for MkdConfig {
    fn default() -> Self {
        Self {
            grains: 2,
            kd_temperature: 1.0,
        }
    }
}

impl MkdConfig {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.grains >= blocks {
            return Err(Error::Config(format!(
                "grain count {} must be below the block count {blocks}",
                self.grains
            )));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "kd temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        Ok(())
    }
}

/// One grafted teacher path.
#[derive(Clone, Copy, Debug)]
pub struct TeacherStream {
    pub grain: usize,
    /// Server feature after `grain` blocks, a constant on the client tape.
    pub mid: Var,
    pub logits: Var,
}

/// Parameters the server segment runs with: the server's shared values
/// over the client's private ones (`U`, coefficients, and anything the
/// server does not hold, such as batch norm under FedBN).
pub fn teacher_params<T: Scalar>(server: &ParamSet<T>, client: &ParamSet<T>) -> Result<ParamSet<T>> {
    let mut out = client.clone();
    for (k, v) in server.iter() {
        if is_unique_key(k) || Namespace::of_key(k) == Some(Namespace::Classifier) {
            continue;
        }
        if let Some(c) = client.get(k) {
            if c.shape() != v.shape() {
                return Err(Error::Grafting(format!(
                    "server `{k}` has shape {:?}, client {:?}",
                    v.shape(),
                    c.shape()
                )));
            }
        }
        out.insert(k, v.clone());
    }
    Ok(out)
}

/// Builds the streams for grains `1..=cfg.grains` on `g`, whose client
/// parameters are bound as `client`.
pub fn build_teacher_streams<T: Scalar>(
    model: &StGcn<T>,
    server: &ParamSet<T>,
    client_params: &ParamSet<T>,
    g: &mut Graph<T>,
    client: &Bound,
    x: &Tensor<T>,
    cfg: &MkdConfig,
) -> Result<Vec<TeacherStream>> {
    cfg.validate(model.blocks())?;
    if cfg.grains == 0 {
        return Ok(Vec::new());
    }
    let composite = teacher_params(server, client_params)?;
    let mut scratch = Graph::new();
    let bound = composite.bind(&mut scratch, |_| false);
    let input = scratch.constant(x.clone());
    let (mids, _) = model
        .run_blocks(&mut scratch, &bound, input, 0, cfg.grains, BnMode::Batch)
        .map_err(grafting)?;
    let mut streams = Vec::with_capacity(cfg.grains);
    for (i, mid) in mids.into_iter().enumerate() {
        let grain = i + 1;
        let mid = g.constant(scratch.value(mid).clone());
        let trace = model
            .forward_from_block(g, client, mid, grain, BnMode::Batch)
            .map_err(grafting)?;
        let logits = trace
            .logits
            .ok_or_else(|| Error::Grafting("client classifier is not bound".into()))?;
        streams.push(TeacherStream { grain, mid, logits });
    }
    Ok(streams)
}

fn grafting(e: Error) -> Error {
    match e {
        Error::Dimension(m) => Error::Grafting(m),
        other => other,
    }
}

fn scaled_logits<T: Scalar>(g: &mut Graph<T>, logits: Var, temperature: f64) -> Var {
    if temperature == 1.0 {
        logits
    } else {
        g.scale(logits, T::of(1.0 / temperature))
    }
}

/// `Σ_m KL(softmax(teacher_m) ‖ softmax(student))`, batch-averaged, with
/// the teacher distributions treated as fixed targets.
pub fn kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    streams: &[TeacherStream],
    student: Var,
    temperature: f64,
) -> Result<Var> {
    let shape = g.shape(student).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("student logits must be [N × classes], got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    if streams.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let s = scaled_logits(g, student, temperature);
    let log_q = g.log_softmax_rows(s)?;
    let mut target = vec![T::zero(); n * k];
    let mut entropy = T::zero();
    for st in streams {
        if g.shape(st.logits) != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "teacher logits {:?} vs student {shape:?}",
                g.shape(st.logits)
            )));
        }
        let inv_t = T::of(1.0 / temperature);
        let mut p: Vec<T> = g.value(st.logits).data().iter().map(|&v| v * inv_t).collect();
        for row in p.chunks_mut(k) {
            softmax_in_place(row);
        }
        for (acc, &pi) in target.iter_mut().zip(&p) {
            *acc += pi;
            if pi > T::zero() {
                entropy += pi * pi.ln();
            }
        }
    }
    let target = g.constant(Tensor::from_vec(&[n, k], target)?);
    let cross = g.hadamard(target, log_q)?;
    let cross = g.sum(cross);
    let neg = g.scale(cross, T::of(-1.0 / n as f64));
    let constant = g.constant(Tensor::scalar(entropy / T::of(n as f64)));
    g.add(neg, constant)
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Batch-averaged cross entropy of `logits: [N × K]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("logits must be [N × classes], got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    check_labels(labels, n, k)?;
    let mut onehot = vec![T::zero(); n * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = T::one();
    }
    let onehot = g.constant(Tensor::from_vec(&[n, k], onehot)?);
    let log_p = g.log_softmax_rows(logits)?;
    let picked = g.hadamard(onehot, log_p)?;
    let total = g.sum(picked);
    Ok(g.scale(total, T::of(-1.0 / n as f64)))
}

/// `CE(student) + Σ_m CE(teacher_m)`.
pub fn dual_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    streams: &[TeacherStream],
    student: Var,
    labels: &[usize],
) -> Result<Var> {
    let mut loss = cross_entropy(g, student, labels)?;
    for st in streams {
        let ce = cross_entropy(g, st.logits, labels)?;
        loss = g.add(loss, ce)?;
    }
    Ok(loss)
}
