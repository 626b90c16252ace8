//! The federated engine: local adapter training, size-weighted averaging,
//! lookahead momentum on the server, and round orchestration over a
//! simulated byte-counting transport.

mod round;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{DenseDelta, LowRankAdapter};
use crate::tensor::Tensor;

pub use round::{
    audit_uploads, init_clients, run_round, ClientRoundLog, ClientState, Defense, DpConfig,
    Message, RoundLog, ServerState, Transport, UploadAudit, AUDIT_CHUNK,
};
pub use train::{encode_docs, eval_loss, local_train, TrainReport};

/// Bytes per transmitted parameter.
pub const BYTES_PER_PARAM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub n_clients: usize,
    /// Total rounds `T`.
    pub rounds: usize,
    /// Server momentum `m`.
    pub momentum: f64,
    /// Server step size `η`.
    pub eta_global: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 10,
            rounds: 20,
            momentum: 0.5,
            eta_global: 0.01,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if self.n_clients == 0 {
            errors.push(format!("{prefix}.n_clients must be at least 1"));
        }
        if self.rounds == 0 {
            errors.push(format!("{prefix}.rounds must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errors.push(format!(
                "{prefix}.momentum: m must be in [0,1), got {}",
                self.momentum
            ));
        }
        if !(self.eta_global > 0.0 && self.eta_global.is_finite()) {
            errors.push(format!(
                "{prefix}.eta_global must be positive, got {}",
                self.eta_global
            ));
        }
    }
}

/// `Σ_n (|D_n| / Σ_k |D_k|) · Δw_n`, per tensor in
/// [`LowRankAdapter::tensors`] order. Summation runs in list order.
pub fn weighted_average(updates: &[&LowRankAdapter], sizes: &[usize]) -> Result<Vec<Tensor>> {
    if updates.is_empty() {
        return Err(Error::invalid("weighted_average needs at least one update"));
    }
    if updates.len() != sizes.len() {
        return Err(Error::invalid(format!(
            "{} updates but {} sizes",
            updates.len(),
            sizes.len()
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("client dataset sizes must be positive"));
    }
    let total: usize = sizes.iter().sum();
    let first = updates[0].tensors();
    let mut out: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (u, &s) in updates.iter().zip(sizes) {
        let ts = u.tensors();
        if ts.len() != out.len() {
            return Err(Error::shape(
                "weighted_average",
                format!("{} tensors vs {}", ts.len(), out.len()),
            ));
        }
        let w = s as f64 / total as f64;
        for (acc, t) in out.iter_mut().zip(ts) {
            acc.axpy(w, t)?;
        }
    }
    Ok(out)
}

/// One server update, element-wise:
/// `p = w + m·v`, `v' = m·v + η·(avg − p)`, `w' = w + v'`.
/// Returns `(w', v')`.
pub fn momentum_step(
    w: &[&Tensor],
    v: &[&Tensor],
    avg: &[Tensor],
    m: f64,
    eta: f64,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if w.len() != v.len() || w.len() != avg.len() {
        return Err(Error::shape(
            "momentum_step",
            format!(
                "{} weights, {} momenta, {} averages",
                w.len(),
                v.len(),
                avg.len()
            ),
        ));
    }
    let mut new_w = Vec::with_capacity(w.len());
    let mut new_v = Vec::with_capacity(w.len());
    for ((wt, vt), at) in w.iter().zip(v).zip(avg) {
        if wt.shape() != vt.shape() || wt.shape() != at.shape() {
            return Err(Error::shape(
                "momentum_step",
                format!(
                    "w {:?}, v {:?}, avg {:?}",
                    wt.shape(),
                    vt.shape(),
                    at.shape()
                ),
            ));
        }
        let mut nw = Vec::with_capacity(wt.numel());
        let mut nv = Vec::with_capacity(wt.numel());
        for ((&wi, &vi), &ai) in wt.data().iter().zip(vt.data()).zip(at.data()) {
            let p = wi + m * vi;
            let v1 = m * vi + eta * (ai - p);
            nv.push(v1);
            nw.push(wi + v1);
        }
        new_w.push(Tensor::new(wt.shape().to_vec(), nw)?);
        new_v.push(Tensor::new(wt.shape().to_vec(), nv)?);
    }
    Ok((new_w, new_v))
}

/// Trainable parameters and their f32 payload size.
pub fn comm_cost(adapter: &LowRankAdapter) -> (usize, usize) {
    let n = adapter.param_count();
    (n, n * BYTES_PER_PARAM)
}

/// The same accounting for a dense delta: full `d×k` per point.
pub fn comm_cost_dense(delta: &DenseDelta) -> (usize, usize) {
    let n = delta.param_count();
    (n, n * BYTES_PER_PARAM)
}
