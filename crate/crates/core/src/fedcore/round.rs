use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{encode_docs, local_train, TrainReport};
use super::{comm_cost, momentum_step, weighted_average, FederationConfig};
use crate::error::{Error, Result};
use crate::lora::{decode_message, encode_message, LoraConfig, LowRankAdapter, Role};
use crate::optim::OptimizerConfig;
use crate::privacy::{dp_noise, ClientDataset};
use crate::seed;
use crate::tensor::Tensor;
use crate::tinylm::TinyLM;

/// Which defense shapes the secure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Defense {
    /// Train on the masked view.
    #[serde(rename = "scrub")]
    Scrub,
    /// Train on the raw view, noise the update.
    #[serde(rename = "dp")]
    Dp,
    /// Train on the masked view, noise the update.
    #[serde(rename = "scrub+dp")]
    ScrubDp,
}

impl Defense {
    pub fn scrubs(self) -> bool {
        matches!(self, Defense::Scrub | Defense::ScrubDp)
    }

    pub fn noises(self) -> bool {
        matches!(self, Defense::Dp | Defense::ScrubDp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub sigma: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip_norm: 1.0,
            sigma: 0.5,
        }
    }
}

impl DpConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            errors.push(format!(
                "{prefix}.clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            errors.push(format!(
                "{prefix}.sigma must be non-negative, got {}",
                self.sigma
            ));
        }
    }
}

/// Server side: global adapter `Δwᵗ`, momentum `Δvᵗ` (zero at t = 0), round
/// counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub global: LowRankAdapter,
    pub momentum: Vec<Tensor>,
    pub t: usize,
    pub cfg: FederationConfig,
}

impl ServerState {
    pub fn new(global: LowRankAdapter, cfg: FederationConfig) -> Self {
        let momentum = global
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        ServerState {
            global: global.with_role(Role::Global),
            momentum,
            t: 0,
            cfg,
        }
    }

    pub fn finished(&self) -> bool {
        self.t >= self.cfg.rounds
    }
}

/// One client. `secure` is the latest locally trained secure adapter;
/// every `revealing` adapter is trained once on the raw view and never
/// leaves the client. `revealing[0]` is the primary one.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub dataset: ClientDataset,
    pub secure: LowRankAdapter,
    pub revealing: Vec<LowRankAdapter>,
    pub revealing_reports: Vec<TrainReport>,
    pub secure_steps: u64,
    raw_tokens: Vec<Vec<u32>>,
    masked_tokens: Vec<Vec<u32>>,
}

impl ClientState {
    /// Reassembles a client from persisted parts.
    pub fn from_parts(
        model: &TinyLM,
        dataset: ClientDataset,
        secure: LowRankAdapter,
        revealing: Vec<LowRankAdapter>,
        revealing_reports: Vec<TrainReport>,
        secure_steps: u64,
    ) -> Result<Self> {
        if revealing.is_empty() || revealing.len() != revealing_reports.len() {
            return Err(Error::invalid(format!(
                "{} revealing adapters with {} reports",
                revealing.len(),
                revealing_reports.len()
            )));
        }
        let tok = model.tokenizer();
        Ok(ClientState {
            client_id: dataset.client_id,
            raw_tokens: encode_docs(tok, dataset.raw_texts())?,
            masked_tokens: encode_docs(tok, dataset.masked_texts())?,
            dataset,
            secure,
            revealing,
            revealing_reports,
            secure_steps,
        })
    }

    pub fn raw_tokens(&self) -> &[Vec<u32>] {
        &self.raw_tokens
    }

    pub fn masked_tokens(&self) -> &[Vec<u32>] {
        &self.masked_tokens
    }
}

/// Builds client states: a fresh secure adapter and `n_revealing` revealing
/// adapters, each trained locally on the raw view with `revealing_cfg` from
/// its own initialization.
pub fn init_clients(
    model: &TinyLM,
    datasets: Vec<ClientDataset>,
    lora: &LoraConfig,
    revealing_cfg: &OptimizerConfig,
    n_revealing: usize,
    seed: u64,
) -> Result<Vec<ClientState>> {
    if n_revealing == 0 {
        return Err(Error::invalid(
            "each client needs at least one revealing adapter",
        ));
    }
    datasets
        .into_par_iter()
        .map(|dataset| {
            let id = dataset.client_id as u64;
            let tok = model.tokenizer();
            let raw_tokens = encode_docs(tok, dataset.raw_texts())?;
            let masked_tokens = encode_docs(tok, dataset.masked_texts())?;
            let secure = lora
                .init(
                    model,
                    Role::Secure,
                    seed::derive_index(seed::derive(seed, "secure-init"), id),
                )?
                .with_id(format!("secure-c{id}"));
            let mut revealing = Vec::with_capacity(n_revealing);
            let mut revealing_reports = Vec::with_capacity(n_revealing);
            for j in 0..n_revealing {
                // Adapter 0 keeps the seeds it would have as the only one.
                let s = |label: &str| {
                    let base = seed::derive_index(seed::derive(seed, label), id);
                    if j == 0 {
                        base
                    } else {
                        seed::derive_index(base, j as u64)
                    }
                };
                let name = if j == 0 {
                    format!("revealing-c{id}")
                } else {
                    format!("revealing-c{id}-{j}")
                };
                let start = lora
                    .init(model, Role::Revealing, s("revealing-init"))?
                    .with_id(name);
                let (adapter, report) = local_train(
                    model,
                    &start,
                    &raw_tokens,
                    revealing_cfg,
                    s("revealing-train"),
                )?;
                revealing.push(adapter);
                revealing_reports.push(report);
            }
            Ok(ClientState {
                client_id: dataset.client_id,
                dataset,
                secure,
                revealing,
                revealing_reports,
                secure_steps: 0,
                raw_tokens,
                masked_tokens,
            })
        })
        .collect()
}

/// One serialized message on the simulated network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub round: usize,
    /// Sender; `None` for the server's broadcast.
    pub from: Option<usize>,
    pub bytes: Vec<u8>,
}

/// In-process queue recording every message that crossed the simulated
/// network, in send order.
#[derive(Clone, Debug, Default)]
pub struct Transport {
    pub messages: Vec<Message>,
}

impl Transport {
    pub fn uploads(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.from.is_some())
    }

    pub fn total_bytes(&self) -> usize {
        self.messages.iter().map(|m| m.bytes.len()).sum()
    }
}

/// Result of scanning upload bytes for material that must stay local.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadAudit {
    pub messages_scanned: usize,
    pub bytes_scanned: usize,
    pub pii_strings_checked: usize,
    /// Raw-view PII strings found in some upload.
    pub pii_hits: Vec<String>,
    pub revealing_chunks_checked: usize,
    /// Revealing-adapter tensor chunks found in some upload.
    pub revealing_hits: usize,
}

impl UploadAudit {
    pub fn clean(&self) -> bool {
        self.pii_hits.is_empty() && self.revealing_hits == 0
    }
}

/// Bytes per tensor chunk searched for by [`audit_uploads`].
pub const AUDIT_CHUNK: usize = 32;

/// Scans every upload for each `pii` string and for every non-zero
/// [`AUDIT_CHUNK`]-byte chunk of the revealing adapters' f32 encoding, the
/// precision used on the wire.
pub fn audit_uploads<'a>(
    messages: impl IntoIterator<Item = &'a Message>,
    pii: &[String],
    revealing: &[&LowRankAdapter],
) -> Result<UploadAudit> {
    let uploads: Vec<&Message> = messages.into_iter().filter(|m| m.from.is_some()).collect();
    let mut chunks: Vec<Vec<u8>> = Vec::new();
    for a in revealing {
        for t in a.tensors() {
            let bytes: Vec<u8> = t
                .data()
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            chunks.extend(
                bytes
                    .chunks_exact(AUDIT_CHUNK)
                    .filter(|c| c.iter().any(|&b| b != 0))
                    .map(<[u8]>::to_vec),
            );
        }
    }
    let find = |patterns: &[&[u8]]| -> Result<Vec<bool>> {
        let mut seen = vec![false; patterns.len()];
        if patterns.is_empty() {
            return Ok(seen);
        }
        let ac = aho_corasick::AhoCorasick::new(patterns)
            .map_err(|e| Error::invalid(format!("audit patterns: {e}")))?;
        for m in &uploads {
            for hit in ac.find_overlapping_iter(&m.bytes[..]) {
                seen[hit.pattern().as_usize()] = true;
            }
        }
        Ok(seen)
    };
    let pii_refs: Vec<&[u8]> = pii.iter().map(|s| s.as_bytes()).collect();
    let pii_seen = find(&pii_refs)?;
    let chunk_refs: Vec<&[u8]> = chunks.iter().map(Vec::as_slice).collect();
    let chunk_seen = find(&chunk_refs)?;
    Ok(UploadAudit {
        messages_scanned: uploads.len(),
        bytes_scanned: uploads.iter().map(|m| m.bytes.len()).sum(),
        pii_strings_checked: pii.len(),
        pii_hits: pii
            .iter()
            .zip(&pii_seen)
            .filter(|(_, &s)| s)
            .map(|(p, _)| p.clone())
            .collect(),
        revealing_chunks_checked: chunks.len(),
        revealing_hits: chunk_seen.iter().filter(|&&s| s).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundLog {
    pub client_id: usize,
    pub steps: u64,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    /// Secure-adapter parameters × 4.
    pub message_bytes: usize,
    /// Encoded message length including header and names.
    pub wire_bytes: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub t: usize,
    pub broadcast_bytes: usize,
    pub clients: Vec<ClientRoundLog>,
}

/// Broadcast, local training, upload, aggregation, momentum. Clients train
/// concurrently; uploads are aggregated in ascending `client_id` order.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    model: &TinyLM,
    cfg: &OptimizerConfig,
    defense: Defense,
    dp: &DpConfig,
    transport: &mut Transport,
    seed: u64,
) -> Result<RoundLog> {
    if server.finished() {
        return Err(Error::invalid(format!(
            "round {} requested but T = {}",
            server.t, server.cfg.rounds
        )));
    }
    if clients.is_empty() {
        return Err(Error::invalid("a round needs at least one client"));
    }
    let t = server.t;
    let broadcast = encode_message(&server.global)?;
    let broadcast_bytes = broadcast.len();
    transport.messages.push(Message {
        round: t,
        from: None,
        bytes: broadcast.clone(),
    });
    let received = decode_message(&broadcast)?;
    let round_seed = seed::derive_index(seed::derive(seed, "round"), t as u64);

    clients.sort_by_key(|c| c.client_id);
    let results: Vec<Result<(Vec<u8>, ClientRoundLog)>> = clients
        .par_iter_mut()
        .map(|client| {
            let id = client.client_id as u64;
            let start = received
                .clone()
                .with_role(Role::Secure)
                .with_id(format!("secure-c{id}-t{t}"));
            let docs = if defense.scrubs() {
                &client.masked_tokens
            } else {
                &client.raw_tokens
            };
            let (trained, report) = local_train(
                model,
                &start,
                docs,
                cfg,
                seed::derive_index(seed::derive(round_seed, "train"), id),
            )?;
            let upload = if defense.noises() {
                let delta: Vec<Tensor> = trained
                    .tensors()
                    .iter()
                    .zip(start.tensors())
                    .map(|(a, b)| {
                        let mut d = (*a).clone();
                        d.axpy(-1.0, b)?;
                        Ok(d)
                    })
                    .collect::<Result<_>>()?;
                let noisy = dp_noise(
                    &delta,
                    dp.clip_norm,
                    dp.sigma,
                    seed::derive_index(seed::derive(round_seed, "dp"), id),
                )?;
                let tensors = start
                    .tensors()
                    .iter()
                    .zip(noisy)
                    .map(|(s, mut n)| {
                        n.axpy(1.0, s)?;
                        Ok(n)
                    })
                    .collect::<Result<Vec<_>>>()?;
                trained.with_tensors(tensors)?
            } else {
                trained.clone()
            };
            let bytes = encode_message(&upload)?;
            let log = ClientRoundLog {
                client_id: client.client_id,
                steps: report.steps,
                first_epoch_loss: report.epoch_losses[0],
                last_epoch_loss: *report.epoch_losses.last().expect("at least one epoch"),
                message_bytes: comm_cost(&upload).1,
                wire_bytes: bytes.len(),
                flops: report.flops,
            };
            client.secure = trained;
            client.secure_steps += report.steps;
            Ok((bytes, log))
        })
        .collect();

    let mut uploads = Vec::with_capacity(clients.len());
    let mut logs = Vec::with_capacity(clients.len());
    for (client, r) in clients.iter().zip(results) {
        let (bytes, log) = r?;
        uploads.push(decode_message(&bytes)?);
        transport.messages.push(Message {
            round: t,
            from: Some(client.client_id),
            bytes,
        });
        logs.push(log);
    }
    let refs: Vec<&LowRankAdapter> = uploads.iter().collect();
    let sizes: Vec<usize> = clients
        .iter()
        .map(|c| c.dataset.masked_view.len())
        .collect();
    let avg = weighted_average(&refs, &sizes)?;
    let w = server.global.tensors();
    let v: Vec<&Tensor> = server.momentum.iter().collect();
    let (new_w, new_v) = momentum_step(&w, &v, &avg, server.cfg.momentum, server.cfg.eta_global)?;
    server.global = server.global.with_tensors(new_w)?;
    server.momentum = new_v;
    server.t += 1;
    Ok(RoundLog {
        t,
        broadcast_bytes,
        clients: logs,
    })
}
