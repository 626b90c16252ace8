//! The end-to-end experiment as a sequence of stages. Every stage reads its
//! inputs from the output directory and writes its outputs there, so a
//! full run and a stage-by-stage run see the same (f32-stored) artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use securegate_core::attacks::{
    analytic_fusion_flops, evaluate_conditions, flops_account, AttackReport, AttackSettings,
    ClientSystem, FlopTrace, Phase,
};
use securegate_core::fedcore::{
    audit_uploads, init_clients, run_round, ClientState, RoundLog, ServerState, TrainReport,
    Transport, UploadAudit,
};
use securegate_core::fusion::{
    build_revealing_personalized, build_secure_personalized, FusionReport,
};
use securegate_core::gating::{
    synth_routing_data, train_gating, GatingTrace, KeyRegistry, Router, RoutingCategory,
};
use securegate_core::lora::{self, AdapterFile, Role};
use securegate_core::privacy::{
    generate_corpus, generate_dictionary, public_corpus, read_corpus_jsonl, write_corpus_jsonl,
    ClientDataset, Detector, PiiDictionary,
};
use securegate_core::seed;
use securegate_core::tinylm::{load_checkpoint, pretrain_base, save_checkpoint};
use securegate_core::{AdapterRef, DenseDelta, LowRankAdapter, TinyLM};

use crate::artifacts::{
    append_jsonl, ensure_parent, read_json, write_bytes, write_json, Layout, Manifest, FAILURE,
    TIMINGS,
};
use crate::config::ExperimentConfig;
use crate::tables::emit_tables;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Corpus,
    Pretrain,
    Init,
    Federate,
    Fusion,
    Gating,
    Evaluate,
    Tables,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Corpus,
        Stage::Pretrain,
        Stage::Init,
        Stage::Federate,
        Stage::Fusion,
        Stage::Gating,
        Stage::Evaluate,
        Stage::Tables,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Pretrain => "pretrain",
            Stage::Init => "init",
            Stage::Federate => "federate",
            Stage::Fusion => "fusion",
            Stage::Gating => "gating",
            Stage::Evaluate => "evaluate",
            Stage::Tables => "tables",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `"corpus,pretrain"` as stages in pipeline order, duplicates removed.
pub fn parse_stages(list: &str) -> std::result::Result<Vec<Stage>, String> {
    let mut out = BTreeSet::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.insert(Stage::parse(name).ok_or_else(|| {
            let known: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
            format!("unknown stage `{name}` (stages: {})", known.join(", "))
        })?);
    }
    if out.is_empty() {
        return Err("no stages selected".into());
    }
    Ok(out.into_iter().collect())
}

/// A stage failed; its name and cause are also persisted in `failure.json`.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Failure {
    stage: Stage,
    error: String,
}

/// What [`run_experiment`] did.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub layout: Layout,
    pub stages: Vec<Stage>,
    pub manifest: Manifest,
    /// Wall seconds per stage, also written to `timings.json`.
    pub seconds: BTreeMap<Stage, f64>,
}

/// Runs `stages` in pipeline order against `layout`, then rewrites the
/// manifest. The resolved config is stored with the artifacts.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    layout: &Layout,
    stages: &[Stage],
) -> std::result::Result<RunArtifacts, StageError> {
    let mut order = stages.to_vec();
    order.sort();
    order.dedup();
    let setup = |stage| move |e: anyhow::Error| StageError { stage, source: e };
    let first = *order.first().unwrap_or(&Stage::Corpus);
    write_bytes(&layout.config(), cfg.to_toml().as_bytes()).map_err(setup(first))?;
    let failure = layout.path(FAILURE);
    if failure.exists() {
        fs::remove_file(&failure).map_err(|e| setup(first)(e.into()))?;
    }
    let mut seconds = BTreeMap::new();
    for &stage in &order {
        let start = Instant::now();
        if let Err(e) = run_stage(stage, cfg, layout) {
            let _ = write_json(
                &failure,
                &Failure {
                    stage,
                    error: format!("{e:#}"),
                },
            );
            return Err(StageError { stage, source: e });
        }
        seconds.insert(stage, start.elapsed().as_secs_f64());
    }
    let last = *order.last().unwrap_or(&Stage::Tables);
    let manifest = finish(layout, &seconds).map_err(setup(last))?;
    Ok(RunArtifacts {
        layout: layout.clone(),
        stages: order,
        manifest,
        seconds,
    })
}

/// Writes timings (merged with earlier runs into the same directory) and a
/// fresh manifest.
fn finish(layout: &Layout, seconds: &BTreeMap<Stage, f64>) -> Result<Manifest> {
    let path = layout.path(TIMINGS);
    let mut all: BTreeMap<Stage, f64> = if path.exists() {
        read_json(&path).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    all.extend(seconds.iter().map(|(k, v)| (*k, *v)));
    write_json(&path, &all)?;
    let manifest = Manifest::build(layout)?;
    manifest.write(layout)?;
    Ok(manifest)
}

pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    match stage {
        Stage::Corpus => stage_corpus(cfg, layout),
        Stage::Pretrain => stage_pretrain(cfg, layout),
        Stage::Init => stage_init(cfg, layout),
        Stage::Federate => stage_federate(cfg, layout),
        Stage::Fusion => stage_fusion(cfg, layout),
        Stage::Gating => stage_gating(cfg, layout),
        Stage::Evaluate => stage_evaluate(cfg, layout),
        Stage::Tables => emit_tables(layout).map(|_| ()),
    }
}

fn need(path: &std::path::Path, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        bail!("missing {}: run the `{stage}` stage first", path.display())
    }
}

// ---- corpus ----

/// Scrubbing and detection quality over every generated client document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub clients: usize,
    pub documents: usize,
    pub planted_spans: usize,
    pub detected_spans: usize,
    pub true_positives: usize,
    pub detector_precision: f64,
    pub detector_recall: f64,
    /// Occurrences of any planted value inside any masked document.
    pub masked_leaks: usize,
}

/// Compares detector output with the generator's spans and scans every
/// masked view for planted values.
pub fn corpus_summary(clients: &[ClientDataset], detector: &Detector) -> CorpusSummary {
    let (mut planted, mut detected, mut tp, mut leaks, mut docs) = (0, 0, 0, 0, 0);
    for c in clients {
        let values: BTreeSet<&str> = [&c.raw_view, &c.query_raw, &c.eval_raw]
            .into_iter()
            .flatten()
            .flat_map(|d| d.pii_spans.iter().map(|s| s.value.as_str()))
            .collect();
        for (raw, masked) in [
            (&c.raw_view, &c.masked_view),
            (&c.query_raw, &c.query_masked),
            (&c.eval_raw, &c.eval_masked),
        ] {
            for d in raw {
                docs += 1;
                let truth: BTreeSet<_> = d
                    .pii_spans
                    .iter()
                    .map(|s| (s.start, s.class, s.value.clone()))
                    .collect();
                let found: BTreeSet<_> = detector
                    .detect(&d.text)
                    .into_iter()
                    .map(|s| (s.start, s.class, s.value))
                    .collect();
                planted += truth.len();
                detected += found.len();
                tp += truth.intersection(&found).count();
            }
            for d in masked {
                leaks += values
                    .iter()
                    .map(|v| d.text.matches(v).count())
                    .sum::<usize>();
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    CorpusSummary {
        clients: clients.len(),
        documents: docs,
        planted_spans: planted,
        detected_spans: detected,
        true_positives: tp,
        detector_precision: ratio(tp, detected),
        detector_recall: ratio(tp, planted),
        masked_leaks: leaks,
    }
}

pub fn corpus_summary_path(layout: &Layout) -> std::path::PathBuf {
    layout.path("corpus/summary.json")
}

fn stage_corpus(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let d = &cfg.dictionary;
    let dict = generate_dictionary(d.per_class, seed::derive(cfg.seed, "dictionary"))?;
    let (public, private) = dict.split_public(d.public_per_class)?;
    let clients = generate_corpus(&cfg.corpus, &private, seed::derive(cfg.seed, "corpus"))?;
    let public_text = public_corpus(
        &public,
        d.public_statements,
        seed::derive(cfg.seed, "public"),
    )?;
    ensure_parent(&layout.dictionary())?;
    dict.save(&layout.dictionary())?;
    write_corpus_jsonl(&layout.clients(), &clients)?;
    let mut lines = String::new();
    for t in &public_text {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
    }
    write_bytes(&layout.public_corpus(), lines.as_bytes())?;
    write_json(
        &corpus_summary_path(layout),
        &corpus_summary(&clients, &Detector::new(&dict)),
    )
}

/// The dictionary split into its public and private parts.
pub fn load_dictionary(
    cfg: &ExperimentConfig,
    layout: &Layout,
) -> Result<(PiiDictionary, PiiDictionary, PiiDictionary)> {
    need(&layout.dictionary(), Stage::Corpus)?;
    let dict = PiiDictionary::load(&layout.dictionary())?;
    let (public, private) = dict.split_public(cfg.dictionary.public_per_class)?;
    Ok((dict, public, private))
}

pub fn load_clients(layout: &Layout) -> Result<Vec<ClientDataset>> {
    need(&layout.clients(), Stage::Corpus)?;
    Ok(read_corpus_jsonl(&layout.clients())?)
}

// ---- pretrain ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PretrainLog {
    documents: usize,
    tokens: usize,
    steps: usize,
    /// Base perplexity on the first public documents.
    sample_ppl: f64,
}

fn stage_pretrain(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    need(&layout.public_corpus(), Stage::Corpus)?;
    let text = fs::read_to_string(layout.public_corpus())?;
    let lines: Vec<String> = text
        .lines()
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()
        .context("parsing the public corpus")?;
    let tok = securegate_core::tinylm::CharTokenizer::new(cfg.model.vocab_size)?;
    let docs: Vec<Vec<u32>> = lines
        .iter()
        .map(|t| tok.encode_document(t))
        .collect::<securegate_core::Result<_>>()?;
    let model = pretrain_base(
        cfg.model.clone(),
        &docs,
        &cfg.pretrain,
        seed::derive(cfg.seed, "pretrain"),
    )?;
    ensure_parent(&layout.base())?;
    save_checkpoint(&model, &layout.base())?;
    let sample: Vec<Vec<u32>> = docs.iter().take(64).cloned().collect();
    write_json(
        &layout.pretrain_log(),
        &PretrainLog {
            documents: docs.len(),
            tokens: docs.iter().map(Vec::len).sum(),
            steps: cfg.pretrain.steps,
            sample_ppl: model.corpus_perplexity(AdapterRef::Base, &sample)?,
        },
    )
}

pub fn load_base(layout: &Layout) -> Result<TinyLM> {
    need(&layout.base(), Stage::Pretrain)?;
    Ok(load_checkpoint(&layout.base())?)
}

// ---- init ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevealingLog {
    pub client_id: usize,
    pub adapter_ids: Vec<String>,
    pub reports: Vec<TrainReport>,
}

fn save_low_rank(a: &LowRankAdapter, path: &std::path::Path) -> Result<()> {
    ensure_parent(path)?;
    Ok(lora::save(&AdapterFile::LowRank(a.clone()), path)?)
}

fn save_dense(d: &DenseDelta, path: &std::path::Path) -> Result<()> {
    ensure_parent(path)?;
    Ok(lora::save(&AdapterFile::Dense(d.clone()), path)?)
}

pub fn load_low_rank(path: &std::path::Path, stage: Stage) -> Result<LowRankAdapter> {
    need(path, stage)?;
    match lora::load(path)? {
        AdapterFile::LowRank(a) => Ok(a),
        AdapterFile::Dense(_) => bail!("{} holds a dense delta", path.display()),
    }
}

pub fn load_dense(path: &std::path::Path, stage: Stage) -> Result<DenseDelta> {
    need(path, stage)?;
    match lora::load(path)? {
        AdapterFile::Dense(d) => Ok(d),
        AdapterFile::LowRank(_) => bail!("{} holds a low-rank adapter", path.display()),
    }
}

fn stage_init(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let model = load_base(layout)?;
    let datasets = load_clients(layout)?;
    let clients = init_clients(
        &model,
        datasets,
        &cfg.lora,
        &cfg.revealing.optimizer,
        cfg.revealing.count,
        seed::derive(cfg.seed, "init"),
    )?;
    let global = cfg
        .lora
        .init(&model, Role::Global, seed::derive(cfg.seed, "global-init"))?
        .with_id("global");
    save_low_rank(&global, &layout.global_init())?;
    let mut logs = Vec::with_capacity(clients.len());
    for c in &clients {
        save_low_rank(&c.secure, &layout.secure_init(c.client_id))?;
        for (j, r) in c.revealing.iter().enumerate() {
            save_low_rank(r, &layout.revealing(c.client_id, j))?;
        }
        logs.push(RevealingLog {
            client_id: c.client_id,
            adapter_ids: c.revealing.iter().map(|a| a.id().to_string()).collect(),
            reports: c.revealing_reports.clone(),
        });
    }
    write_json(&layout.init_log(), &logs)
}

fn load_revealing(layout: &Layout, client: usize, count: usize) -> Result<Vec<LowRankAdapter>> {
    (0..count)
        .map(|j| load_low_rank(&layout.revealing(client, j), Stage::Init))
        .collect()
}

// ---- federate ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederateSummary {
    pub rounds: usize,
    pub messages: usize,
    pub total_bytes: usize,
    pub upload_bytes: usize,
    pub secure_steps: Vec<u64>,
    pub audit: UploadAudit,
}

/// Every PII value appearing in any raw-view split of any client.
pub fn raw_pii_values(clients: &[ClientDataset]) -> Vec<String> {
    clients
        .iter()
        .flat_map(|c| [&c.raw_view, &c.query_raw, &c.eval_raw])
        .flatten()
        .flat_map(|d| d.pii_spans.iter().map(|s| s.value.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn stage_federate(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let model = load_base(layout)?;
    let datasets = load_clients(layout)?;
    need(&layout.init_log(), Stage::Init)?;
    let logs: Vec<RevealingLog> = read_json(&layout.init_log())?;
    let mut clients = Vec::with_capacity(datasets.len());
    for (dataset, log) in datasets.into_iter().zip(logs) {
        let id = dataset.client_id;
        if log.client_id != id {
            bail!(
                "init log client {} does not match corpus client {id}",
                log.client_id
            );
        }
        clients.push(ClientState::from_parts(
            &model,
            dataset,
            load_low_rank(&layout.secure_init(id), Stage::Init)?,
            load_revealing(layout, id, cfg.revealing.count)?,
            log.reports,
            0,
        )?);
    }
    let global = load_low_rank(&layout.global_init(), Stage::Init)?;
    let mut server = ServerState::new(global, cfg.federation.clone());
    let mut transport = Transport::default();
    let log_path = layout.rounds_log();
    if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    if layout.wire_dir().exists() {
        fs::remove_dir_all(layout.wire_dir())?;
    }
    let round_seed = seed::derive(cfg.seed, "federate");
    while !server.finished() {
        let log: RoundLog = run_round(
            &mut server,
            &mut clients,
            &model,
            &cfg.optimizer,
            cfg.privacy.defense,
            &cfg.privacy.dp,
            &mut transport,
            round_seed,
        )
        .with_context(|| format!("round {}", server.t))?;
        append_jsonl(&log_path, &log)?;
    }
    for m in &transport.messages {
        write_bytes(&layout.wire(m.round, m.from), &m.bytes)?;
    }
    save_low_rank(&server.global, &layout.global())?;
    for c in &clients {
        save_low_rank(&c.secure, &layout.secure(c.client_id))?;
    }
    let datasets: Vec<ClientDataset> = clients.iter().map(|c| c.dataset.clone()).collect();
    let revealing: Vec<&LowRankAdapter> = clients.iter().flat_map(|c| &c.revealing).collect();
    let audit = audit_uploads(&transport.messages, &raw_pii_values(&datasets), &revealing)?;
    write_json(
        &layout.federate_summary(),
        &FederateSummary {
            rounds: server.t,
            messages: transport.messages.len(),
            total_bytes: transport.total_bytes(),
            upload_bytes: transport.uploads().map(|m| m.bytes.len()).sum(),
            secure_steps: clients.iter().map(|c| c.secure_steps).collect(),
            audit,
        },
    )
}

pub fn read_round_logs(layout: &Layout) -> Result<Vec<RoundLog>> {
    need(&layout.rounds_log(), Stage::Federate)?;
    fs::read_to_string(layout.rounds_log())?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

// ---- fusion ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientFusion {
    pub client_id: usize,
    pub secure: FusionReport,
    pub revealing: FusionReport,
}

fn encode_texts(
    model: &TinyLM,
    docs: &[securegate_core::privacy::Document],
    n: usize,
) -> Result<Vec<Vec<u32>>> {
    docs.iter()
        .take(n)
        .map(|d| Ok(model.tokenizer().encode_document(&d.text)?))
        .collect()
}

fn stage_fusion(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let model = load_base(layout)?;
    let datasets = load_clients(layout)?;
    let global = load_low_rank(&layout.global(), Stage::Federate)?;
    let fseed = seed::derive(cfg.seed, "fusion");
    let reports: Vec<ClientFusion> = datasets
        .par_iter()
        .map(|d| {
            let id = d.client_id;
            let secure = load_low_rank(&layout.secure(id), Stage::Federate)?;
            let revealing = load_revealing(layout, id, cfg.revealing.count)?;
            let n = cfg.fusion.query_set_size;
            let (fs, secure_report) = build_secure_personalized(
                &global,
                &secure,
                &model,
                &encode_texts(&model, &d.query_masked, n)?,
                &cfg.fusion,
                seed::derive_index(seed::derive(fseed, "secure"), id as u64),
            )?;
            let refs: Vec<&LowRankAdapter> = revealing.iter().collect();
            let (fr, revealing_report) = build_revealing_personalized(
                &global,
                &refs,
                &model,
                &encode_texts(&model, &d.query_raw, n)?,
                &cfg.fusion,
                seed::derive_index(seed::derive(fseed, "revealing"), id as u64),
            )?;
            save_dense(&fs, &layout.fused_secure(id))?;
            save_dense(&fr, &layout.fused_revealing(id))?;
            Ok(ClientFusion {
                client_id: id,
                secure: secure_report,
                revealing: revealing_report,
            })
        })
        .collect::<Result<_>>()?;
    write_json(&layout.fusion_log(), &reports)
}

// ---- gating ----

/// The organization's key id.
pub fn key_id(client: usize) -> String {
    format!("org{client}-key")
}

/// Deterministic key secret; a real deployment would draw it from an HSM.
pub fn key_secret(master_seed: u64, key_id: &str) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(b"key-secret");
    h.update(key_id.as_bytes());
    h.finalize().to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingLog {
    pub client_id: usize,
    pub key_id: String,
    pub trace: GatingTrace,
    /// Held-out routing accuracy per category.
    pub heldout: BTreeMap<RoutingCategory, f64>,
    pub heldout_per_category: usize,
}

/// Fraction of fresh routing prompts per category sent to their label.
pub fn heldout_accuracy(
    model: &TinyLM,
    router: &Router,
    n_per_class: usize,
    seed: u64,
) -> Result<BTreeMap<RoutingCategory, f64>> {
    let samples = synth_routing_data(&router.registry, n_per_class, seed)?;
    let table = router.registry.embedding_table(model)?;
    let mut hits: BTreeMap<RoutingCategory, (usize, usize)> = BTreeMap::new();
    for s in &samples {
        let d = router.gate_with(model, &table, &s.prompt)?;
        let e = hits.entry(s.category).or_default();
        e.0 += (d.chosen == s.label) as usize;
        e.1 += 1;
    }
    Ok(hits
        .into_iter()
        .map(|(c, (h, n))| (c, h as f64 / n as f64))
        .collect())
}

/// Held-out prompts per routing category.
pub const HELDOUT_PER_CATEGORY: usize = 500;

fn stage_gating(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let model = load_base(layout)?;
    let datasets = load_clients(layout)?;
    let gseed = seed::derive(cfg.seed, "gating");
    let mut logs = Vec::with_capacity(datasets.len());
    for d in &datasets {
        let id = d.client_id as u64;
        let key = key_id(d.client_id);
        let mut registry = KeyRegistry::new(
            &model,
            seed::derive_index(seed::derive(gseed, "registry"), id),
        );
        registry.register_key(&key, &key_secret(cfg.seed, &key), 1)?;
        let samples = synth_routing_data(
            &registry,
            cfg.gating.n_per_class,
            seed::derive_index(seed::derive(gseed, "routing"), id),
        )?;
        let (router, trace) = train_gating(
            &model,
            &registry,
            &samples,
            &cfg.gating,
            seed::derive_index(seed::derive(gseed, "train"), id),
        )?;
        let heldout = heldout_accuracy(
            &model,
            &router,
            HELDOUT_PER_CATEGORY,
            seed::derive_index(seed::derive(gseed, "heldout"), id),
        )?;
        write_json(&layout.router(d.client_id), &router)?;
        logs.push(GatingLog {
            client_id: d.client_id,
            key_id: key,
            trace,
            heldout,
            heldout_per_category: HELDOUT_PER_CATEGORY,
        });
    }
    write_json(&layout.gating_log(), &logs)
}

pub fn load_router(layout: &Layout, client: usize) -> Result<Router> {
    need(&layout.router(client), Stage::Gating)?;
    read_json(&layout.router(client))
}

// ---- evaluate ----

/// Held-out perplexity of each fused adapter used directly, without routing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandalonePpl {
    pub client_id: usize,
    pub secure: f64,
    pub revealing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionFlops {
    pub client_id: usize,
    pub role: Role,
    pub adapters: usize,
    pub evaluations: usize,
    pub counted: u64,
    pub analytic: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub trace: FlopTrace,
    pub totals: BTreeMap<Phase, u64>,
    pub fusion: Vec<FusionFlops>,
}

pub fn adapter_ids(client: usize) -> Vec<String> {
    vec![
        format!("fused-secure-c{client}"),
        format!("fused-revealing-c{client}"),
    ]
}

/// FLOP records of every instrumented phase, with the analytic prediction
/// for each fusion search.
pub fn flops_summary(
    cfg: &ExperimentConfig,
    layout: &Layout,
    model: &TinyLM,
) -> Result<FlopsSummary> {
    let mut trace = FlopTrace::default();
    need(&layout.init_log(), Stage::Init)?;
    let init: Vec<RevealingLog> = read_json(&layout.init_log())?;
    for log in &init {
        for (id, r) in log.adapter_ids.iter().zip(&log.reports) {
            trace.record(Phase::Initialization, id.clone(), r.flops);
        }
    }
    for round in read_round_logs(layout)? {
        for c in &round.clients {
            trace.record(
                Phase::Optimization,
                format!("round{}-c{}", round.t, c.client_id),
                c.flops,
            );
        }
    }
    need(&layout.fusion_log(), Stage::Fusion)?;
    let fusion: Vec<ClientFusion> = read_json(&layout.fusion_log())?;
    let datasets = load_clients(layout)?;
    let global = load_low_rank(&layout.global(), Stage::Federate)?;
    let mut per_search = Vec::new();
    for (f, d) in fusion.iter().zip(&datasets) {
        let id = f.client_id;
        let secure = load_low_rank(&layout.secure(id), Stage::Federate)?;
        let revealing = load_revealing(layout, id, cfg.revealing.count)?;
        let n = cfg.fusion.query_set_size;
        let mut rev_refs = vec![&global];
        rev_refs.extend(revealing.iter());
        for (report, adapters, query) in [
            (
                &f.secure,
                vec![&global, &secure],
                encode_texts(model, &d.query_masked, n)?,
            ),
            (
                &f.revealing,
                rev_refs,
                encode_texts(model, &d.query_raw, n)?,
            ),
        ] {
            trace.record(
                Phase::Fusion,
                format!("{:?}-c{id}", report.role),
                report.flops,
            );
            per_search.push(FusionFlops {
                client_id: id,
                role: report.role,
                adapters: adapters.len(),
                evaluations: report.evaluations,
                counted: report.flops,
                analytic: analytic_fusion_flops(model, &query, &adapters, report.evaluations),
            });
        }
    }
    let totals = [Phase::Initialization, Phase::Optimization, Phase::Fusion]
        .into_iter()
        .map(|p| (p, flops_account(p, &trace)))
        .collect();
    Ok(FlopsSummary {
        trace,
        totals,
        fusion: per_search,
    })
}

fn stage_evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let model = load_base(layout)?;
    let (dict, _, private) = load_dictionary(cfg, layout)?;
    let detector = Detector::new(&dict);
    let datasets = load_clients(layout)?;
    let baseline = model.prepare(AdapterRef::Base)?;
    let settings = AttackSettings {
        inference: &cfg.attacks.inference,
        extraction: &cfg.attacks.extraction,
        candidates: &private,
        detector: &detector,
    };
    let aseed = seed::derive(cfg.seed, "attacks");
    let mut reports: Vec<AttackReport> = Vec::new();
    let mut standalone = Vec::new();
    for d in &datasets {
        let id = d.client_id;
        let router = load_router(layout, id)?;
        let secure = load_dense(&layout.fused_secure(id), Stage::Fusion)?;
        let revealing = load_dense(&layout.fused_revealing(id), Stage::Fusion)?;
        let prepared = vec![
            model.prepare(AdapterRef::Dense(&secure))?,
            model.prepare(AdapterRef::Dense(&revealing))?,
        ];
        let ids = adapter_ids(id);
        let key = key_id(id);
        let system = ClientSystem {
            dataset: d,
            router: &router,
            adapters: &prepared,
            adapter_ids: &ids,
            key_id: &key,
        };
        reports.extend(
            evaluate_conditions(
                &model,
                &system,
                &baseline,
                &settings,
                seed::derive_index(aseed, id as u64),
            )
            .with_context(|| format!("client {id}"))?,
        );
        let eval: Vec<Vec<u32>> = encode_texts(&model, &d.eval_raw, usize::MAX)?;
        standalone.push(StandalonePpl {
            client_id: id,
            secure: prepared[0].corpus_perplexity(&eval)?,
            revealing: prepared[1].corpus_perplexity(&eval)?,
        });
    }
    write_json(&layout.attack_reports(), &reports)?;
    write_json(&layout.standalone(), &standalone)?;
    write_json(&layout.flops(), &flops_summary(cfg, layout, &model)?)
}

pub fn load_attack_reports(layout: &Layout) -> Result<Vec<AttackReport>> {
    need(&layout.attack_reports(), Stage::Evaluate)?;
    read_json(&layout.attack_reports())
}

// ---- key rotation ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub client_id: usize,
    pub old_key: String,
    pub new_key: String,
    pub trace: GatingTrace,
    pub heldout: BTreeMap<RoutingCategory, f64>,
    /// Share of prompts under the retired key still sent to the revealing path.
    pub old_key_revealing_rate: f64,
}

/// Replaces a client's key, retrains its router on fresh routing data and
/// checks that the retired key now falls back to the secure adapter. The
/// attack reports are stale afterwards; rerun `evaluate`.
pub fn rotate_key(
    cfg: &ExperimentConfig,
    layout: &Layout,
    client: usize,
    new_key: &str,
) -> Result<RotationReport> {
    let model = load_base(layout)?;
    let router = load_router(layout, client)?;
    let old_key = router
        .registry
        .keys()
        .next()
        .map(|k| k.key_id.clone())
        .ok_or_else(|| anyhow!("client {client} has no registered key"))?;
    let mut registry = router.registry.clone();
    registry.rotate_key(&old_key, new_key, &key_secret(cfg.seed, new_key))?;
    let rseed = seed::derive_index(seed::derive(cfg.seed, "rotation"), client as u64);
    let samples = synth_routing_data(
        &registry,
        cfg.gating.n_per_class,
        seed::derive(rseed, "routing"),
    )?;
    let (router, trace) = train_gating(
        &model,
        &registry,
        &samples,
        &cfg.gating,
        seed::derive(rseed, "train"),
    )?;
    let heldout = heldout_accuracy(
        &model,
        &router,
        HELDOUT_PER_CATEGORY,
        seed::derive(rseed, "heldout"),
    )?;
    let table = router.registry.embedding_table(&model)?;
    let mut leaked = 0;
    for body in securegate_core::gating::PROMPT_BODIES {
        let prompt = format!("{}{old_key}] {body}", securegate_core::gating::KEY_PREFIX);
        leaked += (router.gate_with(&model, &table, &prompt)?.chosen != 0) as usize;
    }
    write_json(&layout.router(client), &router)?;
    let report = RotationReport {
        client_id: client,
        old_key,
        new_key: new_key.to_string(),
        trace,
        heldout,
        old_key_revealing_rate: leaked as f64 / securegate_core::gating::PROMPT_BODIES.len() as f64,
    };
    write_json(
        &layout.path(&format!("gating/c{client}/rotation.json")),
        &report,
    )?;
    let manifest = Manifest::build(layout)?;
    manifest.write(layout)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists_parse_in_pipeline_order() {
        assert_eq!(
            parse_stages("pretrain, corpus,pretrain").unwrap(),
            vec![Stage::Corpus, Stage::Pretrain]
        );
        assert!(parse_stages("corpus,train")
            .unwrap_err()
            .contains("unknown stage `train`"));
        assert!(parse_stages(" , ").is_err());
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.as_str()), Some(s));
        }
    }

    #[test]
    fn key_secrets_depend_on_seed_and_id() {
        assert_eq!(key_secret(1, "a"), key_secret(1, "a"));
        assert_ne!(key_secret(1, "a"), key_secret(2, "a"));
        assert_ne!(key_secret(1, "a"), key_secret(1, "b"));
    }
}
