use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::extraction::{extraction_attack, extraction_prompt, ExtractionConfig, ExtractionResult};
use super::inference::{
    attack_contexts, rank_context, ContextOutcome, InferenceAttackConfig, InferenceResult,
};
use crate::error::{Error, Result};
use crate::gating::{corrupt_key, parse_prompt, two_pass_infer, Router, KEY_PREFIX, SECURE_INDEX};
use crate::privacy::{ClientDataset, Detector, PiiDictionary};
use crate::seed;
use crate::tinylm::{perplexity_from_log_probs, Prepared, SampleParams, TinyLM};

/// How a query is keyed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    CorrectToken,
    WrongToken,
    NoToken,
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::CorrectToken,
        Condition::WrongToken,
        Condition::NoToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::CorrectToken => "correct_token",
            Condition::WrongToken => "wrong_token",
            Condition::NoToken => "no_token",
        }
    }
}

/// One organization's trained system as seen by the evaluator.
pub struct ClientSystem<'a, 'm> {
    pub dataset: &'a ClientDataset,
    pub router: &'a Router,
    /// Indexed like the router outputs; index 0 is the secure adapter.
    pub adapters: &'a [Prepared<'m>],
    pub adapter_ids: &'a [String],
    /// The organization's valid key.
    pub key_id: &'a str,
}

/// Attack settings shared by every client.
pub struct AttackSettings<'a> {
    pub inference: &'a InferenceAttackConfig,
    pub extraction: &'a ExtractionConfig,
    /// Candidate values for the inference attack.
    pub candidates: &'a PiiDictionary,
    pub detector: &'a Detector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub client_id: usize,
    pub condition: Condition,
    /// Key text placed in front of every query, if any.
    pub key: Option<String>,
    /// Ids of the adapters that answered, in index order.
    pub adapter_path: String,
    pub intended_adapter: usize,
    pub routed_queries: usize,
    pub routing_accuracy: f64,
    pub fallbacks: usize,
    pub inference_accuracy: f64,
    pub extraction_precision: f64,
    pub extraction_recall: f64,
    /// Perplexity of the held-out raw evaluation documents.
    pub ppl: f64,
    pub inference: InferenceResult,
    pub extraction: ExtractionResult,
}

struct Routing<'r, 'm> {
    model: &'m TinyLM,
    router: &'r Router,
    intended: usize,
    routed: usize,
    hits: usize,
    fallbacks: usize,
    used: BTreeSet<usize>,
}

impl Routing<'_, '_> {
    fn route(
        &mut self,
        table: &std::sync::Arc<crate::tensor::Tensor>,
        prompt: &str,
    ) -> Result<usize> {
        let d = self.router.gate_with(self.model, table, prompt)?;
        self.routed += 1;
        self.hits += (d.chosen == self.intended) as usize;
        self.fallbacks += d.fallback_triggered as usize;
        self.used.insert(d.chosen);
        Ok(d.chosen)
    }
}

/// Full text of one sample under `adapter`, keyed by (adapter, sample).
type SampleMemo = HashMap<(usize, usize), String>;

/// Runs both attacks and held-out perplexity under the correct key, a
/// corrupted key and no key. Every query is routed by the system's router
/// and answered by the adapter it picks, with the key stripped. Results that
/// depend only on (adapter, query) are computed once and shared across
/// conditions.
pub fn evaluate_conditions(
    model: &TinyLM,
    system: &ClientSystem<'_, '_>,
    baseline: &Prepared<'_>,
    settings: &AttackSettings<'_>,
    seed: u64,
) -> Result<Vec<AttackReport>> {
    let n_out = system.router.adapter_count();
    if system.adapters.len() != n_out || system.adapter_ids.len() != n_out {
        return Err(Error::invalid(format!(
            "router has {n_out} outputs but {} adapters and {} ids were supplied",
            system.adapters.len(),
            system.adapter_ids.len()
        )));
    }
    let mut errors = Vec::new();
    settings
        .extraction
        .validate("attacks.extraction", &mut errors);
    if !errors.is_empty() {
        return Err(Error::invalid(errors.join("; ")));
    }
    let registry = &system.router.registry;
    let key = registry
        .get(system.key_id)
        .ok_or_else(|| Error::invalid(format!("key `{}` is not registered", system.key_id)))?;
    let tok = model.tokenizer();
    let table = registry.embedding_table(model)?;
    let contexts = attack_contexts(
        system.dataset,
        settings.candidates,
        settings.inference,
        seed::derive(seed, "inference"),
    )?;
    let params = SampleParams {
        temperature: settings.extraction.temperature,
        max_new: settings.extraction.max_new,
    };
    let sample_seed = |i: usize| seed::derive_index(seed::derive(seed, "extraction"), i as u64);
    let n_samples = settings.extraction.n_samples;
    let baseline_texts: Vec<String> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let prompt = extraction_prompt(i);
            let out = baseline.sample(&tok.encode_prompt(&prompt)?, params, sample_seed(i))?;
            Ok(format!("{prompt}{}", tok.decode(&out)))
        })
        .collect::<Result<_>>()?;
    let eval_texts = system
        .dataset
        .eval_raw
        .iter()
        .map(|d| d.text.as_str())
        .collect::<Vec<_>>();
    let eval_docs: Vec<Vec<u32>> = eval_texts
        .iter()
        .map(|t| tok.encode_document(t))
        .collect::<Result<_>>()?;
    let truth = system.dataset.planted();

    let mut ranked: HashMap<(usize, usize), ContextOutcome> = HashMap::new();
    let mut sampled: SampleMemo = HashMap::new();
    let mut scored: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut reports = Vec::with_capacity(Condition::ALL.len());
    for condition in Condition::ALL {
        let (key_text, intended) = match condition {
            Condition::CorrectToken => (Some(system.key_id.to_string()), key.adapter_index),
            Condition::WrongToken => (
                Some(corrupt_key(
                    system.key_id,
                    registry,
                    seed::derive_index(seed, system.dataset.client_id as u64),
                )),
                SECURE_INDEX,
            ),
            Condition::NoToken => (None, SECURE_INDEX),
        };
        let prefix = key_text
            .as_ref()
            .map_or(String::new(), |k| format!("{KEY_PREFIX}{k}] "));
        let mut routing = Routing {
            model,
            router: system.router,
            intended,
            routed: 0,
            hits: 0,
            fallbacks: 0,
            used: BTreeSet::new(),
        };

        let chosen: Vec<usize> = contexts
            .iter()
            .map(|c| routing.route(&table, &format!("{prefix}{}", c.prefix)))
            .collect::<Result<_>>()?;
        let missing: Vec<(usize, usize)> = chosen
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, i))
            .filter(|k| !ranked.contains_key(k))
            .collect();
        let fresh: Vec<((usize, usize), ContextOutcome)> = missing
            .par_iter()
            .map(|&(a, i)| Ok(((a, i), rank_context(&system.adapters[a], &contexts[i])?)))
            .collect::<Result<_>>()?;
        ranked.extend(fresh);
        let outcomes: Vec<ContextOutcome> = chosen
            .iter()
            .enumerate()
            .map(|(i, &a)| ranked[&(a, i)].clone())
            .collect();
        let inference = InferenceResult::from_outcomes(&outcomes);

        let prompts: Vec<String> = (0..n_samples)
            .map(|i| format!("{prefix}{}", extraction_prompt(i)))
            .collect();
        let chosen: Vec<usize> = prompts
            .iter()
            .map(|p| routing.route(&table, p))
            .collect::<Result<_>>()?;
        let missing: Vec<(usize, usize)> = chosen
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, i))
            .filter(|k| !sampled.contains_key(k))
            .collect();
        let fresh: Vec<((usize, usize), String)> = missing
            .par_iter()
            .map(|&(a, i)| {
                let (text, d) = two_pass_infer(
                    system.router,
                    model,
                    system.adapters,
                    &prompts[i],
                    params,
                    sample_seed(i),
                )?;
                if d.chosen != a {
                    return Err(Error::invalid("routing decision changed between passes"));
                }
                Ok(((a, i), format!("{}{text}", parse_prompt(&prompts[i]).1)))
            })
            .collect::<Result<_>>()?;
        sampled.extend(fresh);
        let samples: Vec<String> = chosen
            .iter()
            .enumerate()
            .map(|(i, &a)| sampled[&(a, i)].clone())
            .collect();
        let extraction = extraction_attack(&samples, &baseline_texts, settings.detector, &truth)?;

        let chosen: Vec<usize> = eval_texts
            .iter()
            .map(|t| routing.route(&table, &format!("{prefix}{t}")))
            .collect::<Result<_>>()?;
        let mut by_adapter: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &a) in chosen.iter().enumerate() {
            if !scored.contains_key(&(a, i)) {
                by_adapter.entry(a).or_default().push(i);
            }
        }
        for (a, idx) in by_adapter {
            let docs: Vec<Vec<u32>> = idx.iter().map(|&i| eval_docs[i].clone()).collect();
            for (i, lp) in idx
                .into_iter()
                .zip(system.adapters[a].docs_log_probs(&docs)?)
            {
                scored.insert((a, i), lp);
            }
        }
        let all: Vec<f64> = chosen
            .iter()
            .enumerate()
            .flat_map(|(i, &a)| scored[&(a, i)].iter().copied())
            .collect();
        let ppl = perplexity_from_log_probs(&all)?;

        reports.push(AttackReport {
            client_id: system.dataset.client_id,
            condition,
            key: key_text,
            adapter_path: routing
                .used
                .iter()
                .map(|&i| system.adapter_ids[i].as_str())
                .collect::<Vec<_>>()
                .join("+"),
            intended_adapter: intended,
            routed_queries: routing.routed,
            routing_accuracy: routing.hits as f64 / routing.routed as f64,
            fallbacks: routing.fallbacks,
            inference_accuracy: inference.accuracy,
            extraction_precision: extraction.precision,
            extraction_recall: extraction.recall,
            ppl,
            inference,
            extraction,
        });
    }
    Ok(reports)
}
