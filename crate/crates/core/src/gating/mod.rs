//! Access-keyed routing: an org-local key registry, a small MLP over the
//! frozen base's final hidden state at the key position, threshold fallback
//! to the secure adapter, and two-pass inference.
//!
//! Adapter index 0 is always the secure adapter.

mod data;
mod mlp;
mod registry;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::tensor::Tensor;
use crate::tinylm::{Prepared, SampleParams, TinyLM};

pub use data::{corrupt_key, synth_routing_data, RoutingCategory, RoutingSample, PROMPT_BODIES};
pub use mlp::{train_mlp, GatingMLP, GatingTrace};
pub use registry::{key_embedding, parse_prompt, AccessKey, KeyRegistry, KEY_PREFIX, KEY_SCALE};

/// Index of the secure adapter in every router.
pub const SECURE_INDEX: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatingConfig {
    /// Fallback threshold: a non-secure choice needs `p_max ≥ tau`.
    pub tau: f64,
    pub hidden: usize,
    pub dropout: f64,
    /// Training samples per routing category.
    pub n_per_class: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig {
            tau: 0.5,
            hidden: 128,
            dropout: 0.1,
            n_per_class: 200,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                epochs: 4,
                batch_size: 32,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl GatingConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if !(0.0..=1.0).contains(&self.tau) {
            errors.push(format!("{prefix}.tau must be in [0,1], got {}", self.tau));
        }
        if self.hidden == 0 {
            errors.push(format!("{prefix}.hidden must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!(
                "{prefix}.dropout must be in [0,1), got {}",
                self.dropout
            ));
        }
        if self.n_per_class == 0 {
            errors.push(format!("{prefix}.n_per_class must be positive"));
        }
        self.optimizer
            .validate(&format!("{prefix}.optimizer"), errors);
    }
}

/// One routing outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingDecision {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub chosen: usize,
    pub fallback_triggered: bool,
    pub tau: f64,
}

/// Softmax, argmax with ties to the secure index, then the `tau` fallback.
pub fn decide(logits: &[f64], tau: f64) -> GatingDecision {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let mut best = SECURE_INDEX;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let fallback_triggered = best != SECURE_INDEX && probs[best] < tau;
    GatingDecision {
        logits: logits.to_vec(),
        chosen: if fallback_triggered {
            SECURE_INDEX
        } else {
            best
        },
        probs,
        fallback_triggered,
        tau,
    }
}

/// Registry plus trained MLP. Immutable once built; gating is a pure
/// function of the MLP, the base weights and the prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub registry: KeyRegistry,
    pub mlp: GatingMLP,
    pub tau: f64,
}

/// Final-layer hidden state at position 0 of the locally tokenized prompt.
/// Causal attention makes it a function of the first token alone.
pub fn key_feature(
    model: &TinyLM,
    registry: &KeyRegistry,
    table: &Arc<Tensor>,
    prompt: &str,
) -> Result<Vec<f64>> {
    let tokens = registry.encode(model.tokenizer(), prompt)?;
    model.hidden_state_with(&tokens[..1], 0, Some(Arc::clone(table)))
}

impl Router {
    pub fn gate(&self, model: &TinyLM, prompt: &str) -> Result<GatingDecision> {
        let table = self.registry.embedding_table(model)?;
        self.gate_with(model, &table, prompt)
    }

    /// As [`Router::gate`] with a prebuilt local embedding table.
    pub fn gate_with(
        &self,
        model: &TinyLM,
        table: &Arc<Tensor>,
        prompt: &str,
    ) -> Result<GatingDecision> {
        let h = key_feature(model, &self.registry, table, prompt)?;
        Ok(decide(&self.mlp.logits(&h)?, self.tau))
    }

    pub fn adapter_count(&self) -> usize {
        self.mlp.outputs
    }
}

/// Trains a fresh router on `samples`. The base model and every adapter are
/// untouched: only the MLP learns.
pub fn train_gating(
    model: &TinyLM,
    registry: &KeyRegistry,
    samples: &[RoutingSample],
    cfg: &GatingConfig,
    seed: u64,
) -> Result<(Router, GatingTrace)> {
    if registry.is_empty() {
        return Err(Error::invalid(
            "cannot train a router without registered keys",
        ));
    }
    let outputs = registry.max_adapter_index() + 1;
    let table = registry.embedding_table(model)?;
    // Features depend only on the first token, so compute each once.
    let mut cache: HashMap<u32, Vec<f64>> = HashMap::new();
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let first = registry.encode(model.tokenizer(), &s.prompt)?[0];
        let row = match cache.get(&first) {
            Some(r) => r.clone(),
            None => {
                let r = key_feature(model, registry, &table, &s.prompt)?;
                cache.insert(first, r.clone());
                r
            }
        };
        rows.push(row);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut mlp = GatingMLP::new(
        model.config().embed_dim,
        cfg.hidden,
        outputs,
        cfg.dropout,
        seed,
    )?;
    let trace = train_mlp(&mut mlp, &rows, &labels, &cfg.optimizer, seed)?;
    Ok((
        Router {
            registry: registry.clone(),
            mlp,
            tau: cfg.tau,
        },
        trace,
    ))
}

/// Pass 1 routes on the keyed prompt; pass 2 samples from the key-stripped
/// prompt under the chosen adapter. The key never reaches pass 2.
pub fn two_pass_infer(
    router: &Router,
    model: &TinyLM,
    adapters: &[Prepared<'_>],
    prompt: &str,
    params: SampleParams,
    seed: u64,
) -> Result<(String, GatingDecision)> {
    if adapters.len() != router.adapter_count() {
        return Err(Error::invalid(format!(
            "router has {} outputs but {} adapters were supplied",
            router.adapter_count(),
            adapters.len()
        )));
    }
    let decision = router.gate(model, prompt)?;
    let (_, clean) = parse_prompt(prompt);
    let tokens = model.tokenizer().encode_prompt(&clean)?;
    let out = adapters[decision.chosen].sample(&tokens, params, seed)?;
    Ok((model.tokenizer().decode(&out), decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_adapter, Role};
    use crate::seed;
    use crate::tinylm::{AdapterRef, ModelConfig};

    #[test]
    fn decision_rule_examples() {
        let d = decide(&[0.3, 0.3], 0.5);
        assert_eq!(d.probs, vec![0.5, 0.5]);
        assert_eq!(d.chosen, SECURE_INDEX);
        // p = (0.45, 0.55) with tau 0.6 falls back.
        let z1 = (0.55f64 / 0.45).ln();
        let d = decide(&[0.0, z1], 0.6);
        assert!((d.probs[1] - 0.55).abs() < 1e-12);
        assert!(d.fallback_triggered);
        assert_eq!(d.chosen, SECURE_INDEX);
        let d = decide(&[0.0, z1], 0.5);
        assert_eq!((d.chosen, d.fallback_triggered), (1, false));
        let d = decide(&[5.0, 1.0, -2.0], 0.9);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn setup() -> (TinyLM, KeyRegistry) {
        let cfg = ModelConfig {
            embed_dim: 16,
            n_layers: 1,
            ffn_dim: 16,
            context_len: 64,
            ..ModelConfig::default()
        };
        let m = TinyLM::init(cfg, 2).unwrap();
        let mut r = KeyRegistry::new(&m, 1);
        r.register_key("ALPHA", b"org-secret", 1).unwrap();
        (m, r)
    }

    #[test]
    fn router_learns_and_fails_closed() {
        let (m, r) = setup();
        let train = synth_routing_data(&r, 50, 1).unwrap();
        let cfg = GatingConfig {
            hidden: 32,
            ..GatingConfig::default()
        };
        let (router, trace) = train_gating(&m, &r, &train, &cfg, 3).unwrap();
        assert!(*trace.step_losses.last().unwrap() < trace.initial_loss);
        for s in synth_routing_data(&r, 100, 99).unwrap() {
            let d = router.gate(&m, &s.prompt).unwrap();
            assert_eq!(d.chosen, s.label, "{}", s.prompt);
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let (again, _) = train_gating(&m, &r, &train, &cfg, 3).unwrap();
        assert_eq!(again, router);
    }

    #[test]
    fn two_pass_strips_the_key() {
        let (m, r) = setup();
        let train = synth_routing_data(&r, 50, 1).unwrap();
        let cfg = GatingConfig {
            hidden: 32,
            ..GatingConfig::default()
        };
        let (router, _) = train_gating(&m, &r, &train, &cfg, 3).unwrap();
        let mut rng = seed::rng(5);
        let rev = init_adapter(&m, 4, Role::Revealing, 7).unwrap();
        let t: Vec<Tensor> = rev
            .tensors()
            .iter()
            .map(|t| Tensor::randn(t.shape(), 0.2, &mut rng))
            .collect();
        let rev = rev.with_tensors(t).unwrap();
        let adapters = [
            m.prepare(AdapterRef::Base).unwrap(),
            m.prepare(AdapterRef::LowRank(&rev)).unwrap(),
        ];
        let params = SampleParams {
            temperature: 1.0,
            max_new: 20,
        };
        let (text, d) = two_pass_infer(&router, &m, &adapters, "hello there", params, 11).unwrap();
        assert_eq!(d.chosen, SECURE_INDEX);
        let direct = m
            .sample(
                AdapterRef::Base,
                &m.tokenizer().encode_prompt("hello there").unwrap(),
                params,
                11,
            )
            .unwrap();
        assert_eq!(text, m.tokenizer().decode(&direct));
        let (_, d) = two_pass_infer(
            &router,
            &m,
            &adapters,
            "[SPECIAL_TOKEN=ALPHA] hello there",
            params,
            11,
        )
        .unwrap();
        assert_eq!(d.chosen, 1);
        for i in 0..200 {
            let (text, _) = two_pass_infer(
                &router,
                &m,
                &adapters,
                "[SPECIAL_TOKEN=ALPHA] [SPECIAL",
                params,
                i,
            )
            .unwrap();
            assert!(!text.contains("[SPECIAL_TOKEN"));
        }
        assert!(two_pass_infer(&router, &m, &adapters[..1], "x", params, 1).is_err());
    }
}
