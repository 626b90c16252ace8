use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::{render_statement, ClientDataset, PiiClass, PiiDictionary, TEMPLATES};
use crate::seed;
use crate::tinylm::tokenizer::EOT;
use crate::tinylm::Prepared;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceAttackConfig {
    pub candidate_pool_c: usize,
    pub n_contexts: usize,
    /// Restricts contexts to one class when set.
    pub pii_class: Option<PiiClass>,
}

impl Default for InferenceAttackConfig {
    fn default() -> Self {
        InferenceAttackConfig {
            candidate_pool_c: 50,
            n_contexts: 100,
            pii_class: None,
        }
    }
}

impl InferenceAttackConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if self.candidate_pool_c == 0 {
            errors.push(format!("{prefix}.candidate_pool_c must be positive"));
        }
        if self.n_contexts == 0 {
            errors.push(format!("{prefix}.n_contexts must be positive"));
        }
    }

    /// Adds an error when some attacked class has fewer than `c` candidates.
    pub fn validate_pool(
        &self,
        prefix: &str,
        candidates: &PiiDictionary,
        errors: &mut Vec<String>,
    ) {
        for class in self.classes() {
            let have = candidates.values(class).len();
            if have < self.candidate_pool_c {
                errors.push(format!(
                    "{prefix}.candidate_pool_c = {} exceeds the {have} {} candidates",
                    self.candidate_pool_c,
                    class.as_str()
                ));
            }
        }
    }

    fn classes(&self) -> Vec<PiiClass> {
        match self.pii_class {
            Some(c) => vec![c],
            None => PiiClass::ALL.to_vec(),
        }
    }
}

/// A template statement with one PII slot opened: `prefix ⟨slot⟩ suffix`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackContext {
    pub class: PiiClass,
    pub prefix: String,
    pub suffix: String,
    pub truth: String,
    /// The truth and `c − 1` same-class decoys, shuffled.
    pub candidates: Vec<String>,
}

impl AttackContext {
    pub fn statement(&self, value: &str) -> String {
        format!("{}{value}{}", self.prefix, self.suffix)
    }
}

/// `cfg.n_contexts` contexts built from the templates and the values planted
/// in the client's training view. Candidates are drawn from `candidates`
/// without replacement.
pub fn attack_contexts(
    dataset: &ClientDataset,
    candidates: &PiiDictionary,
    cfg: &InferenceAttackConfig,
    seed: u64,
) -> Result<Vec<AttackContext>> {
    let mut errors = Vec::new();
    cfg.validate("attacks", &mut errors);
    cfg.validate_pool("attacks", candidates, &mut errors);
    if !errors.is_empty() {
        return Err(Error::invalid(errors.join("; ")));
    }
    let planted = dataset.planted();
    for class in PiiClass::ALL {
        if planted.get(&class).is_none_or(Vec::is_empty) {
            return Err(Error::invalid(format!(
                "client {} has no planted {} values",
                dataset.client_id,
                class.as_str()
            )));
        }
    }
    let templates: Vec<_> = TEMPLATES
        .iter()
        .filter(|t| cfg.pii_class.is_none_or(|c| t.slots().contains(&c)))
        .collect();
    let mut rng = seed::rng(seed::derive(seed, "inference-contexts"));
    let mut out = Vec::with_capacity(cfg.n_contexts);
    for _ in 0..cfg.n_contexts {
        let template = templates
            .choose(&mut rng)
            .expect("every class appears in some template");
        let slots = template.slots();
        let target = match cfg.pii_class {
            Some(c) => slots.iter().position(|&s| s == c).expect("filtered"),
            None => rand::Rng::gen_range(&mut rng, 0..slots.len()),
        };
        let values: Vec<&str> = slots
            .iter()
            .map(|c| planted[c].choose(&mut rng).expect("non-empty").as_str())
            .collect();
        let doc = render_statement(template, &values)?;
        let span = &doc.pii_spans[target];
        let class = span.class;
        let truth = span.value.clone();
        let pool = candidates.values(class);
        if !pool.contains(&truth) {
            return Err(Error::invalid(format!(
                "planted value `{truth}` is not among the {} candidates",
                class.as_str()
            )));
        }
        let others: Vec<&String> = pool.iter().filter(|v| **v != truth).collect();
        let mut chosen: Vec<String> = others
            .choose_multiple(&mut rng, cfg.candidate_pool_c - 1)
            .map(|v| (*v).clone())
            .collect();
        chosen.push(truth.clone());
        chosen.shuffle(&mut rng);
        out.push(AttackContext {
            class,
            prefix: doc.text[..span.start].to_string(),
            suffix: doc.text[span.end..].to_string(),
            truth,
            candidates: chosen,
        });
    }
    Ok(out)
}

/// Perplexity of each completed statement, scored as a document from its
/// start marker through its end marker.
pub fn candidate_perplexities(scorer: &Prepared<'_>, ctx: &AttackContext) -> Result<Vec<f64>> {
    let tok = scorer.model().tokenizer();
    let prefix = tok.encode_prompt(&ctx.prefix)?;
    let conts: Vec<Vec<u32>> = ctx
        .candidates
        .iter()
        .map(|c| {
            let mut v = tok.encode(&format!("{c}{}", ctx.suffix))?;
            v.push(EOT);
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[u32]> = conts.iter().map(Vec::as_slice).collect();
    let (pre, outs) = scorer.continuation_log_probs(&prefix, &refs)?;
    let pre_sum: f64 = pre.iter().sum();
    Ok(outs
        .iter()
        .map(|o| (-(pre_sum + o.iter().sum::<f64>()) / (pre.len() + o.len()) as f64).exp())
        .collect())
}

/// The attack's guess for one context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextOutcome {
    pub class: PiiClass,
    pub predicted: String,
    pub correct: bool,
}

/// Picks the minimum-perplexity candidate; the earliest wins ties.
pub fn rank_context(scorer: &Prepared<'_>, ctx: &AttackContext) -> Result<ContextOutcome> {
    let ppl = candidate_perplexities(scorer, ctx)?;
    let mut best = 0;
    for (i, &p) in ppl.iter().enumerate() {
        if p < ppl[best] {
            best = i;
        }
    }
    let predicted = ctx.candidates[best].clone();
    Ok(ContextOutcome {
        class: ctx.class,
        correct: predicted == ctx.truth,
        predicted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub contexts: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub n_contexts: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_class: BTreeMap<PiiClass, ClassAccuracy>,
}

impl InferenceResult {
    pub fn from_outcomes(outcomes: &[ContextOutcome]) -> Self {
        let mut per_class: BTreeMap<PiiClass, ClassAccuracy> = BTreeMap::new();
        for o in outcomes {
            let e = per_class.entry(o.class).or_insert(ClassAccuracy {
                contexts: 0,
                correct: 0,
                accuracy: 0.0,
            });
            e.contexts += 1;
            e.correct += o.correct as usize;
        }
        per_class
            .values_mut()
            .for_each(|e| e.accuracy = e.correct as f64 / e.contexts as f64);
        let correct = outcomes.iter().filter(|o| o.correct).count();
        InferenceResult {
            n_contexts: outcomes.len(),
            correct,
            accuracy: if outcomes.is_empty() {
                0.0
            } else {
                correct as f64 / outcomes.len() as f64
            },
            per_class,
        }
    }
}

/// Ranks every context under one fixed adapter path.
pub fn inference_attack(
    scorer: &Prepared<'_>,
    dataset: &ClientDataset,
    candidates: &PiiDictionary,
    cfg: &InferenceAttackConfig,
    seed: u64,
) -> Result<InferenceResult> {
    let contexts = attack_contexts(dataset, candidates, cfg, seed)?;
    let outcomes: Vec<ContextOutcome> = contexts
        .par_iter()
        .map(|c| rank_context(scorer, c))
        .collect::<Result<_>>()?;
    Ok(InferenceResult::from_outcomes(&outcomes))
}
