//! Leakage evaluation: a perplexity-ranking inference attack, a
//! sampling-plus-detection extraction attack with frozen-base subtraction,
//! per-condition reports of keyed, mis-keyed and unkeyed access, and FLOP
//! accounting.

mod conditions;
mod extraction;
mod flops;
mod inference;

use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

pub use conditions::{evaluate_conditions, AttackReport, AttackSettings, ClientSystem, Condition};
pub use extraction::{
    extraction_attack, extraction_prompt, extraction_prompts, ClassExtraction, ExtractionConfig,
    ExtractionResult,
};
pub use flops::{analytic_fusion_flops, flops_account, matmul_flops, FlopRecord, FlopTrace, Phase};
pub use inference::{
    attack_contexts, candidate_perplexities, inference_attack, rank_context, AttackContext,
    ClassAccuracy, ContextOutcome, InferenceAttackConfig, InferenceResult,
};

/// Central `level` band of the success fraction of Binomial(n, p): the
/// smallest `lo` and `hi` with `P(X < lo) ≤ (1−level)/2` and
/// `P(X > hi) ≤ (1−level)/2`, divided by `n`.
pub fn binomial_band(n: usize, p: f64, level: f64) -> Result<(f64, f64)> {
    if n == 0 || !(0.0..=1.0).contains(&p) || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "no binomial band for n={n}, p={p}, level={level}"
        )));
    }
    let b = Binomial::new(p, n as u64).map_err(|e| Error::invalid(e.to_string()))?;
    let tail = (1.0 - level) / 2.0;
    let quantile = |q: f64| (0..=n as u64).find(|&k| b.cdf(k) >= q).unwrap_or(n as u64);
    Ok((
        quantile(tail) as f64 / n as f64,
        quantile(1.0 - tail) as f64 / n as f64,
    ))
}
