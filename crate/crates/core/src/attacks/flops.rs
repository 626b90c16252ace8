use serde::{Deserialize, Serialize};

use crate::lora::LowRankAdapter;
use crate::tinylm::TinyLM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Revealing-adapter training before the first round.
    Initialization,
    /// Secure-adapter training inside the federated rounds.
    Optimization,
    /// Coefficient search for both personalized adapters.
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopRecord {
    pub phase: Phase,
    pub label: String,
    pub flops: u64,
}

/// Counted FLOPs of instrumented runs, one record per unit of work.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTrace {
    pub records: Vec<FlopRecord>,
}

impl FlopTrace {
    pub fn record(&mut self, phase: Phase, label: impl Into<String>, flops: u64) {
        self.records.push(FlopRecord {
            phase,
            label: label.into(),
            flops,
        });
    }
}

/// Total FLOPs of `phase` in `trace`.
pub fn flops_account(phase: Phase, trace: &FlopTrace) -> u64 {
    trace
        .records
        .iter()
        .filter(|r| r.phase == phase)
        .map(|r| r.flops)
        .sum()
}

/// `(m×k)·(k×n)`: `m·k·n` multiply-accumulates at 2 FLOPs each.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Forward lengths used to score a `len`-token document: consecutive
/// windows of at most `context_len` inputs, each ending where the next
/// starts.
fn scoring_windows(len: usize, context_len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < len {
        let end = (start + context_len + 1).min(len);
        out.push(end - start - 1);
        start = end - 1;
    }
    out
}

/// Predicted FLOPs of `evaluations` fusion objective evaluations: each merges
/// every adapter and runs a forward pass over every scoring window of every
/// query document (a document's final token is only a target).
pub fn analytic_fusion_flops(
    model: &TinyLM,
    query: &[Vec<u32>],
    adapters: &[&LowRankAdapter],
    evaluations: usize,
) -> u64 {
    let ctx = model.config().context_len;
    let forward: u64 = query
        .iter()
        .flat_map(|d| scoring_windows(d.len(), ctx))
        .map(|n| model.forward_flops(n))
        .sum();
    let merge: u64 = adapters.iter().map(|a| a.merge_flops()).sum();
    evaluations as u64 * (forward + merge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::fusion_loss;
    use crate::lora::{init_adapter, Role};
    use crate::tinylm::ModelConfig;

    #[test]
    fn matmul_definition() {
        assert_eq!(matmul_flops(7, 5, 1), 2 * 7 * 5);
    }

    #[test]
    fn accounting_sums_one_phase() {
        let mut t = FlopTrace::default();
        t.record(Phase::Optimization, "a", 10);
        t.record(Phase::Fusion, "b", 5);
        t.record(Phase::Optimization, "c", 7);
        assert_eq!(flops_account(Phase::Optimization, &t), 17);
        assert_eq!(flops_account(Phase::Initialization, &t), 0);
    }

    #[test]
    fn scoring_windows_cover_every_target_once() {
        assert_eq!(scoring_windows(0, 4), Vec::<usize>::new());
        assert_eq!(scoring_windows(1, 4), Vec::<usize>::new());
        assert_eq!(scoring_windows(5, 4), vec![4]);
        assert_eq!(scoring_windows(6, 4), vec![4, 1]);
        assert_eq!(scoring_windows(13, 4), vec![4, 4, 4]);
    }

    #[test]
    fn analytic_model_tracks_counted_fusion_flops_past_the_context() {
        let cfg = ModelConfig {
            embed_dim: 16,
            n_layers: 1,
            ffn_dim: 32,
            context_len: 12,
            ..ModelConfig::default()
        };
        let m = TinyLM::init(cfg, 1).unwrap();
        let a = init_adapter(&m, 4, Role::Global, 1).unwrap();
        let query: Vec<Vec<u32>> = (0..4)
            .map(|i| {
                m.tokenizer()
                    .encode_document(&"the appeal was heard ".repeat(i + 1))
                    .unwrap()
            })
            .collect();
        let counted = fusion_loss(&[0.5], &[&a], &m, &query, 0.01).unwrap().flops;
        let predicted = analytic_fusion_flops(&m, &query, &[&a], 1);
        let rel = (counted as f64 - predicted as f64).abs() / predicted as f64;
        assert!(rel < 0.1, "{counted} vs {predicted}");
    }

    #[test]
    fn analytic_model_tracks_counted_fusion_flops() {
        let cfg = ModelConfig {
            embed_dim: 16,
            n_layers: 2,
            ffn_dim: 32,
            ..ModelConfig::default()
        };
        let m = TinyLM::init(cfg, 1).unwrap();
        let a = init_adapter(&m, 4, Role::Global, 1).unwrap();
        let b = init_adapter(&m, 4, Role::Revealing, 2).unwrap();
        let query: Vec<Vec<u32>> = (0..6)
            .map(|i| {
                m.tokenizer()
                    .encode_document(&"a claim was filed ".repeat(i % 3 + 1))
                    .unwrap()
            })
            .collect();
        let counted = fusion_loss(&[0.5, 0.5], &[&a, &b], &m, &query, 0.01)
            .unwrap()
            .flops;
        let predicted = analytic_fusion_flops(&m, &query, &[&a, &b], 1);
        let rel = (counted as f64 - predicted as f64).abs() / predicted as f64;
        assert!(rel < 0.1, "{counted} vs {predicted}");
    }
}
