use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::lora::LowRankAdapter;
use crate::optim::{AdamW, OptimizerConfig};
use crate::seed;
use crate::tensor::Tensor;
use crate::tinylm::{CharTokenizer, TinyLM};

/// What one call to [`local_train`] did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Mean training loss per epoch, dropout active.
    pub epoch_losses: Vec<f64>,
    /// Matmul FLOPs of every forward and backward pass.
    pub flops: u64,
}

/// Tokenizes documents as `EOT text EOT`.
pub fn encode_docs<'a>(
    tok: &CharTokenizer,
    texts: impl IntoIterator<Item = &'a str>,
) -> Result<Vec<Vec<u32>>> {
    texts.into_iter().map(|t| tok.encode_document(t)).collect()
}

/// Splits sequences longer than `span` into consecutive windows sharing one
/// boundary token, so every transition is trained exactly once.
fn windows(docs: &[Vec<u32>], span: usize) -> Vec<&[u32]> {
    let mut out = Vec::new();
    for d in docs {
        if d.len() < 2 {
            continue;
        }
        let mut s = 0;
        while s + 1 < d.len() {
            let e = (s + span).min(d.len());
            out.push(&d[s..e]);
            s = e - 1;
        }
    }
    out
}

/// `cfg.epochs` passes of AdamW over `docs` in shuffled mini-batches,
/// training only the adapter factors against the frozen base. Each epoch
/// takes `ceil(n / batch_size)` steps.
pub fn local_train(
    model: &TinyLM,
    start: &LowRankAdapter,
    docs: &[Vec<u32>],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<(LowRankAdapter, TrainReport)> {
    cfg.check()?;
    let seqs = windows(docs, model.config().context_len + 1);
    if seqs.is_empty() {
        return Err(Error::invalid("local training view is empty"));
    }
    let mut adapter = start.clone();
    let sizes: Vec<usize> = adapter.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(cfg.clone(), &sizes);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = seed::rng(seed::derive(seed, "batches"));
    let mut report = TrainReport {
        steps: 0,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        flops: 0,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i]).collect();
            let mut tape = Tape::new(seed::derive_index(seed, report.steps));
            let (loss, nodes) = model.adapter_loss(&mut tape, &adapter, &batch, true)?;
            sum += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            report.flops += tape.flops();
            let zero: Vec<Tensor> = nodes
                .iter()
                .map(|&n| Tensor::zeros(tape.value(n).shape()))
                .collect();
            let g: Vec<&Tensor> = nodes
                .iter()
                .zip(&zero)
                .map(|(&n, z)| grads.get(n).unwrap_or(z))
                .collect();
            opt.step(&mut adapter.tensors_mut(), &g)?;
            report.steps += 1;
            batches += 1;
        }
        report.epoch_losses.push(sum / batches as f64);
    }
    Ok((adapter, report))
}

/// Token-weighted mean cross-entropy of `adapter` on `docs`, dropout off.
pub fn eval_loss(model: &TinyLM, adapter: &LowRankAdapter, docs: &[Vec<u32>]) -> Result<f64> {
    let seqs = windows(docs, model.config().context_len + 1);
    if seqs.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut tape = Tape::new(0);
    let (loss, _) = model.adapter_loss(&mut tape, adapter, &seqs, false)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_adapter, Role};
    use crate::tinylm::ModelConfig;

    fn setup() -> (TinyLM, Vec<Vec<u32>>) {
        let cfg = ModelConfig {
            vocab_size: 100,
            embed_dim: 16,
            n_layers: 1,
            context_len: 32,
            n_heads: 1,
            ffn_dim: 32,
        };
        let m = TinyLM::init(cfg, 3).unwrap();
        let docs = encode_docs(
            m.tokenizer(),
            ["abc abc abc", "hello there", "abc hello", "x y z w", "zzz"],
        )
        .unwrap();
        (m, docs)
    }

    #[test]
    fn step_count_is_epochs_times_batches() {
        let (m, docs) = setup();
        let a = init_adapter(&m, 2, Role::Secure, 1).unwrap();
        let cfg = OptimizerConfig {
            epochs: 3,
            batch_size: 2,
            ..OptimizerConfig::default()
        };
        let (_, r) = local_train(&m, &a, &docs, &cfg, 5).unwrap();
        assert_eq!(r.steps, 3 * 3);
        assert_eq!(r.epoch_losses.len(), 3);
        assert!(r.flops > 0);
        assert!(local_train(&m, &a, &[], &cfg, 5).is_err());
    }

    #[test]
    fn training_reduces_loss_and_leaves_base_alone() {
        let (m, docs) = setup();
        let before = m.weights().clone();
        let a = init_adapter(&m, 4, Role::Secure, 1).unwrap();
        let cfg = OptimizerConfig {
            lr: 1e-2,
            epochs: 10,
            batch_size: 5,
            ..OptimizerConfig::default()
        };
        let (trained, _) = local_train(&m, &a, &docs, &cfg, 2).unwrap();
        assert!(eval_loss(&m, &trained, &docs).unwrap() < eval_loss(&m, &a, &docs).unwrap());
        assert_eq!(m.weights(), &before);
        let (again, _) = local_train(&m, &a, &docs, &cfg, 2).unwrap();
        assert_eq!(again, trained);
    }

    #[test]
    fn long_documents_are_windowed() {
        let d = vec![(0..70).collect::<Vec<u32>>()];
        let w = windows(&d, 33);
        assert_eq!(w.iter().map(|s| s.len() - 1).sum::<usize>(), 69);
        assert!(w.iter().all(|s| s.len() <= 33));
    }
}
