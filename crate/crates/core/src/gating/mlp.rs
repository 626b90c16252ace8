use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimizerConfig};
use crate::seed;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const PARAMS: [&str; 7] = ["w1", "ln1.g", "ln1.b", "w2", "ln2.g", "ln2.b", "head"];

/// `x → standardize → GLU(W₁x) → LN → dropout → GELU(W₂·) → LN → dropout → head`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingMLP {
    pub input_dim: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub dropout: f64,
    /// Per-feature mean and standard deviation of the training inputs.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    weights: Vec<Tensor>,
}

impl GatingMLP {
    pub fn new(
        input_dim: usize,
        hidden: usize,
        outputs: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || outputs < 2 {
            return Err(Error::invalid(format!(
                "gating MLP needs positive widths and at least 2 outputs, got {input_dim}/{hidden}/{outputs}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut rng = seed::rng(seed);
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let weights = vec![
            Tensor::randn(&[2 * hidden, input_dim], std(input_dim), &mut rng),
            Tensor::full(&[hidden], 1.0),
            Tensor::zeros(&[hidden]),
            Tensor::randn(&[hidden, hidden], std(hidden), &mut rng),
            Tensor::full(&[hidden], 1.0),
            Tensor::zeros(&[hidden]),
            Tensor::randn(&[outputs, hidden], std(hidden), &mut rng),
        ];
        Ok(GatingMLP {
            input_dim,
            hidden,
            outputs,
            dropout,
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            weights,
        })
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Sets the input standardization from `rows`. Constant features keep
    /// unit scale.
    pub fn fit_standardization(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::invalid("no rows to standardize"));
        }
        let n = rows.len() as f64;
        for j in 0..self.input_dim {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            self.input_mean[j] = mean;
            self.input_std[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    fn standardized(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.input_dim);
        for r in rows {
            if r.len() != self.input_dim {
                return Err(Error::shape(
                    "gating",
                    format!("input width {} vs {}", r.len(), self.input_dim),
                ));
            }
            data.extend(
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - self.input_mean[j]) / self.input_std[j]),
            );
        }
        Tensor::new(vec![rows.len(), self.input_dim], data)
    }

    /// Records the logits of `rows` on `tape`; returns (logits, parameter nodes).
    pub fn record(
        &self,
        tape: &mut Tape,
        rows: &[&[f64]],
        training: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let x = tape.constant(self.standardized(rows)?);
        let p: Vec<NodeId> = PARAMS
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| tape.input(n, w.clone(), true))
            .collect::<Result<_>>()?;
        let mut h = tape.matmul(x, p[0], true)?;
        h = tape.glu(h)?;
        h = tape.layer_norm(h, p[1], p[2], LN_EPS)?;
        if training && self.dropout > 0.0 {
            h = tape.dropout(h, self.dropout)?;
        }
        h = tape.matmul(h, p[3], true)?;
        h = tape.gelu(h)?;
        h = tape.layer_norm(h, p[4], p[5], LN_EPS)?;
        if training && self.dropout > 0.0 {
            h = tape.dropout(h, self.dropout)?;
        }
        Ok((tape.matmul(h, p[6], true)?, p))
    }

    /// Logits `z` for one input row, dropout off.
    pub fn logits(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(0);
        let (z, _) = self.record(&mut tape, &[row], false)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Mean cross-entropy over `rows`, dropout off.
    pub fn loss(&self, rows: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new(0);
        let (z, _) = self.record(&mut tape, &refs, false)?;
        let l = tape.cross_entropy(z, labels)?;
        Ok(tape.value(l).item())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: GatingMLP = serde_json::from_str(s)?;
        let fresh = GatingMLP::new(m.input_dim, m.hidden, m.outputs, m.dropout, 0)?;
        let shapes_match = m.weights.len() == fresh.weights.len()
            && m.weights
                .iter()
                .zip(&fresh.weights)
                .all(|(a, b)| a.shape() == b.shape());
        if !shapes_match || m.input_mean.len() != m.input_dim || m.input_std.len() != m.input_dim {
            return Err(Error::Format(
                "gating weights do not match the declared widths".into(),
            ));
        }
        Ok(m)
    }
}

/// Optimizer settings and the loss record of [`train_mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingTrace {
    /// Full-set loss (dropout off) before training.
    pub initial_loss: f64,
    /// Full-set loss (dropout off) after each optimizer step.
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains every MLP parameter with AdamW on `(rows, labels)` in shuffled
/// mini-batches. Nothing outside the MLP is touched.
pub fn train_mlp(
    mlp: &mut GatingMLP,
    rows: &[Vec<f64>],
    labels: &[usize],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<GatingTrace> {
    cfg.check()?;
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(Error::invalid(format!(
            "{} rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    for l in 0..mlp.outputs {
        if !labels.contains(&l) {
            return Err(Error::invalid(format!("label {l} has no training sample")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= mlp.outputs) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} outputs",
            mlp.outputs
        )));
    }
    mlp.fit_standardization(rows)?;
    let sizes: Vec<usize> = mlp.weights.iter().map(Tensor::numel).collect();
    let mut opt = AdamW::new(cfg.clone(), &sizes);
    let mut trace = GatingTrace {
        initial_loss: mlp.loss(rows, labels)?,
        step_losses: Vec::new(),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = seed::rng(seed::derive(seed, "gating-batches"));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| rows[i].as_slice()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new(seed::derive_index(seed, trace.steps as u64));
            let (z, params) = mlp.record(&mut tape, &batch, true)?;
            let loss = tape.cross_entropy(z, &targets)?;
            let grads = tape.backward(loss)?;
            let named: HashMap<NodeId, &Tensor> = params
                .iter()
                .filter_map(|&p| grads.get(p).map(|g| (p, g)))
                .collect();
            let zero: Vec<Tensor> = mlp
                .weights
                .iter()
                .map(|w| Tensor::zeros(w.shape()))
                .collect();
            let g: Vec<&Tensor> = params
                .iter()
                .zip(&zero)
                .map(|(p, z)| named.get(p).copied().unwrap_or(z))
                .collect();
            let mut ws: Vec<&mut Tensor> = mlp.weights.iter_mut().collect();
            opt.step(&mut ws, &g)?;
            trace.steps += 1;
            trace.step_losses.push(mlp.loss(rows, labels)?);
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_of_the_mlp_check_out() {
        let mlp = GatingMLP::new(4, 6, 3, 0.0, 2).unwrap();
        let rows = [vec![0.1, -0.3, 0.5, 0.2], vec![-0.4, 0.0, 0.3, 0.9]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new(0);
        let (z, _) = mlp.record(&mut tape, &refs, false).unwrap();
        let l = tape.cross_entropy(z, &[2, 0]).unwrap();
        let err = tape.check_gradients(&HashMap::new(), l, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn training_separates_classes_and_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i % 3) as f64, 1.0 - (i % 3) as f64, 0.5])
            .collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let cfg = OptimizerConfig {
            lr: 1e-2,
            epochs: 10,
            batch_size: 10,
            ..OptimizerConfig::default()
        };
        let mut a = GatingMLP::new(3, 16, 3, 0.1, 1).unwrap();
        let t = train_mlp(&mut a, &rows, &labels, &cfg, 4).unwrap();
        assert!(*t.step_losses.last().unwrap() < 0.1 * t.initial_loss);
        let mut b = GatingMLP::new(3, 16, 3, 0.1, 1).unwrap();
        train_mlp(&mut b, &rows, &labels, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(GatingMLP::from_json(&a.to_json().unwrap()).unwrap(), a);
        let mut c = GatingMLP::new(3, 16, 3, 0.1, 1).unwrap();
        assert!(train_mlp(&mut c, &rows[..2], &labels[..2], &cfg, 4).is_err());
    }
}
