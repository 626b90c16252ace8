//! Tape-free inference over a prepared model.
//!
//! Row-wise work (projections, layer norms, the feed-forward block, the head)
//! runs on all rows of a batch stacked together; attention runs per segment.
//! A batch is one shared prefix followed by any number of continuations, each
//! continuation attending to the whole prefix and to its own earlier tokens,
//! so scoring many continuations of one prefix computes the prefix once.

use std::sync::atomic::Ordering;

use super::model::{Logits, Prepared};
use crate::autodiff::{gelu, log_sum_exp, softmax_in_place};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;

fn layer_norm(x: &[f64], d: usize, g: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            o[j] = g.data()[j] * ((row[j] - mean) * rstd) + b.data()[j];
        }
    }
    out
}

impl Prepared<'_> {
    fn weight(&self, name: &str) -> &Tensor {
        self.overrides
            .get(name)
            .unwrap_or(&self.model.weights()[name])
    }

    /// `x · wᵀ` for `rows` input rows, counting FLOPs.
    fn linear(&self, x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let mut y = vec![0.0; rows * out_dim];
        gemm(
            rows,
            in_dim,
            out_dim,
            x,
            false,
            w.data(),
            true,
            &mut y,
            false,
        );
        self.count(rows * in_dim * out_dim);
        y
    }

    fn count(&self, macs: usize) {
        self.flops.fetch_add(2 * macs as u64, Ordering::Relaxed);
    }

    fn ids(&self, tokens: &[u32]) -> Result<()> {
        let v = self.model.config().vocab_size;
        match tokens.iter().find(|&&t| t as usize >= v) {
            Some(t) => Err(Error::invalid(format!(
                "token id {t} out of vocabulary ({v})"
            ))),
            None => Ok(()),
        }
    }

    /// Final hidden rows (after the closing layer norm) for `prefix` followed
    /// by every continuation, stacked in that order. Continuation `j` sits at
    /// positions `prefix.len()..` and sees the prefix plus its own past.
    pub(super) fn hidden_rows(&self, prefix: &[u32], conts: &[&[u32]]) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let (d, ctx) = (cfg.embed_dim, cfg.context_len);
        let p = prefix.len();
        if p == 0 {
            return Err(Error::invalid("inference needs a non-empty prefix"));
        }
        self.ids(prefix)?;
        for c in conts {
            self.ids(c)?;
            if p + c.len() > ctx {
                return Err(Error::invalid(format!(
                    "{} tokens exceed the context length {ctx}",
                    p + c.len()
                )));
            }
        }
        if p > ctx {
            return Err(Error::invalid(format!(
                "{p} tokens exceed the context length {ctx}"
            )));
        }
        // (first row, length, first position)
        let mut segments = vec![(0usize, p, 0usize)];
        let mut n_rows = p;
        for c in conts {
            if !c.is_empty() {
                segments.push((n_rows, c.len(), p));
                n_rows += c.len();
            }
        }

        let emb = self.weight("tok_emb");
        let pos = &self.model.positions;
        let mut x = vec![0.0; n_rows * d];
        let mut fill = |row: usize, tok: u32, at: usize| {
            let (e, q) = (emb.row(tok as usize), pos.row(at));
            for j in 0..d {
                x[row * d + j] = e[j] + q[j];
            }
        };
        for (i, &t) in prefix.iter().enumerate() {
            fill(i, t, i);
        }
        let mut row = p;
        for c in conts {
            for (i, &t) in c.iter().enumerate() {
                fill(row, t, p + i);
                row += 1;
            }
        }

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for layer in 0..cfg.n_layers {
            let w = |n: &str| self.weight(&format!("layer{layer}.{n}"));
            let h = layer_norm(&x, d, w("ln1.g"), w("ln1.b"));
            let q = self.linear(&h, n_rows, w("q"));
            let k = self.linear(&h, n_rows, w("k"));
            let v = self.linear(&h, n_rows, w("v"));
            let mut att_out = vec![0.0; n_rows * d];
            for &(start, len, first_pos) in &segments {
                let span = start * d..(start + len) * d;
                let (qs, ks, vs) = (&q[span.clone()], &k[span.clone()], &v[span.clone()]);
                let mut s_self = vec![0.0; len * len];
                gemm(len, d, len, qs, false, ks, true, &mut s_self, false);
                self.count(len * d * len);
                // Scores against the prefix, for continuation segments.
                let pre = if first_pos > 0 { p } else { 0 };
                let mut s_pre = vec![0.0; len * pre];
                if pre > 0 {
                    gemm(
                        len,
                        d,
                        pre,
                        qs,
                        false,
                        &k[..pre * d],
                        true,
                        &mut s_pre,
                        false,
                    );
                    self.count(len * d * pre);
                }
                let mut buf = Vec::with_capacity(pre + len);
                for t in 0..len {
                    buf.clear();
                    buf.extend(s_pre[t * pre..(t + 1) * pre].iter().map(|s| s * inv_sqrt_d));
                    buf.extend(
                        s_self[t * len..t * len + t + 1]
                            .iter()
                            .map(|s| s * inv_sqrt_d),
                    );
                    softmax_in_place(&mut buf);
                    s_pre[t * pre..(t + 1) * pre].copy_from_slice(&buf[..pre]);
                    let row = &mut s_self[t * len..(t + 1) * len];
                    row[..=t].copy_from_slice(&buf[pre..]);
                    row[t + 1..].iter_mut().for_each(|v| *v = 0.0);
                }
                let out = &mut att_out[span];
                if pre > 0 {
                    gemm(len, pre, d, &s_pre, false, &v[..pre * d], false, out, false);
                    self.count(len * pre * d);
                }
                gemm(len, len, d, &s_self, false, vs, false, out, pre > 0);
                self.count(len * len * d);
            }
            let o = self.linear(&att_out, n_rows, w("o"));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = layer_norm(&x, d, w("ln2.g"), w("ln2.b"));
            let mut u = self.linear(&h, n_rows, w("ffn.up"));
            u.iter_mut().for_each(|v| *v = gelu(*v));
            let dn = self.linear(&u, n_rows, w("ffn.down"));
            x.iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
        }
        Ok(layer_norm(
            &x,
            d,
            self.weight("ln_f.g"),
            self.weight("ln_f.b"),
        ))
    }

    fn head(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.model.config().embed_dim;
        self.linear(hidden, hidden.len() / d, self.weight("head"))
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Logits> {
        let vocab = self.model.config().vocab_size;
        if tokens.is_empty() {
            return Ok(Logits::new(0, vocab, Vec::new()));
        }
        let hidden = self.hidden_rows(tokens, &[])?;
        Ok(Logits::new(tokens.len(), vocab, self.head(&hidden)))
    }

    /// Logits of the last position only.
    pub fn next_logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let d = self.model.config().embed_dim;
        let hidden = self.hidden_rows(tokens, &[])?;
        Ok(self.head(&hidden[hidden.len() - d..]))
    }

    /// Per-position `log P(tokens[i] | tokens[..i])` for `i ≥ 1`. Sequences
    /// longer than the context are scored in consecutive windows, each
    /// conditioned only on its own window.
    pub fn log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let ctx = self.model.config().context_len;
        let mut out = Vec::with_capacity(tokens.len().saturating_sub(1));
        let mut start = 0;
        while start + 1 < tokens.len() {
            let end = (start + ctx + 1).min(tokens.len());
            let window = &tokens[start..end];
            let logits = self.logits(&window[..window.len() - 1])?;
            for (i, &t) in window[1..].iter().enumerate() {
                let row = logits.row(i);
                out.push(row[t as usize] - log_sum_exp(row));
            }
            start = end - 1;
        }
        Ok(out)
    }

    /// [`Prepared::log_probs`] for many documents. Documents sharing their
    /// first token are batched as continuations of that one-token prefix.
    pub fn docs_log_probs(&self, docs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let ctx = self.model.config().context_len;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; docs.len()];
        let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, d) in docs.iter().enumerate() {
            if d.len() >= 2 && d.len() <= ctx + 1 {
                groups.entry(d[0]).or_default().push(i);
            } else {
                out[i] = Some(self.log_probs(d)?);
            }
        }
        for (first, idx) in groups {
            for chunk in idx.chunks(CHUNK) {
                let conts: Vec<&[u32]> = chunk.iter().map(|&i| &docs[i][1..]).collect();
                let (_, lps) = self.continuation_log_probs(&[first], &conts)?;
                for (&i, lp) in chunk.iter().zip(lps) {
                    out[i] = Some(lp);
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|o| o.expect("every document scored"))
            .collect())
    }

    /// Log-probabilities of `prefix[1..]` and, for each continuation, of all
    /// its tokens given the prefix. The prefix is computed once.
    pub fn continuation_log_probs(
        &self,
        prefix: &[u32],
        conts: &[&[u32]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let v = self.model.config().vocab_size;
        let inputs: Vec<&[u32]> = conts
            .iter()
            .map(|c| &c[..c.len().saturating_sub(1)])
            .collect();
        let hidden = self.hidden_rows(prefix, &inputs)?;
        let logits = self.head(&hidden);
        let lp = |row: usize, t: u32| {
            let r = &logits[row * v..(row + 1) * v];
            r[t as usize] - log_sum_exp(r)
        };
        let p = prefix.len();
        let pre: Vec<f64> = prefix[1..]
            .iter()
            .enumerate()
            .map(|(i, &t)| lp(i, t))
            .collect();
        let mut row = p;
        let mut outs = Vec::with_capacity(conts.len());
        for c in conts {
            let mut o = Vec::with_capacity(c.len());
            for (i, &t) in c.iter().enumerate() {
                o.push(lp(if i == 0 { p - 1 } else { row + i - 1 }, t));
            }
            row += c.len().saturating_sub(1);
            outs.push(o);
        }
        Ok((pre, outs))
    }
}

/// Keys and values of every position decoded so far, per layer.
pub(super) struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub(super) fn new(n_layers: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub(super) fn len(&self) -> usize {
        self.len
    }
}

impl Prepared<'_> {
    /// Appends `tokens` at positions `cache.len()..` and returns the logits of
    /// the last one. Same computation as [`Prepared::next_logits`] on the
    /// whole sequence, without recomputing earlier positions.
    pub(super) fn extend(&self, cache: &mut KvCache, tokens: &[u32]) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let (d, ctx) = (cfg.embed_dim, cfg.context_len);
        let n = tokens.len();
        if n == 0 {
            return Err(Error::invalid("nothing to decode"));
        }
        if cache.len + n > ctx {
            return Err(Error::invalid(format!(
                "{} tokens exceed the context length {ctx}",
                cache.len + n
            )));
        }
        self.ids(tokens)?;
        let (emb, pos) = (self.weight("tok_emb"), &self.model.positions);
        let mut x = vec![0.0; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            let (e, q) = (emb.row(t as usize), pos.row(cache.len + i));
            for j in 0..d {
                x[i * d + j] = e[j] + q[j];
            }
        }
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        for layer in 0..cfg.n_layers {
            let w = |name: &str| self.weight(&format!("layer{layer}.{name}"));
            let h = layer_norm(&x, d, w("ln1.g"), w("ln1.b"));
            let q = self.linear(&h, n, w("q"));
            cache.keys[layer].extend(self.linear(&h, n, w("k")));
            cache.values[layer].extend(self.linear(&h, n, w("v")));
            let (keys, values) = (&cache.keys[layer], &cache.values[layer]);
            let mut att_out = vec![0.0; n * d];
            let mut scores = Vec::with_capacity(cache.len + n);
            for t in 0..n {
                let seen = cache.len + t + 1;
                let qt = &q[t * d..(t + 1) * d];
                scores.clear();
                scores.extend(
                    keys[..seen * d]
                        .chunks(d)
                        .map(|k| qt.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d),
                );
                softmax_in_place(&mut scores);
                let out = &mut att_out[t * d..(t + 1) * d];
                for (p, v) in scores.iter().zip(values.chunks(d)) {
                    out.iter_mut().zip(v).for_each(|(o, vv)| *o += p * vv);
                }
                self.count(2 * seen * d);
            }
            let o = self.linear(&att_out, n, w("o"));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = layer_norm(&x, d, w("ln2.g"), w("ln2.b"));
            let mut u = self.linear(&h, n, w("ffn.up"));
            u.iter_mut().for_each(|v| *v = gelu(*v));
            let dn = self.linear(&u, n, w("ffn.down"));
            x.iter_mut().zip(&dn).for_each(|(a, b)| *a += b);
        }
        cache.len += n;
        let last = layer_norm(
            &x[(n - 1) * d..],
            d,
            self.weight("ln_f.g"),
            self.weight("ln_f.b"),
        );
        Ok(self.head(&last))
    }
}
