//! Synthetic PII corpora, exact PII detection, scrubbing, and clipped
//! Gaussian noise on adapter updates.

mod corpus;
mod detect;
mod dictionary;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::tinylm::tokenizer::MASK_LITERAL;

pub use corpus::{
    generate_corpus, public_corpus, read_corpus_jsonl, render_statement, write_corpus_jsonl,
    ClientDataset, CorpusConfig, CorpusRecord, Template, TEMPLATES,
};
pub use detect::{detect_pii, Detector};
pub use dictionary::{generate_dictionary, PiiDictionary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PiiClass {
    Person,
    Loc,
    Org,
    Product,
    Date,
}

impl PiiClass {
    pub const ALL: [PiiClass; 5] = [
        PiiClass::Person,
        PiiClass::Loc,
        PiiClass::Org,
        PiiClass::Product,
        PiiClass::Date,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PiiClass::Person => "PERSON",
            PiiClass::Loc => "LOC",
            PiiClass::Org => "ORG",
            PiiClass::Product => "PRODUCT",
            PiiClass::Date => "DATE",
        }
    }

    pub fn parse(s: &str) -> Option<PiiClass> {
        PiiClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
    }
}

/// Byte range `[start, end)` of `text` holding `value`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiSpan {
    pub start: usize,
    pub end: usize,
    pub class: PiiClass,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub pii_spans: Vec<PiiSpan>,
}

impl Document {
    pub fn plain(text: impl Into<String>) -> Self {
        Document {
            text: text.into(),
            pii_spans: Vec::new(),
        }
    }
}

/// Replaces every span with the literal `[MASK]` and clears span metadata.
pub fn scrub(doc: &Document, spans: &[PiiSpan]) -> Result<Document> {
    let mut sorted: Vec<&PiiSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| s.start);
    let mut out = String::with_capacity(doc.text.len());
    let mut at = 0;
    for s in sorted {
        if s.start < at || s.end > doc.text.len() || s.start >= s.end {
            return Err(Error::invalid(format!(
                "span {}..{} invalid for a {}-byte document (or overlaps)",
                s.start,
                s.end,
                doc.text.len()
            )));
        }
        if !doc.text.is_char_boundary(s.start) || !doc.text.is_char_boundary(s.end) {
            return Err(Error::invalid(format!(
                "span {}..{} splits a character",
                s.start, s.end
            )));
        }
        out.push_str(&doc.text[at..s.start]);
        out.push_str(MASK_LITERAL);
        at = s.end;
    }
    out.push_str(&doc.text[at..]);
    Ok(Document {
        text: out,
        pii_spans: Vec::new(),
    })
}

/// Clips the global L2 norm of `update` to `clip_norm`, then adds
/// i.i.d. `N(0, (sigma·clip_norm)²)` noise to every element.
pub fn dp_noise(update: &[Tensor], clip_norm: f64, sigma: f64, seed: u64) -> Result<Vec<Tensor>> {
    if !(clip_norm > 0.0 && clip_norm.is_finite()) {
        return Err(Error::invalid(format!(
            "clip_norm must be positive, got {clip_norm}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    let norm = update.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    let factor = if norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, sigma * clip_norm).expect("finite std");
    Ok(update
        .iter()
        .map(|t| {
            let mut t = if factor < 1.0 {
                t.scaled(factor)
            } else {
                t.clone()
            };
            if sigma > 0.0 {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += noise.sample(&mut rng));
            }
            t
        })
        .collect())
}
