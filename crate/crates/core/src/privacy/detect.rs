use aho_corasick::{AhoCorasick, MatchKind};
use regex::Regex;

use super::dictionary::PiiDictionary;
use super::{PiiClass, PiiSpan};

/// Exact PII detector: dictionary lookup (leftmost-longest, whole words)
/// plus a `YYYY-MM-DD` pattern for dates.
#[derive(Clone, Debug)]
pub struct Detector {
    automaton: AhoCorasick,
    classes: Vec<PiiClass>,
    values: Vec<String>,
    date: Regex,
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

fn whole_word(text: &[u8], start: usize, end: usize) -> bool {
    (start == 0 || !is_word_byte(text[start - 1]))
        && (end == text.len() || !is_word_byte(text[end]))
}

impl Detector {
    pub fn new(dictionary: &PiiDictionary) -> Self {
        let mut classes = Vec::new();
        let mut values = Vec::new();
        for class in PiiClass::ALL {
            for v in dictionary.values(class) {
                classes.push(class);
                values.push(v.clone());
            }
        }
        let automaton = AhoCorasick::builder()
            .match_kind(MatchKind::Standard)
            .build(&values)
            .expect("dictionary patterns build");
        Detector {
            automaton,
            classes,
            values,
            date: Regex::new(r"\b\d{4}-\d{2}-\d{2}\b").expect("date pattern"),
        }
    }

    /// Non-overlapping spans sorted by start; at any position the longest
    /// candidate wins.
    pub fn detect(&self, text: &str) -> Vec<PiiSpan> {
        let bytes = text.as_bytes();
        let mut found: Vec<PiiSpan> = Vec::new();
        // Every whole-word occurrence is a candidate; the greedy pass below
        // keeps the longest one at each leftmost start.
        for m in self.automaton.find_overlapping_iter(text) {
            if whole_word(bytes, m.start(), m.end()) {
                let i = m.pattern().as_usize();
                found.push(PiiSpan {
                    start: m.start(),
                    end: m.end(),
                    class: self.classes[i],
                    value: self.values[i].clone(),
                });
            }
        }
        for m in self.date.find_iter(text) {
            found.push(PiiSpan {
                start: m.start(),
                end: m.end(),
                class: PiiClass::Date,
                value: m.as_str().to_string(),
            });
        }
        found.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
        let mut out: Vec<PiiSpan> = Vec::with_capacity(found.len());
        for s in found {
            if out.last().is_none_or(|last| s.start >= last.end) {
                out.push(s);
            }
        }
        out
    }
}

/// Detects PII in `text` with a detector built from `dictionary`.
pub fn detect_pii(text: &str, dictionary: &PiiDictionary) -> Vec<PiiSpan> {
    Detector::new(dictionary).detect(text)
}
