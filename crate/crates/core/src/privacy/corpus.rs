use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::detect::Detector;
use super::dictionary::PiiDictionary;
use super::{scrub, Document, PiiClass, PiiSpan};
use crate::error::{Error, Result};
use crate::seed;

/// A one-sentence statement with `{CLASS}` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Template {
    pub pattern: &'static str,
}

impl Template {
    /// Slot classes in order of appearance.
    pub fn slots(&self) -> Vec<PiiClass> {
        let mut out = Vec::new();
        let mut rest = self.pattern;
        while let Some(open) = rest.find('{') {
            let close = rest[open..].find('}').expect("template slots are closed") + open;
            out.push(PiiClass::parse(&rest[open + 1..close]).expect("template slot names a class"));
            rest = &rest[close + 1..];
        }
        out
    }
}

/// No two slots are adjacent, and no template word is a generated name.
pub const TEMPLATES: [Template; 12] = [
    Template {
        pattern: "{PERSON} filed a claim against {ORG} on {DATE}.",
    },
    Template {
        pattern: "The court in {LOC} heard {PERSON} on {DATE}.",
    },
    Template {
        pattern: "{PERSON} was held in {LOC} after a dispute with {ORG}.",
    },
    Template {
        pattern: "On {DATE} the judge ruled that {ORG} owed {PERSON} damages.",
    },
    Template {
        pattern: "{PERSON} appealed the ruling of {DATE} to the court in {LOC}.",
    },
    Template {
        pattern: "A witness saw {PERSON} leave {LOC} on {DATE}.",
    },
    Template {
        pattern: "{PERSON} bought a {PRODUCT} from {ORG} and liked it.",
    },
    Template {
        pattern: "The {PRODUCT} I got in {LOC} broke on {DATE}.",
    },
    Template {
        pattern: "Staff at {ORG} in {LOC} were kind to {PERSON}.",
    },
    Template {
        pattern: "{PERSON} says the {PRODUCT} is worth the price.",
    },
    Template {
        pattern: "Great service from {ORG}, my {PRODUCT} came on {DATE}.",
    },
    Template {
        pattern: "We met {PERSON} at the {ORG} shop near {LOC}.",
    },
];

/// Fills `template` with `values` (one per slot, in order) and records the
/// spans.
pub fn render_statement(template: &Template, values: &[&str]) -> Result<Document> {
    let slots = template.slots();
    if slots.len() != values.len() {
        return Err(Error::invalid(format!(
            "template has {} slots, got {} values",
            slots.len(),
            values.len()
        )));
    }
    let mut text = String::new();
    let mut spans = Vec::with_capacity(slots.len());
    let mut rest = template.pattern;
    for (class, value) in slots.into_iter().zip(values) {
        let open = rest.find('{').expect("slot count checked");
        let close = rest[open..].find('}').expect("template slots are closed") + open;
        text.push_str(&rest[..open]);
        let start = text.len();
        text.push_str(value);
        spans.push(PiiSpan {
            start,
            end: text.len(),
            class,
            value: value.to_string(),
        });
        rest = &rest[close + 1..];
    }
    text.push_str(rest);
    Ok(Document {
        text,
        pii_spans: spans,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_clients: usize,
    pub docs_per_client: usize,
    /// Held-out documents per client for fusion query sets.
    pub query_size: usize,
    /// Held-out documents per client for utility evaluation.
    pub eval_size: usize,
    /// Distinct private values per class owned by each client.
    pub pool_per_class: usize,
    /// Minimum per-class dictionary size the attacks will draw candidates from.
    pub min_class_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_clients: 10,
            docs_per_client: 100,
            query_size: 16,
            eval_size: 16,
            pool_per_class: 6,
            min_class_size: 50,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        let positive = [
            ("n_clients", self.n_clients),
            ("docs_per_client", self.docs_per_client),
            ("query_size", self.query_size),
            ("eval_size", self.eval_size),
            ("pool_per_class", self.pool_per_class),
            ("min_class_size", self.min_class_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                errors.push(format!("{prefix}.{name} must be positive"));
            }
        }
    }
}

/// One client's partition. Every document of every split is built from the
/// client's private pool, which no other client shares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub raw_view: Vec<Document>,
    pub masked_view: Vec<Document>,
    pub query_raw: Vec<Document>,
    pub query_masked: Vec<Document>,
    pub eval_raw: Vec<Document>,
    pub eval_masked: Vec<Document>,
}

impl ClientDataset {
    pub fn size(&self) -> usize {
        self.raw_view.len()
    }

    /// Distinct values planted in the training raw view, per class.
    pub fn planted(&self) -> BTreeMap<PiiClass, Vec<String>> {
        let mut out: BTreeMap<PiiClass, Vec<String>> = BTreeMap::new();
        for span in self.raw_view.iter().flat_map(|d| &d.pii_spans) {
            let list = out.entry(span.class).or_default();
            if !list.contains(&span.value) {
                list.push(span.value.clone());
            }
        }
        out.values_mut().for_each(|v| v.sort());
        out
    }

    pub fn raw_texts(&self) -> Vec<&str> {
        self.raw_view.iter().map(|d| d.text.as_str()).collect()
    }

    pub fn masked_texts(&self) -> Vec<&str> {
        self.masked_view.iter().map(|d| d.text.as_str()).collect()
    }
}

/// Cycles through a shuffled pool so every value is used before any repeats.
struct PoolCycle {
    values: Vec<String>,
    at: usize,
}

impl PoolCycle {
    fn next(&mut self) -> &str {
        let v = &self.values[self.at % self.values.len()];
        self.at += 1;
        v
    }
}

fn statement<R: Rng>(rng: &mut R, pools: &mut BTreeMap<PiiClass, PoolCycle>) -> Result<Document> {
    let template = TEMPLATES.choose(rng).expect("templates are non-empty");
    let values: Vec<String> = template
        .slots()
        .into_iter()
        .map(|c| {
            pools
                .get_mut(&c)
                .expect("pool for every class")
                .next()
                .to_string()
        })
        .collect();
    render_statement(
        template,
        &values.iter().map(String::as_str).collect::<Vec<_>>(),
    )
}

fn masked(detector: &Detector, docs: &[Document]) -> Result<Vec<Document>> {
    docs.iter()
        .map(|d| scrub(d, &detector.detect(&d.text)))
        .collect()
}

/// Per-client corpora from disjoint slices of `dictionary`. Masked views are
/// produced by running the detector over the raw text, not by reusing the
/// generator's spans.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    dictionary: &PiiDictionary,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    let mut errors = Vec::new();
    cfg.validate("corpus", &mut errors);
    if !errors.is_empty() {
        return Err(Error::invalid(errors.join("; ")));
    }
    let need = (cfg.n_clients * cfg.pool_per_class).max(cfg.min_class_size);
    for class in PiiClass::ALL {
        let have = dictionary.values(class).len();
        if have < need {
            return Err(Error::invalid(format!(
                "dictionary has {have} {} values, need at least {need}",
                class.as_str()
            )));
        }
    }
    let detector = Detector::new(dictionary);
    let mut rng = seed::rng(seed::derive(seed, "corpus"));
    let mut shuffled: BTreeMap<PiiClass, Vec<String>> = BTreeMap::new();
    for class in PiiClass::ALL {
        let mut v = dictionary.values(class).to_vec();
        v.shuffle(&mut rng);
        shuffled.insert(class, v);
    }
    (0..cfg.n_clients)
        .map(|client_id| {
            let mut rng = seed::rng(seed::derive_index(
                seed::derive(seed, "client"),
                client_id as u64,
            ));
            let mut pools: BTreeMap<PiiClass, PoolCycle> = shuffled
                .iter()
                .map(|(&class, all)| {
                    let slice = all
                        [client_id * cfg.pool_per_class..(client_id + 1) * cfg.pool_per_class]
                        .to_vec();
                    (
                        class,
                        PoolCycle {
                            values: slice,
                            at: 0,
                        },
                    )
                })
                .collect();
            let mut draw = |n: usize| -> Result<Vec<Document>> {
                (0..n).map(|_| statement(&mut rng, &mut pools)).collect()
            };
            let raw_view = draw(cfg.docs_per_client)?;
            let query_raw = draw(cfg.query_size)?;
            let eval_raw = draw(cfg.eval_size)?;
            Ok(ClientDataset {
                client_id,
                masked_view: masked(&detector, &raw_view)?,
                query_masked: masked(&detector, &query_raw)?,
                eval_masked: masked(&detector, &eval_raw)?,
                raw_view,
                query_raw,
                eval_raw,
            })
        })
        .collect()
}

/// Public pretraining text: template statements filled from `public`, each
/// emitted both raw and scrubbed so the base model has seen both forms.
pub fn public_corpus(
    public: &PiiDictionary,
    n_statements: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let detector = Detector::new(public);
    let mut rng = seed::rng(seed::derive(seed, "public-corpus"));
    let mut out = Vec::with_capacity(2 * n_statements);
    for _ in 0..n_statements {
        let template = TEMPLATES.choose(&mut rng).expect("templates are non-empty");
        let mut values = Vec::new();
        for class in template.slots() {
            let pool = public.values(class);
            if pool.is_empty() {
                return Err(Error::invalid(format!(
                    "public dictionary has no {} values",
                    class.as_str()
                )));
            }
            values.push(pool[rng.gen_range(0..pool.len())].as_str());
        }
        let doc = render_statement(template, &values)?;
        let scrubbed = scrub(&doc, &detector.detect(&doc.text))?;
        out.push(doc.text);
        out.push(scrubbed.text);
    }
    Ok(out)
}

/// One JSON-lines row of a persisted corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub client_id: usize,
    pub split: String,
    pub view: String,
    pub text: String,
    pub spans: Vec<PiiSpan>,
}

const SPLITS: [&str; 3] = ["train", "query", "eval"];

fn views(c: &ClientDataset) -> [(&'static str, &'static str, &Vec<Document>); 6] {
    [
        ("train", "raw", &c.raw_view),
        ("train", "masked", &c.masked_view),
        ("query", "raw", &c.query_raw),
        ("query", "masked", &c.query_masked),
        ("eval", "raw", &c.eval_raw),
        ("eval", "masked", &c.eval_masked),
    ]
}

pub fn write_corpus_jsonl(path: &Path, clients: &[ClientDataset]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for c in clients {
        for (split, view, docs) in views(c) {
            for d in docs {
                let rec = CorpusRecord {
                    client_id: c.client_id,
                    split: split.into(),
                    view: view.into(),
                    text: d.text.clone(),
                    spans: d.pii_spans.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<ClientDataset>> {
    let mut clients: BTreeMap<usize, ClientDataset> = BTreeMap::new();
    for (i, line) in BufReader::new(std::fs::File::open(path)?)
        .lines()
        .enumerate()
    {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("corpus line {}: {e}", i + 1)))?;
        let c = clients
            .entry(rec.client_id)
            .or_insert_with(|| ClientDataset {
                client_id: rec.client_id,
                raw_view: Vec::new(),
                masked_view: Vec::new(),
                query_raw: Vec::new(),
                query_masked: Vec::new(),
                eval_raw: Vec::new(),
                eval_masked: Vec::new(),
            });
        let target = match (rec.split.as_str(), rec.view.as_str()) {
            ("train", "raw") => &mut c.raw_view,
            ("train", "masked") => &mut c.masked_view,
            ("query", "raw") => &mut c.query_raw,
            ("query", "masked") => &mut c.query_masked,
            ("eval", "raw") => &mut c.eval_raw,
            ("eval", "masked") => &mut c.eval_masked,
            (s, v) => {
                return Err(Error::Format(format!(
                    "corpus line {}: unknown split/view {s:?}/{v:?} (splits are {SPLITS:?})",
                    i + 1
                )))
            }
        };
        for s in &rec.spans {
            if s.end > rec.text.len() || rec.text.get(s.start..s.end) != Some(s.value.as_str()) {
                return Err(Error::Format(format!(
                    "corpus line {}: span does not match text",
                    i + 1
                )));
            }
        }
        target.push(Document {
            text: rec.text,
            pii_spans: rec.spans,
        });
    }
    for c in clients.values() {
        if c.raw_view.len() != c.masked_view.len() {
            return Err(Error::Format(format!(
                "client {} has unequal raw and masked views",
                c.client_id
            )));
        }
    }
    Ok(clients.into_values().collect())
}
