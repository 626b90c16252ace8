use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::registry::{KeyRegistry, KEY_PREFIX};
use super::SECURE_INDEX;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingCategory {
    Valid,
    Malformed,
    Empty,
    NoKey,
}

impl RoutingCategory {
    pub const ALL: [RoutingCategory; 4] = [
        RoutingCategory::Valid,
        RoutingCategory::Malformed,
        RoutingCategory::Empty,
        RoutingCategory::NoKey,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingSample {
    pub prompt: String,
    pub label: usize,
    pub category: RoutingCategory,
    /// The key a valid sample carries.
    pub key_id: Option<String>,
}

pub const PROMPT_BODIES: [&str; 12] = [
    "Tell me about the claim.",
    "Who filed the appeal?",
    "Summarize the ruling.",
    "What did the witness see?",
    "Which product broke?",
    "Describe the service.",
    "Where was the hearing held?",
    "When was the claim filed?",
    "Write a short review.",
    "List the parties.",
    "What was the price?",
    "Continue the statement:",
];

const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_";

/// A corruption of `key`: one substitution, deletion or insertion, a
/// truncation, or an appended suffix. Never empty, never registered.
fn corrupt<R: Rng>(key: &str, registry: &KeyRegistry, rng: &mut R) -> String {
    loop {
        let mut b = key.as_bytes().to_vec();
        match rng.gen_range(0..5) {
            0 => {
                let i = rng.gen_range(0..b.len());
                b[i] = *ALPHABET.choose(rng).unwrap();
            }
            1 if b.len() > 1 => {
                b.remove(rng.gen_range(0..b.len()));
            }
            2 => {
                let i = rng.gen_range(0..=b.len());
                b.insert(i, *ALPHABET.choose(rng).unwrap());
            }
            3 if b.len() > 1 => b.truncate(rng.gen_range(1..b.len())),
            _ => b.extend_from_slice(b"_CORRUPT"),
        }
        let s = String::from_utf8(b).expect("ASCII");
        if !s.is_empty() && registry.get(&s).is_none() {
            return s;
        }
    }
}

/// A deterministic corruption of `key`, as in the malformed routing samples.
pub fn corrupt_key(key: &str, registry: &KeyRegistry, seed: u64) -> String {
    corrupt(
        key,
        registry,
        &mut seed::rng(seed::derive(seed, "corrupt-key")),
    )
}

/// `n_per_class` prompts of each category. Valid prompts cycle through the
/// registered keys and are labeled with their adapter; malformed, empty and
/// key-less prompts are labeled secure.
pub fn synth_routing_data(
    registry: &KeyRegistry,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<RoutingSample>> {
    if registry.is_empty() {
        return Err(Error::invalid(
            "routing data needs at least one registered key",
        ));
    }
    let keys: Vec<_> = registry.keys().collect();
    let mut rng = seed::rng(seed::derive(seed, "routing"));
    let mut out = Vec::with_capacity(4 * n_per_class);
    for category in RoutingCategory::ALL {
        for i in 0..n_per_class {
            let body = PROMPT_BODIES.choose(&mut rng).unwrap();
            let key = keys[i % keys.len()];
            let (prompt, label, key_id) = match category {
                RoutingCategory::Valid => (
                    format!("{KEY_PREFIX}{}] {body}", key.key_id),
                    key.adapter_index,
                    Some(key.key_id.clone()),
                ),
                RoutingCategory::Malformed => (
                    format!(
                        "{KEY_PREFIX}{}] {body}",
                        corrupt(&key.key_id, registry, &mut rng)
                    ),
                    SECURE_INDEX,
                    None,
                ),
                RoutingCategory::Empty => (format!("{KEY_PREFIX}] {body}"), SECURE_INDEX, None),
                RoutingCategory::NoKey => (body.to_string(), SECURE_INDEX, None),
            };
            out.push(RoutingSample {
                prompt,
                label,
                category,
                key_id,
            });
        }
    }
    Ok(out)
}
