use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use hmac::{Hmac, Mac};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;
use crate::tinylm::tokenizer::{CharTokenizer, EOT, FIRST_KEY_SLOT, UNKNOWN_KEY};
use crate::tinylm::TinyLM;

/// Magnitude of key embedding entries: `e = KEY_SCALE·(2u − 1)`, `u ~ U[0,1)ᵈ`.
pub const KEY_SCALE: f64 = 0.02;

/// Leading marker of a keyed prompt.
pub const KEY_PREFIX: &str = "[SPECIAL_TOKEN=";

/// One registered access key. `token_id` exists only in the local tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessKey {
    pub key_id: String,
    pub token_id: u32,
    pub adapter_index: usize,
    pub embedding: Vec<f64>,
    /// Hex SHA-256 of registry salt ‖ secret.
    pub secret_hash: String,
}

/// Keyed-hash seeded embedding of a key; a pure function of
/// `(secret, key_id)`.
pub fn key_embedding(secret: &[u8], key_id: &str, dim: usize) -> Vec<f64> {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(key_id.as_bytes());
    let digest = mac.finalize().into_bytes();
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = seed::rng(seed);
    (0..dim)
        .map(|_| KEY_SCALE * (2.0 * rng.gen::<f64>() - 1.0))
        .collect()
}

/// Org-local key registry and the local tokenizer extension it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyRegistry {
    salt: String,
    embed_dim: usize,
    vocab_size: usize,
    /// Embedding of the shared marker for unregistered, malformed or empty keys.
    unknown_embedding: Vec<f64>,
    keys: BTreeMap<String, AccessKey>,
}

fn valid_key_id(key_id: &str) -> bool {
    !key_id.is_empty()
        && key_id
            .bytes()
            .all(|b| b.is_ascii_graphic() && b != b']' && b != b'[')
}

impl KeyRegistry {
    /// An empty registry for `model`. The salt and the unknown-key embedding
    /// are fixed here from `seed`.
    pub fn new(model: &TinyLM, seed: u64) -> Self {
        let d = model.config().embed_dim;
        let mut rng = seed::rng(seed::derive(seed, "registry"));
        let salt: [u8; 16] = rng.gen();
        let unknown_embedding = (0..d)
            .map(|_| KEY_SCALE * (2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        KeyRegistry {
            salt: hex::encode(salt),
            embed_dim: d,
            vocab_size: model.config().vocab_size,
            unknown_embedding,
            keys: BTreeMap::new(),
        }
    }

    fn hash_secret(&self, secret: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(self.salt.as_bytes());
        h.update(secret);
        hex::encode(h.finalize())
    }

    fn free_slot(&self) -> Result<u32> {
        let used: Vec<u32> = self.keys.values().map(|k| k.token_id).collect();
        (FIRST_KEY_SLOT..self.vocab_size as u32)
            .find(|s| !used.contains(s))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no free key slot in a vocabulary of {}",
                    self.vocab_size
                ))
            })
    }

    /// Allocates a local vocabulary slot and a hash-derived embedding.
    pub fn register_key(
        &mut self,
        key_id: &str,
        secret: &[u8],
        adapter_index: usize,
    ) -> Result<&AccessKey> {
        if !valid_key_id(key_id) {
            return Err(Error::invalid(format!(
                "key id {key_id:?} must be non-empty printable ASCII without brackets"
            )));
        }
        if self.keys.contains_key(key_id) {
            return Err(Error::invalid(format!(
                "key {key_id:?} is already registered"
            )));
        }
        if adapter_index == 0 {
            return Err(Error::invalid(
                "adapter index 0 is the secure fallback and cannot be keyed",
            ));
        }
        let key = AccessKey {
            key_id: key_id.to_string(),
            token_id: self.free_slot()?,
            adapter_index,
            embedding: key_embedding(secret, key_id, self.embed_dim),
            secret_hash: self.hash_secret(secret),
        };
        Ok(self.keys.entry(key_id.to_string()).or_insert(key))
    }

    /// Replaces `old_id` by `new_id` with a new secret in the same slot.
    /// Only the registry changes; the router must be retrained afterwards.
    pub fn rotate_key(&mut self, old_id: &str, new_id: &str, secret: &[u8]) -> Result<&AccessKey> {
        let old = self
            .keys
            .get(old_id)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("key {old_id:?} is not registered")))?;
        if old_id != new_id && self.keys.contains_key(new_id) {
            return Err(Error::invalid(format!(
                "key {new_id:?} is already registered"
            )));
        }
        if !valid_key_id(new_id) {
            return Err(Error::invalid(format!("key id {new_id:?} is not valid")));
        }
        self.keys.remove(old_id);
        let key = AccessKey {
            key_id: new_id.to_string(),
            token_id: old.token_id,
            adapter_index: old.adapter_index,
            embedding: key_embedding(secret, new_id, self.embed_dim),
            secret_hash: self.hash_secret(secret),
        };
        Ok(self.keys.entry(new_id.to_string()).or_insert(key))
    }

    pub fn verify_secret(&self, key_id: &str, secret: &[u8]) -> bool {
        self.keys
            .get(key_id)
            .is_some_and(|k| k.secret_hash == self.hash_secret(secret))
    }

    pub fn keys(&self) -> impl Iterator<Item = &AccessKey> {
        self.keys.values()
    }

    pub fn get(&self, key_id: &str) -> Option<&AccessKey> {
        self.keys.get(key_id)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    /// Largest adapter index any key routes to.
    pub fn max_adapter_index(&self) -> usize {
        self.keys
            .values()
            .map(|k| k.adapter_index)
            .max()
            .unwrap_or(0)
    }

    /// Local tokenization: a parsed key becomes one token at position 0
    /// (its slot when registered, the unknown-key marker otherwise); a
    /// prompt without a key starts with end-of-text as usual.
    pub fn encode(&self, tok: &CharTokenizer, prompt: &str) -> Result<Vec<u32>> {
        let (key, clean) = parse_prompt(prompt);
        let first = match key {
            None => EOT,
            Some(k) => self.keys.get(&k).map_or(UNKNOWN_KEY, |a| a.token_id),
        };
        let mut out = vec![first];
        out.extend(tok.encode(&clean)?);
        Ok(out)
    }

    /// The base embedding table with the unknown-key row and every registered
    /// key row replaced. The base model itself is untouched.
    pub fn embedding_table(&self, model: &TinyLM) -> Result<Arc<Tensor>> {
        let base = model.token_embeddings();
        if base.shape() != [self.vocab_size, self.embed_dim] {
            return Err(Error::shape(
                "registry",
                format!("model embeddings {:?}", base.shape()),
            ));
        }
        let mut t = base.clone();
        let d = self.embed_dim;
        let row = UNKNOWN_KEY as usize;
        t.data_mut()[row * d..(row + 1) * d].copy_from_slice(&self.unknown_embedding);
        for k in self.keys.values() {
            let row = k.token_id as usize;
            t.data_mut()[row * d..(row + 1) * d].copy_from_slice(&k.embedding);
        }
        Ok(Arc::new(t))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: KeyRegistry = serde_json::from_str(s)?;
        for k in r.keys.values() {
            if k.embedding.len() != r.embed_dim
                || !(FIRST_KEY_SLOT..r.vocab_size as u32).contains(&k.token_id)
            {
                return Err(Error::Format(format!(
                    "registry entry {:?} is inconsistent",
                    k.key_id
                )));
            }
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Splits a leading `[SPECIAL_TOKEN=…]` off `text`. Returns the enclosed key
/// (possibly empty) and the rest without one following space. An unclosed
/// prefix is returned whole (up to the first whitespace) as the key; it
/// contains `[`, so it can never name a registered key.
pub fn parse_prompt(text: &str) -> (Option<String>, String) {
    let Some(rest) = text.strip_prefix(KEY_PREFIX) else {
        return (None, text.to_string());
    };
    let (key, body) = match rest.find(']') {
        Some(i) if !rest[..i].contains(char::is_whitespace) => (&rest[..i], &rest[i + 1..]),
        _ => match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], &text[i..]),
            None => (text, ""),
        },
    };
    let body = body.strip_prefix(' ').unwrap_or(body);
    (Some(key.to_string()), body.to_string())
}
