//! `SGLM` checkpoints. Layout (little-endian): magic, version u16, the six
//! config fields as u32, tensor count u32, then per tensor its name and
//! f32 data.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::config::ModelConfig;
use super::model::TinyLM;
use crate::binio::{Reader, Writer};
use crate::error::Result;

const MAGIC: [u8; 4] = *b"SGLM";
const VERSION: u16 = 1;

pub fn encode_checkpoint(model: &TinyLM) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u16(VERSION);
    let c = model.config();
    for v in [
        c.vocab_size,
        c.embed_dim,
        c.n_layers,
        c.context_len,
        c.n_heads,
        c.ffn_dim,
    ] {
        w.u32(v as u32);
    }
    w.u32(model.weights().len() as u32);
    for (name, t) in model.weights() {
        w.str(name);
        w.tensor(t);
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TinyLM> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let mut f = [0usize; 6];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: f[0],
        embed_dim: f[1],
        n_layers: f[2],
        context_len: f[3],
        n_heads: f[4],
        ffn_dim: f[5],
    };
    let n = r.u32()? as usize;
    let mut weights = BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        weights.insert(name, Arc::new(r.tensor()?));
    }
    r.finish()?;
    TinyLM::from_weights(config, weights)
}

pub fn save_checkpoint(model: &TinyLM, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TinyLM> {
    decode_checkpoint(&std::fs::read(path)?)
}
