//! On-disk layout of a run and its content-hash manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
/// Wall-clock timings; kept out of the manifest so hashes stay reproducible.
pub const TIMINGS: &str = "timings.json";
/// Written when a stage fails.
pub const FAILURE: &str = "failure.json";

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.path("config.toml")
    }

    pub fn dictionary(&self) -> PathBuf {
        self.path("corpus/dictionary.json")
    }

    pub fn clients(&self) -> PathBuf {
        self.path("corpus/clients.jsonl")
    }

    pub fn public_corpus(&self) -> PathBuf {
        self.path("corpus/public.jsonl")
    }

    pub fn base(&self) -> PathBuf {
        self.path("checkpoints/base.ckpt")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.path("checkpoints/pretrain.json")
    }

    pub fn global_init(&self) -> PathBuf {
        self.path("init/global.sgad")
    }

    pub fn secure_init(&self, client: usize) -> PathBuf {
        self.path(&format!("init/c{client}/secure.sgad"))
    }

    pub fn revealing(&self, client: usize, j: usize) -> PathBuf {
        self.path(&format!("init/c{client}/revealing-{j}.sgad"))
    }

    pub fn init_log(&self) -> PathBuf {
        self.path("init/reports.json")
    }

    pub fn rounds_log(&self) -> PathBuf {
        self.path("federate/rounds.jsonl")
    }

    pub fn global(&self) -> PathBuf {
        self.path("federate/global.sgad")
    }

    pub fn secure(&self, client: usize) -> PathBuf {
        self.path(&format!("federate/c{client}/secure.sgad"))
    }

    /// One message as it crossed the simulated network; `from` is `None`
    /// for the server broadcast.
    pub fn wire(&self, round: usize, from: Option<usize>) -> PathBuf {
        match from {
            Some(c) => self.path(&format!("federate/wire/r{round:02}-c{c}.msg")),
            None => self.path(&format!("federate/wire/r{round:02}-server.msg")),
        }
    }

    pub fn wire_dir(&self) -> PathBuf {
        self.path("federate/wire")
    }

    pub fn federate_summary(&self) -> PathBuf {
        self.path("federate/summary.json")
    }

    pub fn fused_secure(&self, client: usize) -> PathBuf {
        self.path(&format!("fusion/c{client}/secure.sgad"))
    }

    pub fn fused_revealing(&self, client: usize) -> PathBuf {
        self.path(&format!("fusion/c{client}/revealing.sgad"))
    }

    pub fn fusion_log(&self) -> PathBuf {
        self.path("fusion/reports.json")
    }

    pub fn router(&self, client: usize) -> PathBuf {
        self.path(&format!("gating/c{client}/router.json"))
    }

    pub fn gating_log(&self) -> PathBuf {
        self.path("gating/reports.json")
    }

    pub fn attack_reports(&self) -> PathBuf {
        self.path("attacks/reports.json")
    }

    pub fn standalone(&self) -> PathBuf {
        self.path("attacks/standalone.json")
    }

    pub fn flops(&self) -> PathBuf {
        self.path("attacks/flops.json")
    }

    pub fn table_csv(&self) -> PathBuf {
        self.path("tables/summary.csv")
    }

    pub fn table_json(&self) -> PathBuf {
        self.path("tables/summary.json")
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Appends one JSON line and flushes, so partial logs survive a failure.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl Manifest {
    /// Hashes every file under the output directory except the manifest,
    /// timings and failure record, sorted by path.
    pub fn build(layout: &Layout) -> Result<Manifest> {
        let mut files = Vec::new();
        collect(layout.root(), &mut files)?;
        let mut entries = Vec::with_capacity(files.len());
        for f in files {
            let rel = f
                .strip_prefix(layout.root())
                .expect("collected under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if [MANIFEST, TIMINGS, FAILURE].contains(&rel.as_str()) {
                continue;
            }
            entries.push(ManifestEntry {
                bytes: fs::metadata(&f)?.len(),
                sha256: sha256_file(&f)?,
                path: rel,
            });
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Manifest { entries })
    }

    pub fn write(&self, layout: &Layout) -> Result<()> {
        write_json(&layout.path(MANIFEST), self)
    }

    pub fn read(layout: &Layout) -> Result<Manifest> {
        read_json(&layout.path(MANIFEST))
    }

    /// Paths whose current content no longer matches the recorded hash, and
    /// recorded paths that are gone.
    pub fn verify(&self, layout: &Layout) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in &self.entries {
            let p = layout.path(&e.path);
            if !p.exists() || sha256_file(&p)? != e.sha256 {
                bad.push(e.path.clone());
            }
        }
        Ok(bad)
    }
}
