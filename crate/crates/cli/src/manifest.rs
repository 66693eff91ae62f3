//! Run manifests: what was run, on which inputs, and what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Wall-clock measurements; excluded from output hashes.
pub const TIMINGS: &str = "timings.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// subcommand arguments as parsed
    pub args: serde_json::Value,
    /// the configuration after file, seed and flag overrides
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    /// rayon threads used; outputs must not depend on it
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub volatile: Vec<String>,
    pub desk_overrides: Vec<String>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn rel(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Hashes of every file under `dir` except the manifest and `skip`.
pub fn hash_outputs(dir: &Path, skip: &[String]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    files_under(dir, &mut files)?;
    let mut out = BTreeMap::new();
    for p in files {
        let name = rel(dir, &p);
        if name == MANIFEST || skip.contains(&name) {
            continue;
        }
        out.insert(name, sha256_file(&p)?);
    }
    Ok(out)
}

/// Hashes of an input: every file of a directory, or a file together with
/// its `<file>.*` sidecars.
pub fn hash_input(label: &str, path: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        for p in files {
            out.insert(format!("{label}/{}", rel(path, &p)), sha256_file(&p)?);
        }
        return Ok(());
    }
    out.insert(label.to_string(), sha256_file(path)?);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let prefix = format!("{name}.");
    let mut side: Vec<PathBuf> = fs::read_dir(parent)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(&prefix)))
        .collect();
    side.sort();
    for p in side {
        let suffix = &p.file_name().unwrap().to_string_lossy()[name.len()..];
        out.insert(format!("{label}{suffix}"), sha256_file(&p)?);
    }
    Ok(())
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Names whose hashes differ between two output maps, including files
/// present in only one of them.
pub fn diff(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}
