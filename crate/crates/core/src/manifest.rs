//! Run manifests: what was run, with which config and seed, on which inputs,
//! producing which outputs. Enough to replay a run and check it bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sha256_file, sha256_hex, write_atomic};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT: &str = "dropclass-run/1";

/// A file or directory and its content hash. Directories hash the sorted
/// list of `relative path, file hash` lines of every file below them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedPath {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Subcommand options other than the config, as given (paths absolute).
    pub args: BTreeMap<String, String>,
    /// The resolved config, as flat TOML text.
    pub config: String,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<HashedPath>,
    /// Paths relative to the output directory.
    pub outputs: Vec<HashedPath>,
}

impl Manifest {
    pub fn new(
        command: &str,
        args: BTreeMap<String, String>,
        config: String,
        seed: u64,
        threads: usize,
    ) -> Self {
        Manifest {
            format: FORMAT.into(),
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            config,
            seed,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let abs = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        let sha256 = hash_path(&abs)?;
        self.inputs.push(HashedPath { path: abs, sha256 });
        Ok(())
    }

    /// Hashes `rel` under `out_dir` and records it as an output.
    pub fn add_output(&mut self, out_dir: &Path, rel: &Path) -> Result<()> {
        let sha256 = hash_path(&out_dir.join(rel))?;
        self.outputs.push(HashedPath {
            path: rel.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Writes `<out_dir>/manifest.json`.
    pub fn save(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format != FORMAT {
            return Err(Error::format(
                path,
                format!("unsupported manifest format {:?}", m.format),
            ));
        }
        Ok(m)
    }

    /// Every input still exists with its recorded hash.
    pub fn verify_inputs(&self) -> Result<()> {
        for h in &self.inputs {
            check(&h.path, &h.sha256)?;
        }
        Ok(())
    }

    /// Every recorded output under `out_dir` has its recorded hash.
    pub fn verify_outputs(&self, out_dir: &Path) -> Result<()> {
        for h in &self.outputs {
            check(&out_dir.join(&h.path), &h.sha256)?;
        }
        Ok(())
    }
}

fn check(path: &Path, expected: &str) -> Result<()> {
    let actual = if path.exists() {
        hash_path(path)?
    } else {
        "missing".to_string()
    };
    if actual != expected {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(())
}

pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if !meta.is_dir() {
        return sha256_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for rel in files {
        let h = sha256_file(&path.join(&rel))?;
        listing.push_str(&format!("{}\t{h}\n", rel.to_string_lossy()));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(
                p.strip_prefix(root)
                    .expect("entry below root")
                    .to_path_buf(),
            );
        }
    }
    Ok(())
}
