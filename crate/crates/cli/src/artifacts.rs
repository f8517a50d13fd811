//! On-disk artifacts: policy checkpoints, manifests and hashed output files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bspo_core::policy::StochasticPolicy;
use bspo_core::seq_mdp::TabularMdp;

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Final logits of one run plus enough context to refuse a mismatched MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub scenario: String,
    pub config_sha256: String,
    pub variant: String,
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub logits: Vec<f64>,
}

impl Checkpoint {
    pub fn from_policy(
        scenario: &str,
        config_sha256: &str,
        variant: &str,
        seed: u64,
        pi: &StochasticPolicy,
    ) -> CliResult<Self> {
        let logits = pi
            .logits()
            .ok_or_else(|| CliError::Failure("run produced a table policy without logits".into()))?;
        Ok(Self {
            scenario: scenario.to_string(),
            config_sha256: config_sha256.to_string(),
            variant: variant.to_string(),
            seed,
            n_states: pi.n_states(),
            n_actions: pi.n_actions(),
            logits: logits.to_vec(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("checkpoint {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("checkpoint {}: {e}", path.display())))
    }

    pub fn policy(&self, tab: &TabularMdp) -> CliResult<StochasticPolicy> {
        if self.n_states != tab.n_states() || self.n_actions != tab.n_actions() {
            return Err(CliError::Input(format!(
                "checkpoint has {} x {} logits, scenario has {} states and {} actions",
                self.n_states,
                self.n_actions,
                tab.n_states(),
                tab.n_actions()
            )));
        }
        Ok(StochasticPolicy::from_logits(self.n_actions, self.logits.clone())?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to regenerate an output directory: the command line,
/// the hash of the scenario bytes and the tool versions. No timestamps, so
/// reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub scenario: String,
    pub scenario_path: String,
    pub config_sha256: String,
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub versions: Versions,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub bspo_lab: String,
    pub bspo_core: String,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            bspo_lab: env!("CARGO_PKG_VERSION").to_string(),
            bspo_core: bspo_core::VERSION.to_string(),
        }
    }
}

/// Writes files under one directory and remembers their hashes.
pub struct OutDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::Input(format!("output directory {}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    pub fn finish(mut self, mut manifest: Manifest) -> CliResult<()> {
        manifest.files = std::mem::take(&mut self.files);
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        fs::write(self.root.join("manifest.json"), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn checkpoint_logits_round_trip_bitwise() {
        let logits = vec![0.1, -1.0 / 3.0, 1e-300, 123456.789, f64::MIN_POSITIVE, -0.0];
        let pi = StochasticPolicy::from_logits(3, logits.clone()).unwrap();
        let ckpt = Checkpoint::from_policy("s", "h", "bspo", 9, &pi).unwrap();
        let back: Checkpoint = serde_json::from_str(&ckpt.to_json()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.logits), bits(&logits));
        assert_eq!(back.n_states, 2);
    }

    #[test]
    fn table_policy_has_no_checkpoint() {
        let pi = StochasticPolicy::uniform(2, 2);
        assert!(Checkpoint::from_policy("s", "h", "bspo", 0, &pi).is_err());
    }
}
