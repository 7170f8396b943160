use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Everything needed to repeat a run: the resolved configuration (also
/// written as `config-<command>.txt`), its hash, the seed and the tool versions. No
/// timestamps, so identical runs write identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub args: Vec<String>,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub versions: Versions,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub wearseg: &'static str,
    pub wearseg_cli: &'static str,
    pub checkpoint_format: u32,
    pub target: String,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            wearseg: wearseg::VERSION,
            wearseg_cli: env!("CARGO_PKG_VERSION"),
            checkpoint_format: wearseg::unet::FORMAT_VERSION,
            target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        }
    }
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes `config-<command>.txt` and `manifest-<command>.json` into `out_dir`.
pub fn write(
    out_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    threads: Option<usize>,
    outputs: Vec<PathBuf>,
) -> CliResult<PathBuf> {
    let text = cfg.to_text();
    let config_path = out_dir.join(format!("config-{command}.txt"));
    std::fs::write(&config_path, &text).map_err(|e| CliError::io(&config_path, e))?;
    let manifest = RunManifest {
        command,
        args: std::env::args().skip(1).collect(),
        config_sha256: config_hash(&text),
        seed: cfg.run.seed,
        threads,
        versions: Versions::current(),
        outputs,
    };
    let path = out_dir.join(format!("manifest-{command}.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
