//! Run directories: manifest, trace, genotype and optional retrain report.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsenas::data::SynthBlobs;
use sparsenas::search::{RetrainConfig, StopReason};
use sparsenas::{Dataset, Genotype, SearchConfig, SearchTrace};

use crate::UsageError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const RETRAIN_FILE: &str = "retrain.json";

pub fn code_version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("SPARSENAS_GIT_REV"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Directory { path: PathBuf },
    Synthetic(SynthBlobs),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Directory { path } => {
                if !path.is_dir() {
                    bail!(UsageError(format!("dataset directory {} does not exist", path.display())));
                }
                Dataset::load(path).map_err(|e| anyhow::Error::new(e).context(format!("dataset {}", path.display())))
            }
            DatasetSource::Synthetic(gen) => Ok(gen.generate()?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub name: String,
    pub source: DatasetSource,
    /// SHA-256 over metadata, pixels, labels and split indices.
    pub sha256: String,
    pub num_images: usize,
}

impl DatasetInfo {
    pub fn describe(source: DatasetSource, ds: &Dataset) -> Result<Self> {
        Ok(Self {
            name: ds.name().to_string(),
            source,
            sha256: dataset_hash(ds)?,
            num_images: ds.len(),
        })
    }
}

pub fn dataset_hash(ds: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&ds.meta())?);
    h.update(ds.images());
    for &l in ds.labels() {
        h.update(l.to_le_bytes());
    }
    for split in sparsenas::Split::ALL {
        h.update((ds.split(split).len() as u64).to_le_bytes());
        for &i in ds.split(split) {
            h.update((i as u64).to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub trace: String,
    pub genotype: String,
    pub retrain: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub seed: u64,
    pub config: SearchConfig,
    pub dataset: DatasetInfo,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: String,
    /// Monotonic wall time of the search loop, excluding data loading.
    pub search_time_s: f64,
    pub stop_reason: StopReason,
    pub stop_epoch: usize,
    pub epochs_recorded: usize,
    pub genotype: String,
    /// Settings of the retraining stored with the run, if any.
    pub retrain: Option<RetrainConfig>,
    pub outputs: Outputs,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("manifest {}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            bail!(UsageError(format!(
                "manifest {}: schema version {} (expected {MANIFEST_SCHEMA_VERSION})",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    /// Checks that the run directory holds everything the manifest names and
    /// that the files agree with it.
    pub fn validate_dir(dir: &Path) -> Result<Self> {
        let m = Self::read(&dir.join(MANIFEST_FILE))?;
        let genotype_text = fs::read_to_string(dir.join(&m.outputs.genotype)).context("reading genotype")?;
        let genotype: Genotype = genotype_text.trim().parse()?;
        if genotype.to_string() != m.genotype {
            bail!("genotype file disagrees with manifest");
        }
        let trace = read_trace(&dir.join(&m.outputs.trace))?;
        if trace.len() != m.epochs_recorded || trace.stop_reason() != Some(m.stop_reason) {
            bail!("trace disagrees with manifest");
        }
        if let Some(r) = &m.outputs.retrain {
            if !dir.join(r).is_file() {
                bail!("retrain report {r} is missing");
            }
        }
        Ok(m)
    }
}

pub fn read_trace(path: &Path) -> Result<SearchTrace> {
    let file = fs::File::open(path).map_err(|e| UsageError(format!("cannot open trace {}: {e}", path.display())))?;
    SearchTrace::read_jsonl(std::io::BufReader::new(file)).with_context(|| format!("trace {}", path.display()))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
