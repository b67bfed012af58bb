//! Dataset loading, run manifests, and atomic file writes shared by the
//! subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use slicevoco_core::data::labels::{read_labels_csv, OrganLabelTriple};
use slicevoco_core::data::rvol::load_volume;
use slicevoco_core::data::VolumeGrid;
use slicevoco_core::rng::fnv1a64;
use slicevoco_core::Error;

type Result<T> = std::result::Result<T, Error>;

/// A directory of RVOL volumes plus an optional labels CSV.
pub struct Dataset {
    pub volumes: Vec<(String, VolumeGrid)>,
    pub labels: Option<Vec<(String, OrganLabelTriple)>>,
    pub digest: String,
}

/// Load every `*.rvol` in `dir` (sorted by file name) and `labels.csv` when
/// present. The digest hashes file names and contents, so manifests can pin
/// exactly what a run consumed.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "rvol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .rvol volumes found in {}", dir.display())));
    }
    let mut digest: u64 = 0xcbf2_9ce4_8422_2325;
    let mut volumes = Vec::with_capacity(paths.len());
    for path in &paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        digest ^= fnv1a64(name.as_bytes()).rotate_left(17) ^ fnv1a64(&bytes);
        let volume = load_volume(path)?;
        volumes.push((volume.patient_id.clone(), volume));
    }
    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let bytes = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        digest ^= fnv1a64(&bytes).rotate_left(29);
        Some(read_labels_csv(&labels_path)?)
    } else {
        None
    };
    let mut seen = std::collections::HashSet::new();
    for (id, _) in &volumes {
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate patient id {id:?} in {}", dir.display())));
        }
    }
    Ok(Dataset { volumes, labels, digest: format!("{digest:016x}") })
}

impl Dataset {
    /// Labels joined to volumes; errors on any volume without a label.
    pub fn labeled(&self) -> Result<Vec<(String, &VolumeGrid, OrganLabelTriple)>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no labels.csv".into()))?;
        let map: BTreeMap<&str, OrganLabelTriple> =
            labels.iter().map(|(id, t)| (id.as_str(), *t)).collect();
        self.volumes
            .iter()
            .map(|(id, v)| {
                map.get(id.as_str())
                    .map(|t| (id.clone(), v, *t))
                    .ok_or_else(|| Error::Data(format!("no label for patient {id:?}")))
            })
            .collect()
    }
}

/// Every run writes one of these next to its outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub single_thread: bool,
    pub deterministic_env: bool,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            single_thread: true,
            deterministic_env: std::env::var("SLICEVOCO_DETERMINISTIC").as_deref() == Ok("1"),
            config,
            inputs: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn input(mut self, name: &str, value: impl Into<String>) -> Self {
        self.inputs.insert(name.to_string(), value.into());
        self
    }

    pub fn note(mut self, text: impl Into<String>) -> Self {
        self.notes.push(text.into());
        self
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        atomic_write(&out_dir.join("manifest.json"), json.as_bytes())
    }
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write via a temp file and rename, so interrupted runs never leave a
/// partial artifact at the destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Exit code policy: 2 config, 3 data/io/format, 4 numerical.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Data(_) => 3,
        Error::NonFinite { .. } => 4,
    }
}
