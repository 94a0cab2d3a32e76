//! The parametric corpus on disk, plus storage and compute cost accounting.
//!
//! Layout: `root/manifest.json` (object keyed by doc id hex),
//! `root/adapters/<doc id hex>.pra`, and the augmented training sets used by
//! the data-augmented in-context mode in `root/datasets/<doc id hex>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{deserialize, serialize, AdapterConfig, AdapterError, LowRankAdapter};
use crate::augment::AugmentedDataset;
use crate::retriever::id_hex;

pub const MANIFEST: &str = "manifest.json";
pub const ADAPTER_DIR: &str = "adapters";
pub const ADAPTER_EXT: &str = "pra";
pub const DATASET_DIR: &str = "datasets";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("adapter for doc {doc_id:016x} already stored (use overwrite)")]
    DuplicateEntry { doc_id: u64 },
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error("corrupt adapter file {path}: {source}")]
    Corrupt { path: PathBuf, source: AdapterError },
    #[error("manifest is not valid JSON: {0}")]
    BadManifest(String),
    #[error("manifest entry {doc_id} points at a missing file {path}")]
    MissingFile { doc_id: String, path: PathBuf },
    #[error("dataset file {path} is not valid JSON: {message}")]
    BadDataset { path: PathBuf, message: String },
    #[error("manifest says doc {doc_id:016x} was trained against {expected:016x}, file says {found:016x}")]
    FingerprintMismatch { doc_id: u64, expected: u64, found: u64 },
}

impl StoreError {
    /// True for checksum failures of a stored file.
    pub fn is_checksum_mismatch(&self) -> bool {
        matches!(self, StoreError::Corrupt { source: AdapterError::ChecksumMismatch { .. }, .. })
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::IoFailure { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the corpus root.
    pub adapter_path: String,
    pub bytes: u64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub model_fingerprint: String,
    pub config: AdapterConfig,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

/// Adapters found by [`ParametricCorpus::get_many`], plus the ids it could not find.
#[derive(Debug, Default)]
pub struct Fetched {
    pub adapters: Vec<LowRankAdapter>,
    pub missing: Vec<u64>,
}

/// Write-through store. `put` holds an internal lock, so one instance can be
/// shared between threads; separate instances on the same root must not write
/// concurrently.
#[derive(Debug)]
pub struct ParametricCorpus {
    root: PathBuf,
    manifest: Mutex<Manifest>,
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, bytes, |_| Ok(()))
}

/// Like [`write_atomic`], with a hook that runs after the temp file is
/// complete and before the rename. An error from the hook aborts the write
/// and removes the temp file, which lets tests simulate a crash at that point.
pub fn write_atomic_with(path: &Path, bytes: &[u8], before_rename: impl FnOnce(&Path) -> io::Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        before_rename(&tmp)?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

impl ParametricCorpus {
    /// Opens `root`, creating it (and an empty manifest) if needed. Every
    /// manifest entry is read back and checksummed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let store = Self::open_unverified(root)?;
        for (key, entry) in store.manifest() {
            let path = store.root.join(&entry.adapter_path);
            if !path.exists() {
                return Err(StoreError::MissingFile { doc_id: key, path });
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            deserialize(&bytes).map_err(|source| StoreError::Corrupt { path, source })?;
        }
        Ok(store)
    }

    /// Opens without reading the adapter files.
    pub fn open_unverified(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in [ADAPTER_DIR, DATASET_DIR] {
            let dir = root.join(dir);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let path = root.join(MANIFEST);
        let manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::BadManifest(e.to_string()))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Manifest::new(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        Ok(ParametricCorpus { root, manifest: Mutex::new(manifest) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().expect("manifest lock").clone()
    }

    pub fn len(&self) -> usize {
        self.manifest.lock().expect("manifest lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn adapter_path(&self, doc_id: u64) -> PathBuf {
        self.root.join(ADAPTER_DIR).join(format!("{}.{ADAPTER_EXT}", id_hex(doc_id)))
    }

    /// Whether an adapter for `doc_id` trained against `fingerprint` is stored.
    pub fn contains(&self, doc_id: u64, fingerprint: u64) -> bool {
        self.manifest.lock().expect("manifest lock").get(&id_hex(doc_id)).is_some_and(|e| e.model_fingerprint == id_hex(fingerprint))
    }

    pub fn put(&self, adapter: &LowRankAdapter, overwrite: bool) -> Result<ManifestEntry> {
        self.put_with(adapter, overwrite, |_| Ok(()))
    }

    /// [`ParametricCorpus::put`] with a fault hook between the adapter's temp
    /// write and its rename.
    pub fn put_with(&self, adapter: &LowRankAdapter, overwrite: bool, hook: impl FnOnce(&Path) -> io::Result<()>) -> Result<ManifestEntry> {
        let key = id_hex(adapter.doc_id);
        let mut manifest = self.manifest.lock().expect("manifest lock");
        if !overwrite && manifest.contains_key(&key) {
            return Err(StoreError::DuplicateEntry { doc_id: adapter.doc_id });
        }
        let bytes = serialize(adapter);
        let path = self.adapter_path(adapter.doc_id);
        write_atomic_with(&path, &bytes, hook)?;
        let entry = ManifestEntry {
            adapter_path: format!("{ADAPTER_DIR}/{key}.{ADAPTER_EXT}"),
            bytes: bytes.len() as u64,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            model_fingerprint: id_hex(adapter.model_fingerprint),
            config: adapter.config,
        };
        let mut next = manifest.clone();
        next.insert(key, entry.clone());
        let json = serde_json::to_vec_pretty(&next).expect("manifest serializes");
        write_atomic(&self.root.join(MANIFEST), &json)?;
        *manifest = next;
        Ok(entry)
    }

    /// Loads one adapter; `Ok(None)` when the manifest has no entry.
    pub fn get(&self, doc_id: u64) -> Result<Option<LowRankAdapter>> {
        let entry = match self.manifest.lock().expect("manifest lock").get(&id_hex(doc_id)) {
            Some(e) => e.clone(),
            None => return Ok(None),
        };
        let path = self.root.join(&entry.adapter_path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let adapter = deserialize(&bytes).map_err(|source| StoreError::Corrupt { path: path.clone(), source })?;
        if id_hex(adapter.model_fingerprint) != entry.model_fingerprint {
            let expected = u64::from_str_radix(&entry.model_fingerprint, 16).unwrap_or(0);
            return Err(StoreError::FingerprintMismatch { doc_id, expected, found: adapter.model_fingerprint });
        }
        Ok(Some(adapter))
    }

    /// Adapters for the known ids in the given order; unknown ids are listed
    /// in `missing`. Corrupt files are errors.
    pub fn get_many(&self, doc_ids: &[u64]) -> Result<Fetched> {
        let mut out = Fetched::default();
        for &id in doc_ids {
            match self.get(id)? {
                Some(a) => out.adapters.push(a),
                None => out.missing.push(id),
            }
        }
        Ok(out)
    }
}

impl ParametricCorpus {
    pub fn dataset_path(&self, doc_id: u64) -> PathBuf {
        self.root.join(DATASET_DIR).join(format!("{}.json", id_hex(doc_id)))
    }

    pub fn put_dataset(&self, dataset: &AugmentedDataset) -> Result<()> {
        let json = serde_json::to_vec_pretty(dataset).expect("dataset serializes");
        write_atomic(&self.dataset_path(dataset.doc_id), &json)
    }

    pub fn get_dataset(&self, doc_id: u64) -> Result<Option<AugmentedDataset>> {
        let path = self.dataset_path(doc_id);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::BadDataset { path, message: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

// ---- cost accounting ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageEstimate {
    pub params: u64,
    pub bytes: u64,
}

/// `2 n r (h + l)` adapter parameters and their size.
pub fn storage_estimate(n_layers: u64, hidden: u64, ffn: u64, rank: u64, bytes_per_param: u64) -> StorageEstimate {
    let params = 2 * n_layers * rank * (hidden + ffn);
    StorageEstimate { params, bytes: params * bytes_per_param }
}

/// Offline cost of one document in decoded-token equivalents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeCost {
    /// Generating the rewrites and QA pairs.
    pub augment_decode: u64,
    /// Reading the document for augmentation.
    pub augment_forward: u64,
    pub train_forward: u64,
    pub train_backward: u64,
    pub total: u64,
}

impl ComputeCost {
    pub fn augmentation(&self) -> u64 {
        self.augment_decode + self.augment_forward
    }

    pub fn training(&self) -> u64 {
        self.train_forward + self.train_backward
    }
}

pub fn compute_cost_estimate(doc_tokens: u64) -> ComputeCost {
    let d = doc_tokens;
    let (augment_decode, augment_forward, train_forward, train_backward) = (2 * d, d, 3 * d, 6 * d);
    ComputeCost { augment_decode, augment_forward, train_forward, train_backward, total: augment_decode + augment_forward + train_forward + train_backward }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineSaving {
    pub in_context_input: u64,
    pub parametric_input: u64,
    pub saved: u64,
}

/// Input tokens of in-context injection (`t` documents) versus parametric injection.
pub fn online_saving_estimate(q_tokens: u64, d_tokens: u64, t: u64) -> OnlineSaving {
    let in_context_input = t * d_tokens + q_tokens;
    let parametric_input = q_tokens;
    OnlineSaving { in_context_input, parametric_input, saved: in_context_input - parametric_input }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn adapter(doc: u64) -> LowRankAdapter {
        let m = ModelParams::init(ModelConfig::tiny(), 1).unwrap();
        let mut a = LowRankAdapter::new_random(AdapterConfig::default(), &m, doc, doc).unwrap();
        a.matrices[0].b[0] = 0.25;
        a
    }

    #[test]
    fn put_then_get_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParametricCorpus::open(dir.path()).unwrap();
        let a = adapter(0xabc);
        let entry = store.put(&a, false).unwrap();
        assert_eq!(entry.adapter_path, "adapters/0000000000000abc.pra");
        assert_eq!(store.get(0xabc).unwrap().unwrap(), a);
        assert!(store.contains(0xabc, a.model_fingerprint));
        assert!(!store.contains(0xabc, 1));
        let reopened = ParametricCorpus::open(dir.path()).unwrap();
        assert_eq!(reopened.manifest(), store.manifest());
        assert_eq!(serialize(&reopened.get(0xabc).unwrap().unwrap()), serialize(&a));
    }

    #[test]
    fn duplicates_need_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParametricCorpus::open(dir.path()).unwrap();
        store.put(&adapter(1), false).unwrap();
        assert!(matches!(store.put(&adapter(1), false), Err(StoreError::DuplicateEntry { doc_id: 1 })));
        let mut changed = adapter(1);
        changed.matrices[0].b[0] = -1.0;
        store.put(&changed, true).unwrap();
        assert_eq!(store.get(1).unwrap().unwrap(), changed);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn get_many_reports_missing_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParametricCorpus::open(dir.path()).unwrap();
        for id in [3, 1, 2] {
            store.put(&adapter(id), false).unwrap();
        }
        assert!(store.get_many(&[]).unwrap().adapters.is_empty());
        let got = store.get_many(&[2, 3, 1]).unwrap();
        assert_eq!(got.adapters.iter().map(|a| a.doc_id).collect::<Vec<_>>(), vec![2, 3, 1]);
        let partial = store.get_many(&[1, 99, 2]).unwrap();
        assert_eq!(partial.adapters.len(), 2);
        assert_eq!(partial.missing, vec![99]);
    }

    #[test]
    fn corrupt_file_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParametricCorpus::open(dir.path()).unwrap();
        store.put(&adapter(5), false).unwrap();
        let path = store.adapter_path(5);
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        fs::write(&path, bytes).unwrap();
        let err = store.get_many(&[5]).unwrap_err();
        assert!(err.is_checksum_mismatch(), "{err}");
    }

    #[test]
    fn crash_before_rename_leaves_no_trace() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParametricCorpus::open(dir.path()).unwrap();
        store.put(&adapter(1), false).unwrap();
        let manifest_before = fs::read(dir.path().join(MANIFEST)).unwrap();
        let err = store.put_with(&adapter(2), false, |tmp| {
            assert!(tmp.exists());
            Err(io::Error::other("simulated crash"))
        });
        assert!(matches!(err, Err(StoreError::IoFailure { .. })));
        assert_eq!(fs::read(dir.path().join(MANIFEST)).unwrap(), manifest_before);
        assert!(!store.adapter_path(2).exists());
        let names: Vec<String> = fs::read_dir(dir.path().join(ADAPTER_DIR)).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        assert_eq!(names, vec!["0000000000000001.pra".to_string()]);
        assert_eq!(ParametricCorpus::open(dir.path()).unwrap().len(), 1);
        assert!(store.get(2).unwrap().is_none());
    }

    #[test]
    fn open_checks_every_entry() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParametricCorpus::open(dir.path()).unwrap();
        store.put(&adapter(7), false).unwrap();
        let path = store.adapter_path(7);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(ParametricCorpus::open(dir.path()).unwrap_err().is_checksum_mismatch());
        fs::remove_file(&path).unwrap();
        assert!(matches!(ParametricCorpus::open(dir.path()), Err(StoreError::MissingFile { .. })));
        assert!(ParametricCorpus::open_unverified(dir.path()).is_ok());
    }

    #[test]
    fn datasets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParametricCorpus::open(dir.path()).unwrap();
        assert!(store.get_dataset(3).unwrap().is_none());
        let ds = AugmentedDataset { doc_id: 3, rewrites: vec!["a".into(), "b".into()], qa_pairs: vec![crate::augment::QaPair::new("q?", "x")] };
        store.put_dataset(&ds).unwrap();
        assert_eq!(store.get_dataset(3).unwrap(), Some(ds));
    }

    #[test]
    fn storage_formula() {
        let s = storage_estimate(32, 4096, 14336, 2, 2);
        assert_eq!(s, StorageEstimate { params: 2_359_296, bytes: 4_718_592 });
        assert_eq!(storage_estimate(32, 4096, 14336, 0, 2), StorageEstimate { params: 0, bytes: 0 });
        assert_eq!(storage_estimate(4, 128, 512, 2, 4), StorageEstimate { params: 10_240, bytes: 40_960 });
    }

    #[test]
    fn compute_breakdown() {
        let c = compute_cost_estimate(100);
        assert_eq!(c.total, 1200);
        assert_eq!((c.augmentation(), c.training()), (300, 900));
        assert_eq!(compute_cost_estimate(0).total, 0);
    }

    #[test]
    fn online_saving() {
        assert_eq!(online_saving_estimate(50, 50, 6).saved, 300);
        assert_eq!(online_saving_estimate(50, 50, 0).saved, 0);
    }
}
