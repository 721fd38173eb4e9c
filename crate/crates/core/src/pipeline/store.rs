//! Content-addressed artifact store. Objects live under `objects/` named by
//! the SHA-256 of their bytes; `tasks/` maps a task key (hash of the task's
//! inputs) to the objects it produced, which is what makes resuming work.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::RctDataset;
use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a dataset's values, masks and metadata.
pub fn dataset_digest(data: &RctDataset) -> String {
    let mut h = Sha256::new();
    let (s, t, m) = data.values().dim();
    for d in [s, t, m] {
        h.update((d as u64).to_le_bytes());
    }
    for v in data.values() {
        h.update(v.to_bits().to_le_bytes());
    }
    for &c in data.observed().collected() {
        h.update([u8::from(c)]);
    }
    for &p in data.protocol().eligible() {
        h.update([u8::from(p)]);
    }
    h.update(serde_json::to_vec(data.metrics()).expect("metric specs serialize"));
    h.update(serde_json::to_vec(data.subject_ids()).expect("ids serialize"));
    h.update(serde_json::to_vec(&data.normalization()).expect("normalization serializes"));
    hex::encode(h.finalize())
}

/// Key for a task: hash of the canonical JSON of its inputs.
pub fn task_key<T: Serialize>(inputs: &T) -> String {
    sha256_hex(&serde_json::to_vec(inputs).expect("task inputs serialize"))
}

#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("objects"))?;
        fs::create_dir_all(root.join("tasks"))?;
        Ok(ArtifactStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, id: &str) -> PathBuf {
        self.root.join("objects").join(id)
    }

    /// Write-once, atomic via rename.
    fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let id = sha256_hex(bytes);
        let path = self.object_path(&id);
        if !path.exists() {
            Self::write_atomic(&path, bytes)?;
        }
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<Vec<u8>> {
        if id.len() != 64 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::data(format!("malformed artifact id {id:?}")));
        }
        let bytes = fs::read(self.object_path(id))?;
        if sha256_hex(&bytes) != id {
            return Err(Error::data(format!("artifact {id} is corrupt")));
        }
        Ok(bytes)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.object_path(id).exists()
    }

    pub fn put_json<T: Serialize>(&self, value: &T) -> Result<String> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put(&bytes)
    }

    pub fn get_json<T: DeserializeOwned>(&self, id: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.get(id)?)?)
    }

    pub fn record_task<T: Serialize>(&self, key: &str, record: &T) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(record)?;
        Self::write_atomic(&self.root.join("tasks").join(format!("{key}.json")), &bytes)
    }

    /// A finished task's record, if it and every object it names exist.
    pub fn lookup_task<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let bytes = fs::read(self.root.join("tasks").join(format!("{key}.json"))).ok()?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).ok()?;
        let complete = value
            .as_object()?
            .values()
            .filter_map(|v| v.as_str())
            .filter(|s| s.len() == 64)
            .all(|id| self.contains(id));
        if !complete {
            return None;
        }
        serde_json::from_value(value).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        object: String,
        n: u32,
    }

    #[test]
    fn put_get_and_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let id = store.put(b"hello").unwrap();
        assert_eq!(id, sha256_hex(b"hello"));
        assert_eq!(store.put(b"hello").unwrap(), id);
        assert_eq!(store.get(&id).unwrap(), b"hello");
        assert!(store.get("../x").is_err());
        let rec = Rec { object: id.clone(), n: 3 };
        store.record_task("k", &rec).unwrap();
        assert_eq!(store.lookup_task::<Rec>("k"), Some(rec));
        fs::remove_file(dir.path().join("objects").join(&id)).unwrap();
        assert_eq!(store.lookup_task::<Rec>("k"), None);
        assert_eq!(store.lookup_task::<Rec>("missing"), None);
    }
}
