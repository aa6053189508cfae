//! Versioned checkpoint container: JSON manifest (names, shapes, dtype)
//! followed by raw little-endian tensor blobs. Byte-stable for identical
//! contents: the manifest is an ordered map and blobs follow name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CFCKPT\x00\x01";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, ManifestEntry>,
}

/// In-memory checkpoint: string metadata plus named tensors.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Decode(format!("checkpoint missing tensor '{name}'")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Decode(format!("checkpoint missing meta '{key}'")))
    }

    /// Store every parameter under `prefix.name`.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) {
        for p in store.iter() {
            self.insert(format!("{prefix}.{}", p.name), p.value.clone());
        }
    }

    /// Restore parameters previously stored with [`Self::put_params`].
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}.{}", store.get(id).name);
            let t = self.get(&name)?;
            let dst = &mut store.get_mut(id).value;
            if dst.shape != t.shape {
                return Err(Error::dim(format!(
                    "checkpoint tensor '{name}' shape {:?} != expected {:?}",
                    t.shape, dst.shape
                )));
            }
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.data.len() * 8) as u64;
            tensors.insert(
                name.clone(),
                ManifestEntry { shape: t.shape.clone(), dtype: "f64".into(), offset, len },
            );
            offset += len;
        }
        let manifest = Manifest { meta: self.meta.clone(), tensors };
        let manifest_bytes =
            serde_json::to_vec(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        let mut f = File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        for t in self.tensors.values() {
            let mut buf = Vec::with_capacity(t.data.len() * 8);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Decode(format!("{}: not a checkpoint file", path.display())));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)?;
        let mlen = u64::from_le_bytes(len_bytes) as usize;
        let mut mbytes = vec![0u8; mlen];
        f.read_exact(&mut mbytes)?;
        let manifest: Manifest =
            serde_json::from_slice(&mbytes).map_err(|e| Error::Parse(e.to_string()))?;
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;
        let mut tensors = BTreeMap::new();
        for (name, e) in manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::Decode(format!("unsupported dtype {}", e.dtype)));
            }
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if end > blob.len() {
                return Err(Error::Decode(format!("tensor '{name}' blob out of range")));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(e.shape, data)?);
        }
        Ok(Checkpoint { meta: manifest.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = std::env::temp_dir().join("cf_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        let mut ck = Checkpoint::new();
        ck.set_meta("step", "123");
        ck.insert("w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        ck.insert("b", Tensor::from_vec(vec![0.125]));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta("step").unwrap(), "123");
        assert_eq!(back.get("w").unwrap(), ck.get("w").unwrap());
        assert_eq!(back.get("b").unwrap(), ck.get("b").unwrap());
    }

    #[test]
    fn identical_contents_are_byte_stable() {
        let dir = std::env::temp_dir().join("cf_ckpt_stable");
        std::fs::create_dir_all(&dir).unwrap();
        let mut ck = Checkpoint::new();
        ck.set_meta("k", "v");
        ck.insert("z", Tensor::from_vec(vec![42.0, -1.0]));
        ck.insert("a", Tensor::from_vec(vec![7.0]));
        let p1 = dir.join("one.ckpt");
        let p2 = dir.join("two.ckpt");
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn param_store_round_trip() {
        let dir = std::env::temp_dir().join("cf_ckpt_params");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.ckpt");
        let mut store = ParamStore::new();
        store.register("layer.w", Tensor::from_vec(vec![1.0, 2.0]));
        store.register("layer.b", Tensor::from_vec(vec![-3.0]));
        let mut ck = Checkpoint::new();
        ck.put_params("model", &store);
        ck.save(&path).unwrap();

        let mut store2 = ParamStore::new();
        store2.register("layer.w", Tensor::zeros(&[2]));
        store2.register("layer.b", Tensor::zeros(&[1]));
        Checkpoint::load(&path).unwrap().load_params("model", &mut store2).unwrap();
        assert_eq!(store2.get(store2.find("layer.w").unwrap()).value.data, vec![1.0, 2.0]);
        assert_eq!(store2.get(store2.find("layer.b").unwrap()).value.data, vec![-3.0]);
    }
}
