//! Tensor blob checkpoint format: raw little-endian f64, one file per tensor,
//! plus a JSON manifest mapping tensor name to shape and file name.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumkitError, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    file: String,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Write one `.bin` blob per tensor plus `manifest.json` into `dir`.
pub fn save_tensors(dir: &Path, tensors: &[(String, &Tensor)]) -> Result<(), NumkitError> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        tensors: BTreeMap::new(),
    };
    for (name, t) in tensors {
        let file = format!("{name}.bin");
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let prev = manifest.tensors.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                file,
            },
        );
        if prev.is_some() {
            return Err(NumkitError::BadManifest(format!("duplicate tensor name `{name}`")));
        }
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| NumkitError::BadManifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_NAME), json + "\n")?;
    Ok(())
}

/// Load every tensor listed in `dir/manifest.json`.
pub fn load_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>, NumkitError> {
    let raw = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| NumkitError::BadManifest(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, entry) in manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut r = BufReader::new(fs::File::open(dir.join(&entry.file))?);
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.insert(name, Tensor::from_vec(entry.shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 3], vec![9.0, 8.0, 7.0]).unwrap();
        save_tensors(
            dir.path(),
            &[("layer.w".to_string(), &a), ("layer.b".to_string(), &b)],
        )
        .unwrap();
        let back = load_tensors(dir.path()).unwrap();
        assert_eq!(back["layer.w"], a);
        assert_eq!(back["layer.b"], b);
    }

    #[test]
    fn manifest_bytes_are_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = Tensor::from_vec(vec![1, 2], vec![0.1, 0.2]).unwrap();
        for d in [&d1, &d2] {
            save_tensors(d.path(), &[("w".to_string(), &a)]).unwrap();
        }
        let m1 = fs::read(d1.path().join(MANIFEST_NAME)).unwrap();
        let m2 = fs::read(d2.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(m1, m2);
    }
}
