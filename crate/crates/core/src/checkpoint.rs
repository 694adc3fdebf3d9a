//! Versioned, self-describing checkpoint files.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header
//! (kind, step, embedded config, tensor table, extra counters), then raw
//! tensor data as little-endian f64 in table order. f32 weights round-trip
//! bit-exactly through the f64 encoding.

use crate::error::CheckpointError;
use crate::nn::{Module, Param};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ATNADCP1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    scalar: String,
    step: u64,
    config: serde_json::Value,
    extra: BTreeMap<String, u64>,
    tensors: Vec<TensorMeta>,
}

pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub extra: BTreeMap<String, u64>,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint, scalar_kind: &str) -> Result<(), CheckpointError> {
    let io_err = |e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let header = Header {
        kind: ckpt.kind.clone(),
        scalar: scalar_kind.to_string(),
        step: ckpt.step,
        config: ckpt.config.clone(),
        extra: ckpt.extra.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(n, t)| TensorMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    f.write_all(MAGIC).map_err(io_err)?;
    f.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    f.write_all(&header_json).map_err(io_err)?;
    for (_, t) in &ckpt.tensors {
        for &v in t.iter() {
            f.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    f.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4).map_err(io_err)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8).map_err(io_err)?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf).map_err(io_err)?;
    let header: Header =
        serde_json::from_slice(&hbuf).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        f.read_exact(&mut buf).map_err(io_err)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.push((meta.name.clone(), arr));
    }
    Ok(Checkpoint {
        kind: header.kind,
        step: header.step,
        config: header.config,
        extra: header.extra,
        tensors,
    })
}

/// Export a module's parameters plus Adam moments as named f64 tensors.
pub fn export_module<S: Scalar, M: Module<S>>(module: &mut M) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    module.visit_params(&mut |p: &mut Param<S>| {
        out.push((p.name.clone(), p.value.mapv(|v| v.as_f64())));
        out.push((format!("{}.adam_m", p.name), p.m.mapv(|v| v.as_f64())));
        out.push((format!("{}.adam_v", p.name), p.v.mapv(|v| v.as_f64())));
    });
    out
}

/// Restore module parameters (and Adam moments when present) by name.
/// Every parameter of the module must be present with a matching shape.
pub fn import_module<S: Scalar, M: Module<S>>(
    module: &mut M,
    ckpt: &Checkpoint,
) -> Result<(), CheckpointError> {
    let mut missing = Vec::new();
    module.visit_params(&mut |p: &mut Param<S>| {
        match ckpt.tensor(&p.name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t.mapv(S::from_f64);
            }
            Some(t) => missing.push(format!(
                "{}: shape {:?} != {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )),
            None => missing.push(format!("{} absent", p.name)),
        }
        if let Some(m) = ckpt.tensor(&format!("{}.adam_m", p.name)) {
            if m.shape() == p.m.shape() {
                p.m = m.mapv(S::from_f64);
            }
        }
        if let Some(v) = ckpt.tensor(&format!("{}.adam_v", p.name)) {
            if v.shape() == p.v.shape() {
                p.v = v.mapv(S::from_f64);
            }
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CheckpointError::Corrupt(missing.join("; ")))
    }
}

/// Restore only parameters whose names exist in the checkpoint; used by the
/// optional pretrained-encoder hook. Returns how many tensors were loaded.
pub fn import_module_partial<S: Scalar, M: Module<S>>(
    module: &mut M,
    ckpt: &Checkpoint,
) -> Result<usize, CheckpointError> {
    let mut loaded = 0usize;
    let mut bad = Vec::new();
    module.visit_params(&mut |p: &mut Param<S>| {
        if let Some(t) = ckpt.tensor(&p.name) {
            if t.shape() == p.value.shape() {
                p.value = t.mapv(S::from_f64);
                loaded += 1;
            } else {
                bad.push(p.name.clone());
            }
        }
    });
    if bad.is_empty() {
        Ok(loaded)
    } else {
        Err(CheckpointError::Corrupt(format!(
            "shape mismatch for {}",
            bad.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Init};
    use crate::rng::stream;

    #[test]
    fn roundtrip_preserves_f32_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut rng = stream(9, &[2]);
        let mut conv = Conv2d::<f32>::new("c", 3, 4, 3, 1, 1, Init::He, &mut rng);
        conv.w.m.fill(0.25);
        conv.w.v.fill(0.125);
        let ckpt = Checkpoint {
            kind: "test".into(),
            step: 17,
            config: serde_json::json!({"k": 1}),
            extra: BTreeMap::from([("opt_t".into(), 5u64)]),
            tensors: export_module(&mut conv),
        };
        save(&path, &ckpt, "f32").unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.extra["opt_t"], 5);

        let mut conv2 = Conv2d::<f32>::new("c", 3, 4, 3, 1, 1, Init::He, &mut stream(1, &[7]));
        import_module(&mut conv2, &loaded).unwrap();
        assert_eq!(conv.w.value, conv2.w.value);
        assert_eq!(conv.b.value, conv2.b.value);
        assert_eq!(conv.w.m, conv2.w.m);
        assert_eq!(conv.w.v, conv2.w.v);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic(_))));
    }
}
