//! Single-file tensor container used for checkpoints and inference inputs.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MFCK" | version: u32 = 1 | manifest_len: u64 | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The manifest is `{"config": <model config or null>, "tensors": [{"name",
//! "shape", "dtype": "f32", "frozen", "offset", "byte_len"}, ...]}`. Offsets
//! are relative to the start of the payload; tensors are stored back to back
//! in manifest order as little-endian f32.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamKind;
use crate::tensor::{numel_of, Tensor};

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;
/// Name of the single tensor in an inference input file.
pub const INPUT_TENSOR: &str = "input";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub frozen: bool,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    config: Option<&'a ModelConfig>,
    tensors: &'a [TensorRecord],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestIn {
    config: Option<ModelConfig>,
    tensors: Vec<TensorRecord>,
}

/// A decoded container: optional config plus named f32 tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: Option<ModelConfig>,
    pub tensors: Vec<(TensorRecord, Tensor<f32>)>,
}

/// One tensor to be written.
pub struct TensorView<'a> {
    pub name: &'a str,
    pub frozen: bool,
    pub tensor: &'a Tensor<f32>,
}

pub fn encode(config: Option<&ModelConfig>, tensors: &[TensorView<'_>]) -> Vec<u8> {
    let mut records = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        let byte_len = (t.tensor.numel() * 4) as u64;
        records.push(TensorRecord {
            name: t.name.to_string(),
            shape: t.tensor.shape().to_vec(),
            dtype: "f32".into(),
            frozen: t.frozen,
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let manifest = serde_json::to_vec(&ManifestOut {
        config,
        tensors: &records,
    })
    .expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in tensors {
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn corrupt(tensor: &str, message: impl Into<String>) -> Error {
    Error::Corrupt {
        tensor: tensor.to_string(),
        message: message.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"MFCK\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[HEADER_LEN..];
    if manifest_len > rest.len() as u64 {
        return Err(Error::Format(format!(
            "manifest length {manifest_len} exceeds the {} bytes after the header",
            rest.len()
        )));
    }
    let (manifest, payload) = rest.split_at(manifest_len as usize);
    let de = &mut serde_json::Deserializer::from_slice(manifest);
    let manifest: ManifestIn = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        match e.into_inner() {
            inner if inner.is_data() && path.starts_with("config") => Error::config(path, inner.to_string()),
            inner => Error::Format(format!("manifest at `{path}`: {inner}")),
        }
    })?;
    if let Some(c) = &manifest.config {
        c.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("config.{path}"), message),
            other => other,
        })?;
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut end = 0u64;
    for rec in manifest.tensors {
        if rec.dtype != "f32" {
            return Err(Error::Format(format!("tensor `{}` has dtype `{}`, only f32 is stored", rec.name, rec.dtype)));
        }
        if rec.shape.contains(&0) {
            return Err(corrupt(&rec.name, format!("zero dimension in shape {:?}", rec.shape)));
        }
        let n = numel_of(&rec.shape);
        if rec.byte_len != 4 * n as u64 {
            return Err(corrupt(
                &rec.name,
                format!("byte_len {} does not match shape {:?} ({} bytes)", rec.byte_len, rec.shape, 4 * n),
            ));
        }
        if rec.offset < end {
            return Err(corrupt(&rec.name, format!("offset {} overlaps the previous tensor ending at {end}", rec.offset)));
        }
        end = rec.offset + rec.byte_len;
        if end > payload.len() as u64 {
            return Err(corrupt(
                &rec.name,
                format!("needs payload bytes up to {end}, payload has {}", payload.len()),
            ));
        }
        let raw = &payload[rec.offset as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(rec.shape.clone(), data)?;
        tensors.push((rec, t));
    }
    if end != payload.len() as u64 {
        let name = tensors.last().map_or("<none>", |(r, _)| r.name.as_str()).to_string();
        return Err(corrupt(&name, format!("{} trailing payload bytes", payload.len() as u64 - end)));
    }
    Ok(Container {
        config: manifest.config,
        tensors,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temp file and renames, so readers never see a
/// half-written file.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.partial"));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn encode_model(model: &Model<f32>) -> Vec<u8> {
    let views: Vec<TensorView<'_>> = model
        .store
        .entries()
        .iter()
        .map(|e| TensorView {
            name: &e.name,
            frozen: e.kind != ParamKind::Trainable,
            tensor: &e.value,
        })
        .collect();
    encode(Some(&model.config), &views)
}

/// Rebuilds a model from decoded bytes. Every model tensor must appear
/// exactly once with a matching shape and frozen flag.
pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    let container = decode(bytes)?;
    let config = container
        .config
        .ok_or_else(|| Error::Format("container has no model config (is it an input file?)".into()))?;
    let mut model = Model::<f32>::build_zeroed(&config)?;
    let mut filled = vec![false; model.store.len()];
    for (rec, tensor) in container.tensors {
        let id = model
            .store
            .find(&rec.name)
            .ok_or_else(|| corrupt(&rec.name, "not a tensor of the configured model"))?;
        if std::mem::replace(&mut filled[id.index()], true) {
            return Err(corrupt(&rec.name, "appears more than once"));
        }
        let entry = model.store.entry(id);
        if entry.value.shape() != tensor.shape() {
            return Err(corrupt(
                &rec.name,
                format!("shape {:?} but the config implies {:?}", tensor.shape(), entry.value.shape()),
            ));
        }
        let frozen = entry.kind != ParamKind::Trainable;
        if rec.frozen != frozen {
            return Err(corrupt(&rec.name, format!("frozen flag {} but the config implies {frozen}", rec.frozen)));
        }
        *model.store.get_mut(id) = tensor;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        let name = model.store.entries()[missing].name.clone();
        return Err(corrupt(&name, "missing from checkpoint"));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    write_file(path, &encode_model(model))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    decode_model(&read_file(path)?)
}

/// Stores an inference input `[B, C, H, W]` with a null config.
pub fn save_input(input: &Tensor<f32>, path: &Path) -> Result<()> {
    let view = TensorView {
        name: INPUT_TENSOR,
        frozen: false,
        tensor: input,
    };
    write_file(path, &encode(None, &[view]))
}

pub fn load_input(path: &Path) -> Result<Tensor<f32>> {
    let container = decode(&read_file(path)?)?;
    let mut found = container.tensors.into_iter().filter(|(r, _)| r.name == INPUT_TENSOR);
    match (found.next(), found.next()) {
        (Some((_, t)), None) => {
            if t.ndim() != 4 {
                return Err(corrupt(INPUT_TENSOR, format!("expected a [B, C, H, W] tensor, got {:?}", t.shape())));
            }
            Ok(t)
        }
        (None, _) => Err(Error::Format(format!("no tensor named `{INPUT_TENSOR}`"))),
        (Some(_), Some(_)) => Err(corrupt(INPUT_TENSOR, "appears more than once")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::MixerConfig;
    use crate::norm::NormKind;

    fn tiny() -> ModelConfig {
        ModelConfig::tiny(4, 32)
    }

    #[test]
    fn roundtrip_bytes_and_values() {
        let m = Model::<f32>::build(&tiny(), 3).unwrap();
        let bytes = encode_model(&m);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn header_fields() {
        let m = Model::<f32>::build(&tiny(), 3).unwrap();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..4], b"MFCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        assert_eq!(manifest["tensors"].as_array().unwrap().len(), m.store.len());
        let (t, f) = m.param_counts();
        assert_eq!((bytes.len() - 16 - mlen) as u64, 4 * (t + f));
    }

    #[test]
    fn format_errors() {
        let m = Model::<f32>::build(&tiny(), 3).unwrap();
        let bytes = encode_model(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_model(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_names_tensor() {
        let m = Model::<f32>::build(&tiny(), 3).unwrap();
        let bytes = encode_model(&m);
        match decode_model(&bytes[..bytes.len() - 3]) {
            Err(Error::Corrupt { tensor, .. }) => assert_eq!(tensor, "head.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn random_matrix_and_bn_buffers_survive() {
        let mut c = tiny();
        c.mixers = [MixerConfig::RandomMatrix; 4];
        c.norm = NormKind::Bn;
        let m = Model::<f32>::build(&c, 5).unwrap();
        let back = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back.store, m.store);
        let id = back.store.find("stage1.block0.mixer.matrix").unwrap();
        let w = back.store.get(id);
        let n = w.shape()[0];
        for row in w.data().chunks(n) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn input_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mfck");
        let x = Tensor::from_fn([1, 3, 4, 4], |i| i as f32 * 0.5);
        save_input(&x, &p).unwrap();
        assert_eq!(load_input(&p).unwrap(), x);
        assert!(matches!(load(&p), Err(Error::Format(_))));
    }
}
