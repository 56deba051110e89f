//! Toy-model weight dumps: a JSON manifest next to one raw little-endian f32
//! blob per tensor, for cross-implementation reference checks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::toy::{tensor_shapes, Weights};
use super::{ToyModel, ToyModelConfig};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "deco-toy-weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format: String,
    pub version: u32,
    pub config: ToyModelConfig,
    pub seed: u64,
    pub norm_eps: f32,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_weight_dump(model: &ToyModel, dir: impl AsRef<Path>) -> Result<DumpManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, shape, data) in model.tensors() {
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        tensors.push(TensorEntry {
            name,
            shape,
            file,
            dtype: "f32le".into(),
        });
    }
    let manifest = DumpManifest {
        format: FORMAT.into(),
        version: 1,
        config: *model.config(),
        seed: model.config().seed,
        norm_eps: super::toy::NORM_EPS,
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_weight_dump(dir: impl AsRef<Path>) -> Result<ToyModel> {
    let dir = dir.as_ref();
    let manifest: DumpManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Model(format!(
            "unsupported weight dump {} v{}",
            manifest.format, manifest.version
        )));
    }
    manifest.config.validate()?;
    let expected = tensor_shapes(&manifest.config);
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape || entry.dtype != "f32le" {
            return Err(Error::Model(format!(
                "tensor {} {:?} ({}) does not match expected {name} {shape:?}",
                entry.name, entry.shape, entry.dtype
            )));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Model(format!("tensor {name}: blob length not a multiple of 4")));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((entry.name.clone(), data));
    }
    ToyModel::from_weights(Weights::from_named(manifest.config, named)?)
}
