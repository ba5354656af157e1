//! Model checkpoints: a directory holding `model.json` (architecture and a
//! named-tensor index) and `weights.bin` (little-endian float32 blob).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{NetConfig, Stage, UNet};
use crate::error::{Error, Result};

pub const MODEL_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const LOSS_FILE: &str = "loss_history.csv";
const FORMAT: &str = "zseg-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub format: String,
    pub stage: Stage,
    pub net: NetConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_model(model: &UNet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, conv) in model.params() {
        let k = conv.kernel;
        tensors.push(TensorEntry {
            name: format!("{name}.weight"),
            shape: vec![conv.out_channels, conv.in_channels, k, k, k],
            offset,
        });
        offset += conv.weight.len();
        tensors.push(TensorEntry {
            name: format!("{name}.bias"),
            shape: vec![conv.out_channels],
            offset,
        });
        offset += conv.bias.len();
        for v in conv.weight.iter().chain(&conv.bias) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = ModelHeader {
        format: FORMAT.into(),
        stage: model.stage,
        net: model.config.clone(),
        tensors,
    };
    let path = dir.join(MODEL_FILE);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&path, text).map_err(|e| Error::storage(&path, e))?;
    let path = dir.join(WEIGHTS_FILE);
    fs::write(&path, blob).map_err(|e| Error::storage(&path, e))
}

fn mismatch(message: String) -> Error {
    Error::config("model", "tensors", message)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<UNet> {
    let dir = dir.as_ref();
    let path = dir.join(MODEL_FILE);
    if !path.is_file() {
        return Err(Error::missing(format!("model checkpoint {}", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
    let header: ModelHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, "model", e.to_string()))?;
    if header.format != FORMAT {
        return Err(Error::format(
            &path,
            "format",
            format!("unsupported checkpoint format {}", header.format),
        ));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::storage(&wpath, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&wpath, "payload", "truncated weights"));
    }
    let blob: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut model = UNet::new(header.stage, header.net.clone(), 0)?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    if header.tensors.len() != 2 * names.len() {
        return Err(mismatch(format!(
            "architecture expects {} tensors, checkpoint has {}",
            2 * names.len(),
            header.tensors.len()
        )));
    }
    for ((name, conv), pair) in names
        .iter()
        .zip(model.params_mut())
        .zip(header.tensors.chunks(2))
    {
        let k = conv.kernel;
        let expected = [
            (format!("{name}.weight"), vec![conv.out_channels, conv.in_channels, k, k, k]),
            (format!("{name}.bias"), vec![conv.out_channels]),
        ];
        for (entry, (ename, eshape)) in pair.iter().zip(&expected) {
            if &entry.name != ename || &entry.shape != eshape {
                return Err(mismatch(format!(
                    "tensor {} {:?} does not match architecture {} {:?}",
                    entry.name, entry.shape, ename, eshape
                )));
            }
        }
        for (entry, dst) in pair.iter().zip([&mut conv.weight, &mut conv.bias]) {
            let end = entry.offset + dst.len();
            if end > blob.len() {
                return Err(Error::format(&wpath, "payload", "truncated weights"));
            }
            dst.copy_from_slice(&blob[entry.offset..end]);
        }
    }
    Ok(model)
}

/// Loads a checkpoint and checks that it was trained for `stage`.
pub fn load_stage(dir: impl AsRef<Path>, stage: Stage) -> Result<UNet> {
    let model = load_model(dir)?;
    if model.stage != stage {
        return Err(Error::config(
            "model",
            "stage",
            format!("expected a {stage:?} checkpoint, found {:?}", model.stage),
        ));
    }
    Ok(model)
}
