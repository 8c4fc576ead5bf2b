//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.toml       model configuration
//! <dir>/manifest.txt      one line per parameter: name, shape, file, sha256
//! <dir>/params/<name>.ndt NDT1 tensor
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{MfuNet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{io, Scalar};

const HEADER: &str = "# mfunet checkpoint v1: name\tshape\tfile\tsha256";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Accepts either the checkpoint directory or its `manifest.txt`.
pub fn resolve_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

pub fn save<T: Scalar>(model: &MfuNet<T>, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let config = toml::to_string(model.config()).map_err(|e| Error::Config(e.to_string()))?;
    io::write_bytes(&dir.join("config.toml"), config.as_bytes())?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    for (name, tensor) in model.params().iter() {
        let bytes = io::encode(tensor)?;
        let file = format!("params/{name}.ndt");
        io::write_bytes(&dir.join(&file), &bytes)?;
        let shape: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{file}\t{}\n", shape.join(","), sha256_hex(&bytes)));
    }
    io::write_bytes(&dir.join("manifest.txt"), manifest.as_bytes())
}

pub fn read_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join("config.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path,
        detail: e.to_string(),
    })
}

/// Loads a checkpoint, building the network from its stored configuration.
pub fn load<T: Scalar>(dir: &Path) -> Result<MfuNet<T>> {
    let dir = resolve_dir(dir);
    let mut model = MfuNet::new(read_config(&dir)?)?;
    load_into(&mut model, &dir)?;
    Ok(model)
}

struct Entry {
    name: String,
    file: String,
    digest: String,
}

fn read_manifest(dir: &Path) -> Result<Vec<Entry>> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.clone(),
                detail: format!("line {}: expected 4 tab-separated fields", lineno + 1),
            });
        }
        entries.push(Entry {
            name: fields[0].to_string(),
            file: fields[2].to_string(),
            digest: fields[3].to_string(),
        });
    }
    Ok(entries)
}

/// Overwrites the parameters of `model` with those stored in `dir`.
///
/// Every parameter of the model must be present with an identical shape.
pub fn load_into<T: Scalar>(model: &mut MfuNet<T>, dir: &Path) -> Result<()> {
    let dir = resolve_dir(dir);
    let entries = read_manifest(&dir)?;
    let mut seen = vec![false; model.params().len()];
    for entry in entries {
        let id = model.params().by_name(&entry.name).ok_or_else(|| {
            Error::shape(
                "load checkpoint",
                format!("parameter {} is not part of this model", entry.name),
            )
        })?;
        let path = dir.join(&entry.file);
        let bytes = io::read_bytes(&path)?;
        if sha256_hex(&bytes) != entry.digest {
            return Err(Error::corrupt(&path, "checksum mismatch"));
        }
        let tensor = io::decode::<T>(&bytes, &path)?;
        model.params_mut().set(&entry.name, tensor)?;
        seen[id.0] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::shape(
            "load checkpoint",
            format!("parameter {} missing from checkpoint", model.params().name(crate::nn::ParamId(missing))),
        ));
    }
    Ok(())
}
