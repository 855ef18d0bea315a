//! Checkpoint directory: `manifest` (JSON) plus `params.f32` (little-endian f32,
//! parameters concatenated in manifest order, each row-major).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::params::Parameters;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("missing checkpoint manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("malformed checkpoint manifest: {0}")]
    Malformed(String),
    #[error("checkpoint data has {actual} floats, manifest expects {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("parameter {name}: checkpoint shape {found:?} but model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Manifest<M> {
    format_version: u32,
    meta: M,
    params: Vec<ParamEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `params` and arbitrary serializable metadata (model config, dims, …).
pub fn save<M: Serialize>(dir: &Path, meta: &M, params: &Parameters) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        meta,
        params: params
            .iter()
            .map(|(_, name, v)| ParamEntry {
                name: name.to_string(),
                shape: [v.nrows(), v.ncols()],
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mpath = dir.join("manifest");
    fs::write(&mpath, text).map_err(io(&mpath))?;
    let mut bytes = Vec::with_capacity(params.scalar_count() * 4);
    for (_, _, v) in params.iter() {
        for &x in v.iter() {
            bytes.extend((x as f32).to_le_bytes());
        }
    }
    let dpath = dir.join("params.f32");
    fs::write(&dpath, bytes).map_err(io(&dpath))
}

/// Reads the metadata and a fresh [`Parameters`] in manifest order.
pub fn load<M: DeserializeOwned>(dir: &Path) -> Result<(M, Parameters), CheckpointError> {
    let mpath = dir.join("manifest");
    if !mpath.is_file() {
        return Err(CheckpointError::MissingManifest(mpath));
    }
    let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: Manifest<M> = serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Malformed(format!(
            "unsupported version {}",
            manifest.format_version
        )));
    }
    let dpath = dir.join("params.f32");
    let bytes = fs::read(&dpath).map_err(io(&dpath))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
    if bytes.len() != expected * 4 {
        return Err(CheckpointError::SizeMismatch {
            expected,
            actual: bytes.len() / 4,
        });
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut params = Parameters::new();
    for entry in &manifest.params {
        let [r, c] = entry.shape;
        let data: Vec<f64> = floats.by_ref().take(r * c).collect();
        params.add(entry.name.clone(), Array2::from_shape_vec((r, c), data).expect("sizes checked"));
    }
    Ok((manifest.meta, params))
}

/// Overwrites every parameter of `target` with the same-named entry of `loaded`.
pub fn restore_into(target: &mut Parameters, loaded: &Parameters) -> Result<(), CheckpointError> {
    let ids: Vec<_> = target.iter().map(|(id, name, v)| (id, name.to_string(), v.dim())).collect();
    for (id, name, shape) in ids {
        let src = loaded.id(&name).ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        let found = loaded.value(src).dim();
        if found != shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: shape,
                found,
            });
        }
        target.value_mut(id).assign(loaded.value(src));
    }
    Ok(())
}
