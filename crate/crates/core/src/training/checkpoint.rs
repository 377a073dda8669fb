//! Checkpoint directory: `manifest.json` naming one VT01 file per tensor,
//! plus `optimizer.json` and momentum tensors when optimizer state is kept.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::{read_vt01, write_vt01, DType, Scalar, Tensor};

use super::optimizer::{OptimizerState, SgdConfig};

pub const CHECKPOINT_SCHEMA: &str = "v4d.checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub dtype: DType,
    pub spec: NetworkSpec,
    /// Tensor name -> file name relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerManifest {
    schema: String,
    config: SgdConfig,
    velocity: BTreeMap<String, String>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_tensors<T: Scalar>(
    dir: &Path,
    sub: &str,
    tensors: &BTreeMap<String, Tensor<T>>,
) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for (name, t) in tensors {
        let file = format!("{sub}{name}.vt01");
        write_vt01(dir.join(&file), t)?;
        files.insert(name.clone(), file);
    }
    Ok(files)
}

fn read_tensors<T: Scalar>(
    dir: &Path,
    files: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    files
        .iter()
        .map(|(name, file)| Ok((name.clone(), read_vt01(dir.join(file))?)))
        .collect()
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    net: &Network<T>,
    optimizer: Option<&OptimizerState<T>>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = write_tensors(dir, "", &net.state_dict())?;
    let manifest = Manifest {
        schema: CHECKPOINT_SCHEMA.into(),
        dtype: T::DTYPE,
        spec: net.spec().clone(),
        tensors,
    };
    if let Some(opt) = optimizer {
        fs::create_dir_all(dir.join("optimizer")).map_err(|e| Error::io(dir, e))?;
        let velocity = write_tensors(dir, "optimizer/", &opt.velocity)?;
        let om = OptimizerManifest {
            schema: CHECKPOINT_SCHEMA.into(),
            config: opt.config,
            velocity,
        };
        write_json(&dir.join("optimizer.json"), &om)?;
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join("manifest.json"))?;
    if m.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Model(format!(
            "unsupported checkpoint schema {:?}",
            m.schema
        )));
    }
    Ok(m)
}

/// Tensors of a checkpoint by name, converted to `T`.
pub fn load_state<T: Scalar>(dir: &Path) -> Result<(NetworkSpec, BTreeMap<String, Tensor<T>>)> {
    let m = read_manifest(dir)?;
    Ok((m.spec, read_tensors(dir, &m.tensors)?))
}

/// Rebuild the network a checkpoint describes, with its weights.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Network<T>> {
    let (spec, state) = load_state(dir)?;
    let mut net = Network::build(&spec)?;
    net.load_state(&state, true)?;
    Ok(net)
}

pub fn load_optimizer<T: Scalar>(dir: &Path) -> Result<Option<OptimizerState<T>>> {
    let path = dir.join("optimizer.json");
    if !path.exists() {
        return Ok(None);
    }
    let om: OptimizerManifest = read_json(&path)?;
    Ok(Some(OptimizerState {
        config: om.config,
        velocity: read_tensors(dir, &om.velocity)?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Insertion;

    #[test]
    fn round_trip() {
        let spec = NetworkSpec {
            depth: 18,
            num_classes: 2,
            units: 2,
            in_channels: 1,
            width: 4,
            stages: 1,
            blocks: Some(vec![1]),
            insertions: vec![Insertion {
                stage: 2,
                after_block: 0,
                kernel: [3, 3, 1, 1],
            }],
            extra_res4_block: false,
            seed: 4,
        };
        let net = Network::<f32>::build(&spec).unwrap();
        let mut opt = OptimizerState::new(SgdConfig::default());
        opt.velocity
            .insert("head.fc.bias".into(), Tensor::full(vec![2], 0.5));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net, Some(&opt)).unwrap();
        let back = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back.state_dict(), net.state_dict());
        assert_eq!(load_optimizer::<f32>(dir.path()).unwrap().unwrap(), opt);
        let wide = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(wide.param_count(), net.param_count());
    }

    #[test]
    fn missing_checkpoint_is_io() {
        let err = load_checkpoint::<f32>(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
