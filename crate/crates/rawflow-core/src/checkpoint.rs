//! Checkpoints: a directory with one ".rt" raster per parameter plus a JSON
//! index mapping parameter names to files and recording the model layout,
//! seed, and stage that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::unet::UNetSpec;
use crate::raster::{read_raster, write_raster, Raster};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub format_version: u32,
    pub seed: u64,
    pub stage: String,
    pub model: ModelConfig,
    pub velocity_spec: UNetSpec,
    /// name -> relative raster path, ordered by name.
    pub params: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    model: &ModelConfig,
    seed: u64,
    stage: &str,
) -> Result<()> {
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut index = CheckpointIndex {
        format_version: 1,
        seed,
        stage: stage.to_string(),
        velocity_spec: model.velocity_unet_spec(),
        model: model.clone(),
        params: BTreeMap::new(),
    };
    for entry in store.iter() {
        let rel = format!("params/{}.rt", entry.name);
        let f32_data: Vec<f32> = entry.value.iter().map(|&v| v as f32).collect();
        let arr = ArrayD::from_shape_vec(entry.value.shape().to_vec(), f32_data)
            .expect("param reshape");
        write_raster(&dir.join(&rel), &Raster::F32(arr))?;
        index.params.insert(entry.name.clone(), rel);
    }
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::data(format!("index serialization: {e}")))?;
    let idx_path = dir.join("index.json");
    std::fs::write(&idx_path, text).map_err(|e| Error::io(&idx_path, e))?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let idx_path = dir.join("index.json");
    let text = std::fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: idx_path,
        reason: e.to_string(),
    })
}

/// Load parameter values; the caller matches them into a freshly built model.
pub fn load_params(dir: &Path) -> Result<(CheckpointIndex, BTreeMap<String, Array4<f64>>)> {
    let index = read_index(dir)?;
    let mut out = BTreeMap::new();
    for (name, rel) in &index.params {
        let path: PathBuf = dir.join(rel);
        let raster = read_raster(&path)?;
        let arr = match raster {
            Raster::F32(a) => a.mapv(|v| v as f64),
            Raster::U16(_) => {
                return Err(Error::Format {
                    path,
                    reason: "checkpoint params must be float32".into(),
                })
            }
        };
        let shape = arr.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Format {
                path,
                reason: format!("parameter {name} has {} dims, expected 4", shape.len()),
            });
        }
        let a4 = arr
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::shape(format!("{name}: {e}")))?;
        out.insert(name.clone(), a4);
    }
    Ok((index, out))
}

/// Restore a store from a checkpoint directory (names must match).
pub fn restore_into(dir: &Path, store: &mut ParamStore) -> Result<CheckpointIndex> {
    let (index, values) = load_params(dir)?;
    store.load_values(&values)?;
    Ok(index)
}
