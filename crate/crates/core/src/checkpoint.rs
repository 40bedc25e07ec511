//! Checkpoint directories: `manifest.json`, `weights.bin` (little-endian f32 in manifest order)
//! and `config.json` with the model configuration and task list.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{CatAir, InitOptions};
use crate::config::{ModelConfig, Task};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
}

impl TensorRecord {
    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub tasks: Vec<Task>,
}

/// A model together with the ordered list of tasks its prompt banks were trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CatAir,
    pub tasks: Vec<Task>,
}

impl Checkpoint {
    pub fn new(model: CatAir, tasks: Vec<Task>) -> Result<Self> {
        check_tasks(&model.config, &tasks)?;
        Ok(Self { model, tasks })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let named: Vec<(String, Tensor)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.var.as_tensor().clone()))
            .collect();
        save_tensors(dir, &self.model.config, &self.tasks, &named)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg: CheckpointConfig = read_json(&dir.join(CONFIG_FILE))?;
        check_tasks(&cfg.model, &cfg.tasks)?;
        let records: Vec<TensorRecord> = read_json(&dir.join(MANIFEST_FILE))?;
        let weights_path = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        let model = CatAir::new(&cfg.model, &InitOptions::default())?;

        if records.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, model has {}",
                records.len(),
                model.params().len()
            )));
        }
        let mut expected_offset = 0;
        for rec in &records {
            if rec.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", rec.name, rec.dtype)));
            }
            if rec.byte_offset != expected_offset {
                return Err(Error::Checkpoint(format!("{}: unexpected byte offset {}", rec.name, rec.byte_offset)));
            }
            let end = rec.byte_offset + rec.byte_len();
            let raw = bytes
                .get(rec.byte_offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("{}: weights file truncated", rec.name)))?;
            let param = model
                .params()
                .get(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", rec.name)))?;
            if param.var.dims() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} does not match model shape {:?}",
                    rec.name,
                    rec.shape,
                    param.var.dims()
                )));
            }
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            param
                .var
                .set(&Tensor::from_vec(values, rec.shape.as_slice(), model.device())?)?;
            expected_offset = end;
        }
        if expected_offset != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "weights file has {} trailing bytes",
                bytes.len() - expected_offset
            )));
        }
        Ok(Self {
            model,
            tasks: cfg.tasks,
        })
    }
}

fn check_tasks(config: &ModelConfig, tasks: &[Task]) -> Result<()> {
    if tasks.len() != config.task_count {
        return Err(Error::Checkpoint(format!(
            "{} task names for {} prompt rows",
            tasks.len(),
            config.task_count
        )));
    }
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].contains(t) {
            return Err(Error::TaskCollision(t.to_string()));
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes an arbitrary parameter set (for example EMA shadows) in checkpoint format.
pub fn save_tensors(dir: impl AsRef<Path>, config: &ModelConfig, tasks: &[Task], named: &[(String, Tensor)]) -> Result<()> {
    let dir = dir.as_ref();
    check_tasks(config, tasks)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(named.len());
    let mut bytes = Vec::new();
    for (name, t) in named {
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: "f32".into(),
            byte_offset: bytes.len(),
        });
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, bytes).map_err(|e| Error::io(&weights_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = serde_json::to_string_pretty(&records).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let config_path = dir.join(CONFIG_FILE);
    let cfg = CheckpointConfig {
        model: config.clone(),
        tasks: tasks.to_vec(),
    };
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::json(&config_path, e))?;
    fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            enc_blocks: [1, 1, 1, 1],
            dec_blocks: [1, 1, 1],
            window: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = CatAir::new(&tiny(), &InitOptions { seed: 11, ..Default::default() }).unwrap();
        let ckpt = Checkpoint::new(model, vec![Task::Denoise, Task::Derain, Task::Dehaze]).unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.tasks, ckpt.tasks);
        for (a, b) in ckpt.model.params().iter().zip(back.model.params().iter()) {
            assert_eq!(a.name, b.name);
            let va: Vec<f32> = a.var.flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f32> = b.var.flatten_all().unwrap().to_vec1().unwrap();
            assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
        }
        let records: Vec<TensorRecord> = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(records[0].byte_offset, 0);
        assert!(records.iter().all(|r| r.dtype == "f32"));
    }

    #[test]
    fn task_list_must_match_prompt_rows() {
        let model = CatAir::new(&tiny(), &InitOptions::default()).unwrap();
        assert!(Checkpoint::new(model.clone(), vec![Task::Denoise]).is_err());
        assert!(matches!(
            Checkpoint::new(model, vec![Task::Denoise, Task::Denoise, Task::Dehaze]),
            Err(Error::TaskCollision(_))
        ));
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = CatAir::new(&tiny(), &InitOptions::default()).unwrap();
        Checkpoint::new(model, vec![Task::Denoise, Task::Derain, Task::Dehaze])
            .unwrap()
            .save(dir.path())
            .unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
