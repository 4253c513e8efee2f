//! Checkpoint files: a text manifest (config, step, momentum, seed, group
//! tensor counts) followed by the state tensors as concatenated flat blobs,
//! ordered by group and then by parameter index.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{apply_model_kv, model_config_kv};
use crate::error::{Error, Result};
use crate::model::{build_model, GroupKind, ModelConfig, ModelGraph};
use crate::tensor::Tensor;

const FORMAT_LINE: &str = "format = mams-checkpoint-v1";

/// Run metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    /// EMA coefficient, when the model carries a momentum branch.
    pub ema_m: Option<f64>,
    /// EMA update count.
    pub ema_t: u64,
}

/// Write model weights and metadata. The byte stream is a pure function of
/// model state and meta, so identical runs produce identical files.
pub fn save_checkpoint(model: &ModelGraph, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", FORMAT_LINE)?;
    writeln!(w, "step = {}", meta.step)?;
    writeln!(w, "seed = {}", meta.seed)?;
    match meta.ema_m {
        Some(m) => writeln!(w, "ema_m = {}", m)?,
        None => writeln!(w, "ema_m = none")?,
    }
    writeln!(w, "ema_t = {}", meta.ema_t)?;
    for (key, value) in model_config_kv(&model.config) {
        writeln!(w, "model.{} = {}", key, value)?;
    }
    for kind in GroupKind::ALL {
        writeln!(w, "group.{} = {}", kind.name(), model.group_state(kind).len())?;
    }
    writeln!(w)?;
    for kind in GroupKind::ALL {
        for tensor in model.group_state(kind) {
            tensor.write_to(&mut w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuild a model and its metadata from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != FORMAT_LINE {
        return Err(Error::Format(format!(
            "checkpoint: unsupported header '{}'",
            line.trim_end()
        )));
    }

    let mut config = ModelConfig::default();
    let mut step = 0u64;
    let mut seed = 0u64;
    let mut ema_m: Option<f64> = None;
    let mut ema_t = 0u64;
    let mut group_counts: Vec<(String, usize)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("checkpoint: truncated manifest".into()));
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        let (key, value) = trimmed
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Format(format!("checkpoint: bad manifest line '{}'", trimmed)))?;
        if let Some(field) = key.strip_prefix("model.") {
            if !apply_model_kv(&mut config, field, value)? {
                return Err(Error::Format(format!(
                    "checkpoint: unknown model field '{}'",
                    field
                )));
            }
        } else if let Some(group) = key.strip_prefix("group.") {
            let count: usize = value
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint: bad group count '{}'", value)))?;
            group_counts.push((group.to_string(), count));
        } else {
            match key {
                "step" => {
                    step = value.parse().map_err(|_| {
                        Error::Format(format!("checkpoint: bad step '{}'", value))
                    })?
                }
                "seed" => {
                    seed = value.parse().map_err(|_| {
                        Error::Format(format!("checkpoint: bad seed '{}'", value))
                    })?
                }
                "ema_m" => {
                    ema_m = if value == "none" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| {
                            Error::Format(format!("checkpoint: bad ema_m '{}'", value))
                        })?)
                    }
                }
                "ema_t" => {
                    ema_t = value.parse().map_err(|_| {
                        Error::Format(format!("checkpoint: bad ema_t '{}'", value))
                    })?
                }
                other => {
                    return Err(Error::Format(format!(
                        "checkpoint: unknown manifest key '{}'",
                        other
                    )))
                }
            }
        }
    }

    let mut model = build_model(&config, seed)?;
    for kind in GroupKind::ALL {
        let expected = group_counts
            .iter()
            .find(|(name, _)| name == kind.name())
            .map(|(_, n)| *n)
            .ok_or_else(|| {
                Error::Format(format!("checkpoint: missing group '{}'", kind.name()))
            })?;
        let tensors = model.group_state_mut(kind);
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint: group '{}' has {} tensors, file says {}",
                kind.name(),
                tensors.len(),
                expected
            )));
        }
        for tensor in tensors {
            let loaded = Tensor::read_from(&mut r)?;
            if loaded.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint: tensor shape {:?} does not match model shape {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(loaded.data());
        }
    }
    // the file must end exactly here
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("checkpoint: trailing bytes".into()));
    }
    Ok((
        model,
        CheckpointMeta {
            step,
            seed,
            ema_m,
            ema_t,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_height: 8,
            input_width: 8,
            backbone_stage_widths: vec![4],
            c_pre: 4,
            c_out: 8,
            fusion_reduction: 2,
            head_hidden: 6,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let model = build_model(&small_config(), 11).unwrap();
        let meta = CheckpointMeta {
            step: 123,
            seed: 11,
            ema_m: Some(0.999),
            ema_t: 123,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.config, model.config);
        for kind in GroupKind::ALL {
            for (a, b) in model.group_state(kind).iter().zip(loaded.group_state(kind)) {
                assert_eq!(a.shape(), b.shape());
                assert!(a
                    .data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let model = build_model(&small_config(), 5).unwrap();
        let meta = CheckpointMeta {
            step: 7,
            seed: 5,
            ema_m: Some(0.9),
            ema_t: 7,
        };
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&model, &meta, &p1).unwrap();
        save_checkpoint(&model, &meta, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, "not a checkpoint\n\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
