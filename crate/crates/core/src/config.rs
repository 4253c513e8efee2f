//! Plain-text configuration files: `key = value` lines in `[model]`,
//! `[train]` and `[synth]` sections. Unknown keys are rejected with their
//! line number; CLI flags override file values downstream.

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig};
use crate::optim::OptimizerKind;
use crate::train::TrainConfig;

/// Parsed configuration file; every section falls back to defaults.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

/// Parse a configuration file.
pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig {
        model: ModelConfig::default(),
        train: TrainConfig::default(),
        synth: SynthConfig::default(),
    };
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            match name {
                "model" | "train" | "synth" => section = name.to_string(),
                other => {
                    return Err(Error::Config(format!(
                        "config line {}: unknown section '[{}]'",
                        lineno + 1,
                        other
                    )))
                }
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", lineno + 1))
            })?;
        let known = match section.as_str() {
            "model" => apply_model_kv(&mut cfg.model, key, value)
                .map_err(|e| at_line(e, lineno + 1))?,
            "train" => apply_train_kv(&mut cfg.train, key, value)
                .map_err(|e| at_line(e, lineno + 1))?,
            "synth" => apply_synth_kv(&mut cfg.synth, key, value)
                .map_err(|e| at_line(e, lineno + 1))?,
            _ => {
                return Err(Error::Config(format!(
                    "config line {}: key '{}' appears before any [section]",
                    lineno + 1,
                    key
                )))
            }
        };
        if !known {
            return Err(Error::Config(format!(
                "config line {}: unknown key '{}' in section [{}]",
                lineno + 1,
                key,
                section
            )));
        }
    }
    Ok(cfg)
}

fn at_line(e: Error, lineno: usize) -> Error {
    Error::Config(format!("config line {}: {}", lineno, e))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{}' for '{}'", value, key)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad boolean '{}' for '{}'",
            value, key
        ))),
    }
}

// ── model section ───────────────────────────────────────────────────────

/// Serialize the model config as stable key/value pairs.
pub fn model_config_kv(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("input_channels", cfg.input_channels.to_string()),
        ("input_height", cfg.input_height.to_string()),
        ("input_width", cfg.input_width.to_string()),
        (
            "backbone_stage_widths",
            cfg.backbone_stage_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("c_pre", cfg.c_pre.to_string()),
        ("c_out", cfg.c_out.to_string()),
        ("fusion_reduction", cfg.fusion_reduction.to_string()),
        ("head_hidden", cfg.head_hidden.to_string()),
        ("dropout_rate", cfg.dropout_rate.to_string()),
        ("num_classes", cfg.num_classes.to_string()),
        ("activation", cfg.activation.as_str().to_string()),
        ("bn_eps", cfg.bn_eps.to_string()),
        ("bn_momentum", cfg.bn_momentum.to_string()),
        ("fusion_nonlinearity", cfg.fusion_nonlinearity.to_string()),
        ("use_fusion", cfg.use_fusion.to_string()),
        ("use_momentum", cfg.use_momentum.to_string()),
    ]
}

/// Apply one model key; Ok(false) means the key is unknown.
pub fn apply_model_kv(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "input_channels" => cfg.input_channels = parse_num(key, value)?,
        "input_height" => cfg.input_height = parse_num(key, value)?,
        "input_width" => cfg.input_width = parse_num(key, value)?,
        "input_size" => {
            let s: usize = parse_num(key, value)?;
            cfg.input_height = s;
            cfg.input_width = s;
        }
        "backbone_stage_widths" => {
            cfg.backbone_stage_widths = value
                .split(',')
                .map(|p| parse_num("backbone_stage_widths", p.trim()))
                .collect::<Result<_>>()?;
        }
        "c_pre" => cfg.c_pre = parse_num(key, value)?,
        "c_out" => cfg.c_out = parse_num(key, value)?,
        "fusion_reduction" => cfg.fusion_reduction = parse_num(key, value)?,
        "head_hidden" => cfg.head_hidden = parse_num(key, value)?,
        "dropout_rate" => cfg.dropout_rate = parse_num(key, value)?,
        "num_classes" => cfg.num_classes = parse_num(key, value)?,
        "activation" => cfg.activation = Activation::parse(value)?,
        "bn_eps" => cfg.bn_eps = parse_num(key, value)?,
        "bn_momentum" => cfg.bn_momentum = parse_num(key, value)?,
        "fusion_nonlinearity" => cfg.fusion_nonlinearity = parse_bool(key, value)?,
        "use_fusion" => cfg.use_fusion = parse_bool(key, value)?,
        "use_momentum" => cfg.use_momentum = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

// ── train section ───────────────────────────────────────────────────────

pub fn train_config_kv(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("stage1_steps", cfg.stage1.steps.to_string()),
        ("stage1_batch_size", cfg.stage1.batch_size.to_string()),
        ("stage2_steps", cfg.stage2.steps.to_string()),
        ("stage2_batch_size", cfg.stage2.batch_size.to_string()),
        ("optimizer", cfg.optimizer.as_str().to_string()),
        ("eta", cfg.eta.to_string()),
        ("adam_beta1", cfg.adam_beta1.to_string()),
        ("adam_beta2", cfg.adam_beta2.to_string()),
        ("adam_eps", cfg.adam_eps.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("seed", cfg.seed.to_string()),
        ("use_fusion", cfg.use_fusion.to_string()),
        ("use_momentum", cfg.use_momentum.to_string()),
        (
            "stop_gradient_momentum",
            cfg.stop_gradient_momentum.to_string(),
        ),
        ("asl_gamma_pos", cfg.asl_gamma_pos.to_string()),
        ("asl_gamma_neg", cfg.asl_gamma_neg.to_string()),
        ("asl_prob_shift", cfg.asl_prob_shift.to_string()),
    ]
}

pub fn apply_train_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "stage1_steps" => cfg.stage1.steps = parse_num(key, value)?,
        "stage1_batch_size" => cfg.stage1.batch_size = parse_num(key, value)?,
        "stage2_steps" => cfg.stage2.steps = parse_num(key, value)?,
        "stage2_batch_size" => cfg.stage2.batch_size = parse_num(key, value)?,
        "optimizer" => cfg.optimizer = OptimizerKind::parse(value)?,
        "eta" => cfg.eta = parse_num(key, value)?,
        "adam_beta1" => cfg.adam_beta1 = parse_num(key, value)?,
        "adam_beta2" => cfg.adam_beta2 = parse_num(key, value)?,
        "adam_eps" => cfg.adam_eps = parse_num(key, value)?,
        "momentum" => cfg.momentum = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "use_fusion" => cfg.use_fusion = parse_bool(key, value)?,
        "use_momentum" => cfg.use_momentum = parse_bool(key, value)?,
        "stop_gradient_momentum" => cfg.stop_gradient_momentum = parse_bool(key, value)?,
        "asl_gamma_pos" => cfg.asl_gamma_pos = parse_num(key, value)?,
        "asl_gamma_neg" => cfg.asl_gamma_neg = parse_num(key, value)?,
        "asl_prob_shift" => cfg.asl_prob_shift = parse_num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

// ── synth section ───────────────────────────────────────────────────────

pub fn synth_config_kv(cfg: &SynthConfig) -> Vec<(&'static str, String)> {
    vec![
        ("num_classes", cfg.num_classes.to_string()),
        ("num_images", cfg.num_images.to_string()),
        ("head_prevalence", cfg.head_prevalence.to_string()),
        ("tail_ratio", cfg.tail_ratio.to_string()),
        ("image_size", cfg.image_size.to_string()),
        ("blob_scale_min", cfg.blob_scale_min.to_string()),
        ("blob_scale_max", cfg.blob_scale_max.to_string()),
        ("texture_freq_min", cfg.texture_freq_min.to_string()),
        ("texture_freq_max", cfg.texture_freq_max.to_string()),
        ("noise_level", cfg.noise_level.to_string()),
        ("seed", cfg.seed.to_string()),
    ]
}

pub fn apply_synth_kv(cfg: &mut SynthConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "num_classes" => cfg.num_classes = parse_num(key, value)?,
        "num_images" => cfg.num_images = parse_num(key, value)?,
        "head_prevalence" => cfg.head_prevalence = parse_num(key, value)?,
        "tail_ratio" => cfg.tail_ratio = parse_num(key, value)?,
        "image_size" => cfg.image_size = parse_num(key, value)?,
        "blob_scale_min" => cfg.blob_scale_min = parse_num(key, value)?,
        "blob_scale_max" => cfg.blob_scale_max = parse_num(key, value)?,
        "texture_freq_min" => cfg.texture_freq_min = parse_num(key, value)?,
        "texture_freq_max" => cfg.texture_freq_max = parse_num(key, value)?,
        "noise_level" => cfg.noise_level = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Render a full run manifest: every config field, with the externally
/// sourced asymmetric-loss defaults flagged as assumptions.
pub fn render_manifest(cfg: &FileConfig) -> String {
    let mut out = String::new();
    out.push_str("[model]\n");
    for (k, v) in model_config_kv(&cfg.model) {
        out.push_str(&format!("{} = {}\n", k, v));
    }
    out.push_str("\n[train]\n");
    for (k, v) in train_config_kv(&cfg.train) {
        if k.starts_with("asl_") {
            out.push_str(&format!(
                "{} = {} # assumed default, not sourced from any experiment\n",
                k, v
            ));
        } else {
            out.push_str(&format!("{} = {}\n", k, v));
        }
    }
    out.push_str("\n[synth]\n");
    for (k, v) in synth_config_kv(&cfg.synth) {
        out.push_str(&format!("{} = {}\n", k, v));
    }
    out
}
