//! Finite-difference gradient checking.
//!
//! Analytic gradients from the tape are compared against central
//! differences of the forward value (float64, step 1e-5). The numeric side
//! never touches the backward machinery, so the two routes stay independent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, Var};
use crate::error::Result;
use crate::model::{build_model, GroupKind, ModelConfig, ModelGraph};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance threshold on the relative error.
pub const REL_TOL: f64 = 1e-4;
/// Elements with |analytic| + |numeric| below this are exempt.
pub const EXEMPT_ABS: f64 = 1e-8;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of compared gradient elements (exempt ones excluded).
    pub checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOL
    }
}

/// Relative error of one element pair, with the small-magnitude exemption.
fn rel_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs() + numeric.abs();
    if scale < EXEMPT_ABS {
        return None;
    }
    Some((analytic - numeric).abs() / scale)
}

struct OpSpec {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values bounded away from zero (for kinked ops like relu).
fn rand_tensor_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn check_spec(spec: &OpSpec, seed: u64) -> Result<CheckReport> {
    // probe the output shape, then fix a random weighting so the scalar
    // reduction exercises distinct output sensitivities
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = spec.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (spec.build)(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let weights = if out_shape.iter().product::<usize>() == 1 {
        None
    } else {
        let mut wrng = stream_rng(seed ^ 0x5eed, Stream::Aux);
        Some(rand_tensor(&out_shape, -1.0, 1.0, &mut wrng))
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (spec.build)(&mut g, &vars)?;
        let loss = match &weights {
            Some(w) => {
                let wv = g.constant(w.clone());
                let prod = g.mul(out, wv)?;
                g.sum(prod)
            }
            None => out,
        };
        g.value(loss).item()
    };

    // analytic gradients in one backward pass
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = spec
            .inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect();
        let out = (spec.build)(&mut g, &vars)?;
        let loss = match &weights {
            Some(w) => {
                let wv = g.constant(w.clone());
                let prod = g.mul(out, wv)?;
                g.sum(prod)
            }
            None => out,
        };
        g.backward(loss)?;
        vars.iter()
            .zip(&spec.inputs)
            .map(|(v, t)| {
                g.grad_data(*v)
                    .map(|d| d.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };

    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut inputs = spec.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let old = inputs[i].data()[j];
            inputs[i].data_mut()[j] = old + FD_STEP;
            let fp = eval(&inputs)?;
            inputs[i].data_mut()[j] = old - FD_STEP;
            let fm = eval(&inputs)?;
            inputs[i].data_mut()[j] = old;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            if let Some(err) = rel_error(analytic[i][j], numeric) {
                max_err = max_err.max(err);
                checked += 1;
            }
        }
    }
    Ok(CheckReport {
        name: spec.name.to_string(),
        max_rel_error: max_err,
        checked,
    })
}

/// Finite-difference checks for every differentiable op.
pub fn run_op_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = stream_rng(seed, Stream::Aux);
    let mut reports = Vec::new();

    let specs = vec![
        OpSpec {
            name: "conv2d",
            inputs: vec![
                rand_tensor(&[2, 3, 6, 6], -1.0, 1.0, &mut rng),
                rand_tensor(&[4, 3, 3, 3], -1.0, 1.0, &mut rng),
                rand_tensor(&[4], -0.5, 0.5, &mut rng),
            ],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        },
        OpSpec {
            name: "conv2d_strided_5x5",
            inputs: vec![
                rand_tensor(&[1, 2, 9, 9], -1.0, 1.0, &mut rng),
                rand_tensor(&[3, 2, 5, 5], -1.0, 1.0, &mut rng),
                rand_tensor(&[3], -0.5, 0.5, &mut rng),
            ],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 2)),
        },
        OpSpec {
            name: "linear",
            inputs: vec![
                rand_tensor(&[3, 5], -1.0, 1.0, &mut rng),
                rand_tensor(&[4, 5], -1.0, 1.0, &mut rng),
                rand_tensor(&[4], -1.0, 1.0, &mut rng),
            ],
            build: Box::new(|g, v| g.linear(v[0], v[1], v[2])),
        },
        OpSpec {
            name: "add",
            inputs: vec![
                rand_tensor(&[2, 3, 2, 2], -2.0, 2.0, &mut rng),
                rand_tensor(&[2, 3, 2, 2], -2.0, 2.0, &mut rng),
            ],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        OpSpec {
            name: "mul",
            inputs: vec![
                rand_tensor(&[3, 4], -2.0, 2.0, &mut rng),
                rand_tensor(&[3, 4], -2.0, 2.0, &mut rng),
            ],
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        OpSpec {
            name: "relu",
            inputs: vec![rand_tensor_off_zero(&[4, 6], &mut rng)],
            build: Box::new(|g, v| Ok(g.relu(v[0]))),
        },
        OpSpec {
            name: "silu",
            inputs: vec![rand_tensor(&[4, 6], -3.0, 3.0, &mut rng)],
            build: Box::new(|g, v| Ok(g.silu(v[0]))),
        },
        OpSpec {
            name: "global_avg_pool",
            inputs: vec![rand_tensor(&[2, 3, 4, 4], -2.0, 2.0, &mut rng)],
            build: Box::new(|g, v| g.global_avg_pool(v[0])),
        },
        OpSpec {
            name: "batch_norm_train",
            inputs: vec![
                rand_tensor(&[4, 3, 2, 2], -2.0, 2.0, &mut rng),
                rand_tensor(&[3], 0.5, 1.5, &mut rng),
                rand_tensor(&[3], -0.5, 0.5, &mut rng),
            ],
            build: Box::new(|g, v| {
                let mut rm = Tensor::zeros(&[3]);
                let mut rv = Tensor::full(&[3], 1.0);
                g.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, Mode::Train, false, 1e-5, 0.1)
            }),
        },
        OpSpec {
            name: "batch_norm_eval",
            inputs: vec![
                rand_tensor(&[4, 3, 2, 2], -2.0, 2.0, &mut rng),
                rand_tensor(&[3], 0.5, 1.5, &mut rng),
                rand_tensor(&[3], -0.5, 0.5, &mut rng),
            ],
            build: Box::new(|g, v| {
                let mut rm = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
                let mut rv = Tensor::from_vec(&[3], vec![0.9, 1.1, 0.7]).unwrap();
                g.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, Mode::Eval, false, 1e-5, 0.1)
            }),
        },
        OpSpec {
            name: "dropout_train",
            inputs: vec![rand_tensor(&[5, 6], -2.0, 2.0, &mut rng)],
            build: Box::new(|g, v| {
                // fixed stream: same mask on every evaluation
                let mut drng = stream_rng(1234, Stream::Dropout);
                g.dropout(v[0], 0.3, Mode::Train, &mut drng)
            }),
        },
        OpSpec {
            name: "bce_with_logits",
            inputs: vec![rand_tensor(&[3, 4], -4.0, 4.0, &mut rng)],
            build: Box::new(|g, v| {
                let targets = Tensor::from_vec(
                    &[3, 4],
                    vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0],
                )
                .unwrap();
                g.bce_with_logits(v[0], &targets)
            }),
        },
        OpSpec {
            name: "asymmetric_loss",
            // kink sits at logit(0.05) ~ -2.944; stay above -2.5
            inputs: vec![rand_tensor(&[3, 4], -2.5, 5.0, &mut rng)],
            build: Box::new(|g, v| {
                let targets = Tensor::from_vec(
                    &[3, 4],
                    vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0],
                )
                .unwrap();
                g.asymmetric_loss(v[0], &targets, 1.0, 4.0, 0.05)
            }),
        },
        OpSpec {
            name: "asymmetric_loss_no_shift",
            inputs: vec![rand_tensor(&[3, 4], -4.0, 4.0, &mut rng)],
            build: Box::new(|g, v| {
                let targets = Tensor::from_vec(
                    &[3, 4],
                    vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0],
                )
                .unwrap();
                g.asymmetric_loss(v[0], &targets, 2.0, 3.0, 0.0)
            }),
        },
    ];

    for spec in &specs {
        reports.push(check_spec(spec, seed)?);
    }
    Ok(reports)
}

/// Tiny configuration for whole-model checking.
pub fn tiny_config() -> ModelConfig {
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

/// Loss of the full model in train mode with a pinned dropout stream;
/// BN running stats are restored afterwards so repeated calls see the same
/// state.
fn model_loss(model: &mut ModelGraph, x: &Tensor, y: &Tensor, seed: u64) -> Result<f64> {
    let snapshot = model.buffers_snapshot();
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let xv = g.constant(x.clone());
    let mut drng = stream_rng(seed, Stream::Dropout);
    let logits = model.forward_full(&mut g, &vars, xv, Mode::Train, &mut drng, false)?;
    let loss = g.bce_with_logits(logits, y)?;
    let value = g.value(loss).item()?;
    model.buffers_restore(&snapshot);
    Ok(value)
}

/// Finite-difference check of every trainable parameter of the full model
/// (train mode: batch statistics, dropout mask, and both paths active).
pub fn run_full_model_check(seed: u64) -> Result<CheckReport> {
    let config = tiny_config();
    let mut model = build_model(&config, seed)?;
    let mut rng = stream_rng(seed, Stream::Aux);
    let x = rand_tensor(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let y = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();

    // analytic pass
    let snapshot = model.buffers_snapshot();
    {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut drng = stream_rng(seed, Stream::Dropout);
        let logits = model.forward_full(&mut g, &vars, xv, Mode::Train, &mut drng, false)?;
        let loss = g.bce_with_logits(logits, &y)?;
        g.backward(loss)?;
        model.accumulate_grads(&g, &vars)?;
    }
    model.buffers_restore(&snapshot);

    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for kind in [
        GroupKind::Backbone,
        GroupKind::Expansion,
        GroupKind::Fusion,
        GroupKind::Head,
    ] {
        let tensor_count = model.group_params(kind).len();
        for ti in 0..tensor_count {
            let numel = model.group_params(kind)[ti].numel();
            for j in 0..numel {
                let analytic = model.group_params(kind)[ti]
                    .grad
                    .as_ref()
                    .map(|g| g[j])
                    .unwrap_or(0.0);
                let old = model.group_params(kind)[ti].data()[j];
                model.group_params_mut(kind)[ti].data_mut()[j] = old + FD_STEP;
                let fp = model_loss(&mut model, &x, &y, seed)?;
                model.group_params_mut(kind)[ti].data_mut()[j] = old - FD_STEP;
                let fm = model_loss(&mut model, &x, &y, seed)?;
                model.group_params_mut(kind)[ti].data_mut()[j] = old;
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                if let Some(err) = rel_error(analytic, numeric) {
                    max_err = max_err.max(err);
                    checked += 1;
                }
            }
        }
    }
    Ok(CheckReport {
        name: "full_model".to_string(),
        max_rel_error: max_err,
        checked,
    })
}
